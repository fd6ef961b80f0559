#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "tiger/tensor.hpp"

namespace tiger::test {

inline ad::Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  ad::Tensor t = ad::Tensor::matrix(r, c);
  for (double& v : t.values()) v = n(rng);
  return t;
}

inline ad::Tensor random_unit_rows(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  ad::Tensor t = random_matrix(r, c, rng);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (double v : t.row(i)) s += v * v;
    s = std::sqrt(s);
    for (double& v : t.row(i)) v /= s;
  }
  return t;
}

inline double max_abs_diff(const ad::Tensor& a, const ad::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tiger_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace tiger::test
