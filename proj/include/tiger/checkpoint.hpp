#pragma once

/// @file checkpoint.hpp
/// @brief Flat binary tensor files.
///
/// Layout (all integers little-endian):
///
///     magic   "TIGR"                      4 bytes
///     version u32                          1 = float32 payload, 2 = float64 payload
///     count   u32
///     count x {
///       name_len u32, name bytes,
///       rank u32, dims u64[rank],
///       payload  (product(dims) little-endian floats)
///     }
///
/// Version 1 is the parameter checkpoint format. Version 2 carries exact
/// training state (weights plus optimizer moments) so a resumed run matches an
/// uninterrupted one bit for bit.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tiger/tensor.hpp"

namespace tiger {

enum class Precision : std::uint32_t { kFloat32 = 1, kFloat64 = 2 };

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                  Precision precision = Precision::kFloat32);

/// Throws IoError with the path on any read or format failure.
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

std::vector<char> encode_tensors(const std::vector<NamedTensor>& tensors, Precision precision);
std::vector<NamedTensor> decode_tensors(const std::vector<char>& bytes, const std::string& origin);

/// Rounds every value to the nearest float32.
ad::Tensor round_to_float(const ad::Tensor& t);

/// Writes `bytes` to `path` through a temporary sibling and a rename.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);
void atomic_write(const std::filesystem::path& path, const std::vector<char>& bytes);

std::vector<char> read_file(const std::filesystem::path& path);

}  // namespace tiger
