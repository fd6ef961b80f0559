#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "tiger/trainer.hpp"

namespace tiger::test {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Max relative error between compute_gradients and central differences of
// evaluate_loss over every parameter element.
inline double full_loss_gradient_error(const ModelParams& params, std::span<const Record* const> batch,
                                       const ModelConfig& cfg, const TargetTables& tables, const LossWeights& w,
                                       double h = 1e-5) {
  const LossGradients lg = compute_gradients(params, batch, cfg, tables, w);
  std::vector<const ad::Tensor*> grads;
  lg.grads.visit([&](const char*, const ad::Tensor& g) { grads.push_back(&g); });
  ModelParams p = params;
  std::vector<ad::Tensor*> slots;
  p.visit([&](const char*, ad::Tensor& t) { slots.push_back(&t); });
  double worst = 0.0;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    ad::Tensor& t = *slots[k];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t[i];
      t[i] = x0 + h;
      const double fp = evaluate_loss(p, batch, cfg, tables, w).total;
      t[i] = x0 - h;
      const double fm = evaluate_loss(p, batch, cfg, tables, w).total;
      t[i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = (*grads[k])[i];
      worst = std::max(worst, relative_error(ana, num));
    }
  }
  return worst;
}

}  // namespace tiger::test
