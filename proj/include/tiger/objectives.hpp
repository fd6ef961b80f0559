#pragma once

/// @file objectives.hpp
/// @brief Contrastive and metric-aware classification losses.

#include <span>
#include <vector>

#include "tiger/geomath.hpp"
#include "tiger/tape.hpp"

namespace tiger {

enum class Metric { kHaversineKm, kTorus };

/// Row-stochastic affinity between class centers: row i is
/// softmax_j(-dist(C_i, C_j) / gamma).
struct AffinityTable {
  ad::Tensor k;
  Metric metric = Metric::kTorus;
  double gamma = 1.0;
  /// Per-row normalizer sum_j exp(-dist_ij / gamma).
  std::vector<double> row_sums;

  std::size_t classes() const { return k.rows(); }
};

inline constexpr double kGeoGamma = 250.0;
inline constexpr double kTimeGamma = 1.0;
inline constexpr double kProbFloor = 1e-12;

/// Table from an explicit symmetric distance matrix. Throws ConfigError for gamma <= 0.
AffinityTable build_affinity(const ad::Tensor& distances, Metric metric, double gamma);
AffinityTable build_affinity(std::span<const GeoCoord> centers, double gamma);
AffinityTable build_affinity(std::span<const TorusTime> centers, double gamma);

/// All 12*nside^2 cell centers under great-circle distance in km.
AffinityTable geo_affinity(int nside = 8, double gamma = kGeoGamma);
/// All 288 bin centers (flat-index order) under torus distance.
AffinityTable time_affinity(double gamma = kTimeGamma);

/// Row `cls` of the table, renormalized to sum to one.
std::vector<double> soft_target(std::size_t cls, const AffinityTable& table);
/// Stacks soft targets for a batch of class indices.
ad::Tensor soft_targets(std::span<const std::size_t> classes, const AffinityTable& table);

/// -sum_i target_i * log(max(pred_i, 1e-12)).
double soft_cross_entropy(std::span<const double> pred, std::span<const double> target);
/// Shannon entropy in nats.
double entropy(std::span<const double> p);

/// Symmetrized InfoNCE over matched unit rows of x and y. Throws ContractError
/// for an empty batch and DimensionError for mismatched shapes.
ad::Var info_nce(ad::Var x, ad::Var y, double tau);
double info_nce(const ad::Tensor& x, const ad::Tensor& y, double tau);

/// The six per-sample embeddings of one batch.
struct SixEmbeddings {
  ad::Var v, l, t, vl, vt, lt;
};

/// The five contrastive pair terms, in the order
/// (v,l), (v,t), (v,lt), (l,vt), (t,vl).
struct ContrastiveTerms {
  ad::Var v_l, v_t, v_lt, l_vt, t_vl;
};

/// Requires all six batches to share a row count; ContractError otherwise.
ContrastiveTerms contrastive_terms(const SixEmbeddings& e, double tau);
ad::Var total_contrastive(const SixEmbeddings& e, double tau);

/// Mean over rows of the soft cross-entropy between probability rows and target rows.
ad::Var soft_cross_entropy_rows(ad::Var probs, const ad::Tensor& targets);

struct LossBreakdown {
  double v_l = 0, v_t = 0, v_lt = 0, l_vt = 0, t_vl = 0;
  double geo = 0, time = 0;
  double total = 0;

  double contrastive() const { return v_l + v_t + v_lt + l_vt + t_vl; }
};

struct LossWeights {
  double geo = 1.0;
  double time = 1.0;
};

struct LossGraph {
  ad::Var total;
  LossBreakdown breakdown;
};

/// Full objective. v, l, geo_probs and geo_targets cover all N samples; the
/// time-dependent inputs (t, vl, vt, lt, time_probs, time_targets) cover the
/// first M <= N samples, which lets location-only records contribute only the
/// (v,l) term and the geo head. With M == 0 those terms are zero.
LossGraph total_loss(const SixEmbeddings& e, ad::Var geo_probs, const ad::Tensor& geo_targets, ad::Var time_probs,
                     const ad::Tensor& time_targets, double tau, const LossWeights& weights);

}  // namespace tiger
