#include "tiger/objectives.hpp"

#include <cmath>

#include "tiger/errors.hpp"

namespace tiger {

using ad::Tensor;
using ad::Var;

AffinityTable build_affinity(const Tensor& distances, Metric metric, double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("build_affinity: gamma must be > 0, got " + std::to_string(gamma));
  if (distances.rows() != distances.cols()) {
    throw DimensionError("build_affinity: distance matrix " + ad::dims(distances) + " is not square");
  }
  const std::size_t n = distances.rows();
  AffinityTable table;
  table.metric = metric;
  table.gamma = gamma;
  table.k = Tensor::matrix(n, n);
  table.row_sums.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Distances are >= 0 with a zero diagonal, so exp(-d/gamma) <= 1 and never overflows.
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(-distances(i, j) / gamma);
      table.k(i, j) = e;
      z += e;
    }
    table.row_sums[i] = z;
    for (double& v : table.k.row(i)) v /= z;
  }
  return table;
}

AffinityTable build_affinity(std::span<const GeoCoord> centers, double gamma) {
  const std::size_t n = centers.size();
  Tensor dist = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist(i, j) = dist(j, i) = haversine_km(centers[i], centers[j]);
  return build_affinity(dist, Metric::kHaversineKm, gamma);
}

AffinityTable build_affinity(std::span<const TorusTime> centers, double gamma) {
  const std::size_t n = centers.size();
  Tensor dist = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist(i, j) = dist(j, i) = torus_distance(centers[i], centers[j]);
  return build_affinity(dist, Metric::kTorus, gamma);
}

AffinityTable geo_affinity(int nside, double gamma) {
  std::vector<GeoCoord> centers;
  for (std::int64_t i = 0; i < cell_count(nside); ++i) centers.push_back(cell_center(CellId{nside, i}));
  return build_affinity(centers, gamma);
}

AffinityTable time_affinity(double gamma) {
  std::vector<TorusTime> centers;
  for (int i = 0; i < kTimeBins; ++i) centers.push_back(bin_center(TimeBinId::from_flat(i)));
  return build_affinity(centers, gamma);
}

std::vector<double> soft_target(std::size_t cls, const AffinityTable& table) {
  if (cls >= table.classes()) {
    throw ContractError("soft_target: class " + std::to_string(cls) + " outside table of " +
                        std::to_string(table.classes()));
  }
  auto row = table.k.row(cls);
  std::vector<double> out(row.begin(), row.end());
  double s = 0.0;
  for (double v : out) s += v;
  for (double& v : out) v /= s;
  return out;
}

Tensor soft_targets(std::span<const std::size_t> classes, const AffinityTable& table) {
  Tensor out = Tensor::matrix(classes.size(), table.classes());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto t = soft_target(classes[i], table);
    std::copy(t.begin(), t.end(), out.row(i).begin());
  }
  return out;
}

double soft_cross_entropy(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw DimensionError("soft_cross_entropy: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(target.size()) + " targets");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (target[i] != 0.0) s -= target[i] * std::log(std::max(pred[i], kProbFloor));
  }
  return s;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

namespace {

// Mean over rows of -log softmax(s)_ii.
Var directional_nce(Var sims) { return ad::scale(ad::mean_all(ad::diag(ad::log_softmax_rows(sims))), -1.0); }

}  // namespace

Var info_nce(Var x, Var y, double tau) {
  if (x.rows() == 0) throw ContractError("info_nce: empty batch");
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw DimensionError("info_nce: incompatible shapes " + ad::dims(x.value()) + " and " + ad::dims(y.value()));
  }
  if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be > 0");
  Var sims = ad::scale(ad::matmul(x, ad::transpose(y)), 1.0 / tau);
  return ad::scale(ad::add(directional_nce(sims), directional_nce(ad::transpose(sims))), 0.5);
}

double info_nce(const Tensor& x, const Tensor& y, double tau) {
  ad::Tape tape;
  return info_nce(tape.constant(x), tape.constant(y), tau).value().item();
}

ContrastiveTerms contrastive_terms(const SixEmbeddings& e, double tau) {
  const std::size_t n = e.v.rows();
  for (const Var* x : {&e.l, &e.t, &e.vl, &e.vt, &e.lt}) {
    if (x->rows() != n) {
      throw ContractError("total_contrastive: batch size mismatch (" + std::to_string(n) + " vs " +
                          std::to_string(x->rows()) + ")");
    }
  }
  // (l, t) is deliberately absent.
  return ContrastiveTerms{info_nce(e.v, e.l, tau), info_nce(e.v, e.t, tau), info_nce(e.v, e.lt, tau),
                          info_nce(e.l, e.vt, tau), info_nce(e.t, e.vl, tau)};
}

Var total_contrastive(const SixEmbeddings& e, double tau) {
  const ContrastiveTerms c = contrastive_terms(e, tau);
  return ad::add(ad::add(ad::add(ad::add(c.v_l, c.v_t), c.v_lt), c.l_vt), c.t_vl);
}

Var soft_cross_entropy_rows(Var probs, const Tensor& targets) {
  if (probs.rows() != targets.rows() || probs.cols() != targets.cols()) {
    throw DimensionError("soft_cross_entropy_rows: incompatible shapes " + ad::dims(probs.value()) + " and " +
                         ad::dims(targets));
  }
  if (probs.rows() == 0) throw ContractError("soft_cross_entropy_rows: empty batch");
  Var t = probs.tape().constant(targets);
  Var s = ad::sum_all(ad::mul(ad::log(probs, kProbFloor), t));
  return ad::scale(s, -1.0 / static_cast<double>(probs.rows()));
}

LossGraph total_loss(const SixEmbeddings& e, Var geo_probs, const Tensor& geo_targets, Var time_probs,
                     const Tensor& time_targets, double tau, const LossWeights& weights) {
  const std::size_t n = e.v.rows();
  const std::size_t m = e.t.valid() ? e.t.rows() : 0;
  if (n == 0) throw ContractError("total_loss: empty batch");
  if (e.l.rows() != n || geo_probs.rows() != n) throw ContractError("total_loss: location batch size mismatch");
  if (m > n) throw ContractError("total_loss: more timed samples than samples");

  ad::Tape& tape = e.v.tape();
  LossGraph g;
  Var v_l = info_nce(e.v, e.l, tau);
  Var contrastive = v_l;
  g.breakdown.v_l = v_l.value().item();
  if (m > 0) {
    Var v = m == n ? e.v : ad::slice_rows(e.v, 0, m);
    Var l = m == n ? e.l : ad::slice_rows(e.l, 0, m);
    const SixEmbeddings timed{v, l, e.t, e.vl, e.vt, e.lt};
    const ContrastiveTerms c = contrastive_terms(timed, tau);
    contrastive = ad::add(ad::add(ad::add(ad::add(c.v_l, c.v_t), c.v_lt), c.l_vt), c.t_vl);
    if (m < n) {
      // (v,l) over all N samples replaces the timed-only (v,l) term.
      contrastive = ad::add(ad::sub(contrastive, c.v_l), v_l);
    } else {
      g.breakdown.v_l = c.v_l.value().item();
    }
    g.breakdown.v_t = c.v_t.value().item();
    g.breakdown.v_lt = c.v_lt.value().item();
    g.breakdown.l_vt = c.l_vt.value().item();
    g.breakdown.t_vl = c.t_vl.value().item();
  }

  Var total = contrastive;
  if (weights.geo != 0.0) {
    Var geo = soft_cross_entropy_rows(geo_probs, geo_targets);
    g.breakdown.geo = geo.value().item();
    total = ad::add(total, ad::scale(geo, weights.geo));
  } else {
    g.breakdown.geo = soft_cross_entropy_rows(tape.constant(geo_probs.value()), geo_targets).value().item();
  }
  if (m > 0) {
    if (weights.time != 0.0) {
      Var tl = soft_cross_entropy_rows(time_probs, time_targets);
      g.breakdown.time = tl.value().item();
      total = ad::add(total, ad::scale(tl, weights.time));
    } else {
      g.breakdown.time =
          soft_cross_entropy_rows(tape.constant(time_probs.value()), time_targets).value().item();
    }
  }
  g.total = total;
  g.breakdown.total = total.value().item();
  return g;
}

}  // namespace tiger
