#include "tiger/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tiger/checkpoint.hpp"
#include "tiger/errors.hpp"

namespace tiger {

using ad::Tensor;
using ad::Var;

void BatchSpec::validate() const {
  if (batch_size <= 0) throw ConfigError("trainer.batch.batch_size must be positive");
  if (min_cells <= 0 || max_per_cell <= 0) throw ConfigError("trainer.batch: min_cells and max_per_cell must be positive");
  if (static_cast<long>(min_cells) * max_per_cell < batch_size) {
    throw ConfigError("trainer.batch: min_cells * max_per_cell must be >= batch_size");
  }
  if (!is_valid_nside(nside)) throw ConfigError("trainer.batch.nside must be a power of two");
}

namespace {

// Per-cell draw queue that prefers records whose (month, hour) bin is new to this cell.
struct CellQueue {
  std::vector<const Record*> pending;
  std::set<int> used_bins;
  std::size_t taken = 0;

  const Record* take(bool distinct) {
    std::size_t pick = 0;
    if (distinct) {
      for (std::size_t i = 0; i < pending.size(); ++i) {
        const Record* r = pending[i];
        if (!r->timestamp || !used_bins.count(torus_to_bin(r->torus()).flat())) {
          pick = i;
          break;
        }
      }
    }
    const Record* r = pending[pick];
    pending.erase(pending.begin() + static_cast<std::ptrdiff_t>(pick));
    if (r->timestamp) used_bins.insert(torus_to_bin(r->torus()).flat());
    ++taken;
    return r;
  }
};

}  // namespace

std::vector<const Record*> sample_batch(const Dataset& data, const BatchSpec& spec, std::mt19937_64& rng) {
  if (data.empty()) throw ContractError("sample_batch: empty dataset");
  spec.validate();
  std::map<std::int64_t, CellQueue> by_cell;
  for (const Record& r : data.records) by_cell[geo_to_cell(r.coord, spec.nside).index].pending.push_back(&r);
  std::vector<CellQueue*> cells;
  for (auto& [_, q] : by_cell) {
    std::shuffle(q.pending.begin(), q.pending.end(), rng);
    cells.push_back(&q);
  }
  std::shuffle(cells.begin(), cells.end(), rng);

  const std::size_t target = std::min(static_cast<std::size_t>(spec.batch_size), data.size());
  std::vector<const Record*> batch;
  batch.reserve(target);
  const bool distinct = spec.enforce_distinct_toy_tod;
  const std::size_t first = std::min({cells.size(), static_cast<std::size_t>(spec.min_cells), target});
  for (std::size_t i = 0; i < first; ++i) batch.push_back(cells[i]->take(distinct));

  const auto cap = static_cast<std::size_t>(spec.max_per_cell);
  for (bool capped : {true, false}) {
    while (batch.size() < target) {
      bool progress = false;
      for (CellQueue* q : cells) {
        if (batch.size() >= target) break;
        if (q->pending.empty() || (capped && q->taken >= cap)) continue;
        batch.push_back(q->take(distinct));
        progress = true;
      }
      if (!progress) break;
    }
  }
  std::stable_partition(batch.begin(), batch.end(), [](const Record* r) { return r->timestamp.has_value(); });
  return batch;
}

OptimizerState OptimizerState::zeros_like(const ModelParams& params) {
  OptimizerState s;
  s.m = params;
  s.m.visit([](const char*, Tensor& t) { t.fill(0.0); });
  s.v = s.m;
  return s;
}

void adamw_step(ModelParams& params, const ModelParams& grads, OptimizerState& state, double lr) {
  std::vector<std::pair<const char*, const Tensor*>> g;
  grads.visit([&](const char* name, const Tensor& t) { g.emplace_back(name, &t); });
  std::vector<Tensor*> m, v;
  state.m.visit([&](const char*, Tensor& t) { m.push_back(&t); });
  state.v.visit([&](const char*, Tensor& t) { v.push_back(&t); });

  std::size_t i = 0;
  params.visit([&](const char* name, const Tensor& p) {
    const Tensor& gi = *g[i].second;
    if (gi.shape() != p.shape() || m[i]->shape() != p.shape() || v[i]->shape() != p.shape()) {
      throw DimensionError(std::string("adamw_step: shape mismatch for ") + name + ": param " + ad::dims(p) +
                           ", grad " + ad::dims(gi));
    }
    for (double x : gi.values()) {
      if (!std::isfinite(x)) {
        throw NumericError(std::string("adamw_step: non-finite gradient in ") + name + " at step " +
                           std::to_string(state.step + 1));
      }
    }
    ++i;
  });

  const std::int64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  i = 0;
  params.visit([&](const char*, Tensor& p) {
    auto pv = p.values();
    auto gv = g[i].second->values();
    auto mv = m[i]->values();
    auto vv = v[i]->values();
    for (std::size_t k = 0; k < pv.size(); ++k) {
      mv[k] = state.beta1 * mv[k] + (1.0 - state.beta1) * gv[k];
      vv[k] = state.beta2 * vv[k] + (1.0 - state.beta2) * gv[k] * gv[k];
      const double mhat = mv[k] / bc1;
      const double vhat = vv[k] / bc2;
      pv[k] -= lr * state.weight_decay * pv[k];
      pv[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    ++i;
  });
}

void ScheduleConfig::validate() const {
  if (!(lr_max > 0.0)) throw ConfigError("trainer.schedule.lr_max must be > 0");
  if (!(lr_min >= 0.0 && lr_min < lr_max)) throw ConfigError("trainer.schedule: need 0 <= lr_min < lr_max");
  if (warmup_iters < 0 || warmup_iters >= total_iters) {
    throw ConfigError("trainer.schedule: need 0 <= warmup_iters < total_iters");
  }
}

double lr_at(int iter, const ScheduleConfig& s) {
  if (iter < 0 || iter > s.total_iters) {
    throw std::out_of_range("lr_at: iter " + std::to_string(iter) + " outside [0, " + std::to_string(s.total_iters) +
                            "]");
  }
  if (iter <= s.warmup_iters && s.warmup_iters > 0) {
    return s.lr_max * static_cast<double>(iter) / static_cast<double>(s.warmup_iters);
  }
  const double progress =
      static_cast<double>(iter - s.warmup_iters) / static_cast<double>(s.total_iters - s.warmup_iters);
  return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(kPi * progress));
}

void TrainerConfig::validate() const {
  batch.validate();
  schedule.validate();
  if (weights.geo < 0.0 || weights.time < 0.0) throw ConfigError("trainer.weights must be >= 0");
  if (checkpoint_every <= 0) throw ConfigError("trainer.checkpoint_every must be positive");
}

namespace {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(where + "." + key + ": unknown key");
    }
  }
}

}  // namespace

void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = nlohmann::json{
      {"batch",
       {{"batch_size", c.batch.batch_size},
        {"min_cells", c.batch.min_cells},
        {"max_per_cell", c.batch.max_per_cell},
        {"nside", c.batch.nside},
        {"enforce_distinct_toy_tod", c.batch.enforce_distinct_toy_tod}}},
      {"schedule",
       {{"lr_max", c.schedule.lr_max},
        {"lr_min", c.schedule.lr_min},
        {"warmup_iters", c.schedule.warmup_iters},
        {"total_iters", c.schedule.total_iters}}},
      {"weights", {{"geo", c.weights.geo}, {"time", c.weights.time}}},
      {"seed", c.seed},
      {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainerConfig& c) {
  reject_unknown(j, {"batch", "schedule", "weights", "seed", "checkpoint_every"}, "trainer");
  if (j.contains("batch")) {
    const auto& b = j["batch"];
    reject_unknown(b, {"batch_size", "min_cells", "max_per_cell", "nside", "enforce_distinct_toy_tod"},
                   "trainer.batch");
    read_key(b, "batch_size", c.batch.batch_size, "trainer.batch");
    read_key(b, "min_cells", c.batch.min_cells, "trainer.batch");
    read_key(b, "max_per_cell", c.batch.max_per_cell, "trainer.batch");
    read_key(b, "nside", c.batch.nside, "trainer.batch");
    read_key(b, "enforce_distinct_toy_tod", c.batch.enforce_distinct_toy_tod, "trainer.batch");
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    reject_unknown(s, {"lr_max", "lr_min", "warmup_iters", "total_iters"}, "trainer.schedule");
    read_key(s, "lr_max", c.schedule.lr_max, "trainer.schedule");
    read_key(s, "lr_min", c.schedule.lr_min, "trainer.schedule");
    read_key(s, "warmup_iters", c.schedule.warmup_iters, "trainer.schedule");
    read_key(s, "total_iters", c.schedule.total_iters, "trainer.schedule");
  }
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    reject_unknown(w, {"geo", "time"}, "trainer.weights");
    read_key(w, "geo", c.weights.geo, "trainer.weights");
    read_key(w, "time", c.weights.time, "trainer.weights");
  }
  read_key(j, "seed", c.seed, "trainer");
  read_key(j, "checkpoint_every", c.checkpoint_every, "trainer");
}

TargetTables TargetTables::build(const ModelConfig& cfg) {
  return TargetTables{geo_affinity(cfg.geo_nside, kGeoGamma), time_affinity(kTimeGamma)};
}

namespace {

struct BatchGraph {
  LossGraph loss;
  BoundParams bound;
};

BatchGraph build_batch_graph(ad::Tape& tape, const ModelParams& params, std::span<const Record* const> batch,
                             const ModelConfig& cfg, const TargetTables& tables, const LossWeights& weights,
                             bool trainable) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const std::size_t n = batch.size();
  std::size_t m = 0;
  while (m < n && batch[m]->timestamp) ++m;
  for (std::size_t i = m; i < n; ++i) {
    if (batch[i]->timestamp) throw ContractError("train_step: timed records must precede location-only records");
  }

  std::vector<std::vector<double>> feats;
  std::vector<GeoCoord> coords;
  std::vector<TorusTime> times;
  std::vector<std::size_t> geo_cls, time_cls;
  for (std::size_t i = 0; i < n; ++i) {
    feats.push_back(batch[i]->feature);
    coords.push_back(batch[i]->coord);
    geo_cls.push_back(static_cast<std::size_t>(geo_to_cell(batch[i]->coord, cfg.geo_nside).index));
    if (i < m) {
      times.push_back(batch[i]->torus());
      time_cls.push_back(static_cast<std::size_t>(torus_to_bin(times.back()).flat()));
    }
  }

  Forward f(tape, cfg, params, trainable);
  const auto nv = static_cast<std::size_t>(cfg.n_tokens_v);
  const auto nl = static_cast<std::size_t>(cfg.n_tokens_l);
  Var img = f.adapt_images(stack_rows(feats));
  Var loc = f.encode_locations(coords);

  SixEmbeddings e;
  e.v = f.fuse(img, Modality::kImage);
  e.l = f.fuse(loc, Modality::kLocation);
  Var geo_probs = ad::softmax_rows(f.geo_logits(e.v));
  const Tensor geo_targets = soft_targets(geo_cls, tables.geo);
  Var time_probs;
  Tensor time_targets;
  if (m > 0) {
    Var tim = f.encode_times(times);
    Var img_m = m == n ? img : ad::slice_rows(img, 0, m * nv);
    Var loc_m = m == n ? loc : ad::slice_rows(loc, 0, m * nl);
    e.t = f.fuse(tim, Modality::kTime);
    e.vl = f.fuse(img_m, Modality::kImage, loc_m, Modality::kLocation).fused;
    e.vt = f.fuse(img_m, Modality::kImage, tim, Modality::kTime).fused;
    e.lt = f.fuse(loc_m, Modality::kLocation, tim, Modality::kTime).fused;
    Var v_m = m == n ? e.v : ad::slice_rows(e.v, 0, m);
    time_probs = ad::softmax_rows(f.time_logits(v_m));
    time_targets = soft_targets(time_cls, tables.time);
  }
  BatchGraph g{total_loss(e, geo_probs, geo_targets, time_probs, time_targets, cfg.tau, weights), f.bound()};
  return g;
}

}  // namespace

LossBreakdown train_step(ModelParams& params, OptimizerState& opt, std::span<const Record* const> batch,
                         const ModelConfig& cfg, const TargetTables& tables, const LossWeights& weights, double lr) {
  ad::Tape tape;
  BatchGraph g = build_batch_graph(tape, params, batch, cfg, tables, weights, true);
  if (!std::isfinite(g.loss.breakdown.total)) {
    throw NumericError("train_step: non-finite loss at step " + std::to_string(opt.step + 1));
  }
  tape.backward(g.loss.total);
  ModelParams grads;
  std::vector<const Tensor*> gl;
  g.bound.visit([&](const char*, const Var& v) { gl.push_back(&v.grad()); });
  std::size_t i = 0;
  grads.visit([&](const char*, Tensor& t) { t = *gl[i++]; });
  adamw_step(params, grads, opt, lr);
  return g.loss.breakdown;
}

LossGradients compute_gradients(const ModelParams& params, std::span<const Record* const> batch,
                                const ModelConfig& cfg, const TargetTables& tables, const LossWeights& weights) {
  ad::Tape tape;
  BatchGraph g = build_batch_graph(tape, params, batch, cfg, tables, weights, true);
  tape.backward(g.loss.total);
  LossGradients out;
  out.loss = g.loss.breakdown;
  std::vector<const Tensor*> gl;
  g.bound.visit([&](const char*, const Var& v) { gl.push_back(&v.grad()); });
  std::size_t i = 0;
  out.grads.visit([&](const char*, Tensor& t) { t = *gl[i++]; });
  return out;
}

LossBreakdown evaluate_loss(const ModelParams& params, std::span<const Record* const> batch, const ModelConfig& cfg,
                            const TargetTables& tables, const LossWeights& weights) {
  ad::Tape tape;
  return build_batch_graph(tape, params, batch, cfg, tables, weights, false).loss.breakdown;
}

std::string log_header() { return "iter,lr,v_l,v_t,v_lt,l_vt,t_vl,geo,time,total"; }

std::string format_log_row(const LogRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.iter, r.lr,
                r.loss.v_l, r.loss.v_t, r.loss.v_lt, r.loss.l_vt, r.loss.t_vl, r.loss.geo, r.loss.time,
                r.loss.total);
  return buf;
}

std::vector<LogRow> read_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != log_header()) throw IoError(path.string() + ": unexpected header");
  std::vector<LogRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    LogRow r;
    const int got = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &r.iter, &r.lr, &r.loss.v_l,
                                &r.loss.v_t, &r.loss.v_lt, &r.loss.l_vt, &r.loss.t_vl, &r.loss.geo, &r.loss.time,
                                &r.loss.total);
    if (got != 10) throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed log row");
    rows.push_back(r);
  }
  return rows;
}

void save_training_state(const std::filesystem::path& path, const ModelParams& params, const OptimizerState& opt) {
  std::vector<NamedTensor> out;
  params.visit([&](const char* name, const Tensor& t) { out.push_back({std::string("param/") + name, t}); });
  opt.m.visit([&](const char* name, const Tensor& t) { out.push_back({std::string("m/") + name, t}); });
  opt.v.visit([&](const char* name, const Tensor& t) { out.push_back({std::string("v/") + name, t}); });
  out.push_back({"step", Tensor::scalar(static_cast<double>(opt.step))});
  save_tensors(path, out, Precision::kFloat64);
}

void load_training_state(const std::filesystem::path& path, const ModelConfig& cfg, ModelParams& params,
                         OptimizerState& opt) {
  const auto all = load_tensors(path);
  auto group = [&](const std::string& prefix) {
    std::vector<NamedTensor> sel;
    for (const auto& nt : all)
      if (nt.name.rfind(prefix, 0) == 0) sel.push_back({nt.name.substr(prefix.size()), nt.tensor});
    return sel;
  };
  params = from_named(group("param/"), cfg);
  opt = OptimizerState{};
  opt.m = from_named(group("m/"), cfg);
  opt.v = from_named(group("v/"), cfg);
  auto it = std::find_if(all.begin(), all.end(), [](const NamedTensor& nt) { return nt.name == "step"; });
  if (it == all.end()) throw IoError(path.string() + ": missing step");
  opt.step = static_cast<std::int64_t>(it->tensor.item());
}

std::mt19937_64 iteration_rng(std::uint64_t seed, int iter) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iter), 0x7167u};
  return std::mt19937_64(seq);
}

TrainingResult run_training(const Dataset& data, const ModelConfig& model_cfg, const TrainerConfig& cfg,
                            const RunOptions& options) {
  model_cfg.validate();
  cfg.validate();
  if (data.empty()) throw ContractError("run_training: empty dataset");
  data.validate();
  if (data.feature_width() != static_cast<std::size_t>(model_cfg.img_feat_dim)) {
    throw DimensionError("run_training: dataset feature width " + std::to_string(data.feature_width()) +
                         " does not match model img_feat_dim " + std::to_string(model_cfg.img_feat_dim));
  }
  const TargetTables tables = TargetTables::build(model_cfg);

  TrainingResult res;
  const bool write = !options.out_dir.empty();
  const auto log_path = options.out_dir / "loss_log.csv";
  if (options.resume) {
    load_training_state(*options.resume, model_cfg, res.params, res.optimizer);
    if (write && std::filesystem::exists(log_path)) {
      for (const LogRow& r : read_log(log_path))
        if (r.iter <= res.optimizer.step) res.log.push_back(r);
    }
  } else {
    res.params = init_params(model_cfg, cfg.seed);
    res.optimizer = OptimizerState::zeros_like(res.params);
  }
  if (write) std::filesystem::create_directories(options.out_dir);

  auto flush_log = [&] {
    std::string text = log_header() + "\n";
    for (const LogRow& r : res.log) text += format_log_row(r) + "\n";
    atomic_write(log_path, text);
  };

  const int total = cfg.schedule.total_iters;
  for (int iter = static_cast<int>(res.optimizer.step) + 1; iter <= total; ++iter) {
    std::mt19937_64 rng = iteration_rng(cfg.seed, iter);
    const auto batch = sample_batch(data, cfg.batch, rng);
    const double lr = lr_at(iter, cfg.schedule);
    LogRow row{iter, lr, train_step(res.params, res.optimizer, batch, model_cfg, tables, cfg.weights, lr)};
    res.log.push_back(row);
    if (options.on_iter) options.on_iter(row);
    if (iter % cfg.checkpoint_every == 0 || iter == total) {
      if (write) {
        if (iter % cfg.checkpoint_every == 0) {
          save_checkpoint(options.out_dir / ("model_" + std::to_string(iter) + ".ckpt"), model_cfg, res.params);
        }
        if (iter == total) save_checkpoint(options.out_dir / "model_final.ckpt", model_cfg, res.params);
        save_training_state(options.out_dir / ("state_" + std::to_string(iter) + ".bin"), res.params,
                            res.optimizer);
        flush_log();
      }
      if (options.on_checkpoint) options.on_checkpoint(iter, res.params);
    }
  }
  if (write) flush_log();
  return res;
}

}  // namespace tiger
