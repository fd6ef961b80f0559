#include "tiger/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <unordered_map>

namespace tiger {

using ad::Tensor;
using ad::Var;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(d, "d");
  positive(heads, "heads");
  positive(n_freq, "n_freq");
  positive(n_tokens_v, "n_tokens_v");
  positive(n_tokens_l, "n_tokens_l");
  positive(n_tokens_t, "n_tokens_t");
  positive(img_feat_dim, "img_feat_dim");
  if (d % heads != 0) {
    throw ConfigError("model.d (" + std::to_string(d) + ") must be divisible by model.heads (" +
                      std::to_string(heads) + ")");
  }
  if (!is_valid_nside(geo_nside)) throw ConfigError("model.geo_nside must be a power of two");
  if (n_geo_classes != cell_count(geo_nside)) {
    throw ConfigError("model.n_geo_classes must equal 12*geo_nside^2 = " + std::to_string(cell_count(geo_nside)));
  }
  if (n_time_classes != kTimeBins) throw ConfigError("model.n_time_classes must be 288");
  if (!(tau > 0.0)) throw ConfigError("model.tau must be > 0");
}

int ModelConfig::tokens(Modality m) const {
  switch (m) {
    case Modality::kImage:
      return n_tokens_v;
    case Modality::kLocation:
      return n_tokens_l;
    case Modality::kTime:
      return n_tokens_t;
  }
  return 1;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"heads", c.heads},
                     {"n_freq", c.n_freq},
                     {"n_tokens_v", c.n_tokens_v},
                     {"n_tokens_l", c.n_tokens_l},
                     {"n_tokens_t", c.n_tokens_t},
                     {"img_feat_dim", c.img_feat_dim},
                     {"geo_nside", c.geo_nside},
                     {"n_geo_classes", c.n_geo_classes},
                     {"n_time_classes", c.n_time_classes},
                     {"tau", c.tau}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const char* kKeys[] = {"d",          "heads",        "n_freq",    "n_tokens_v",    "n_tokens_l", "n_tokens_t",
                                "img_feat_dim", "geo_nside", "n_geo_classes", "n_time_classes", "tau"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw ConfigError("model." + key + ": unknown key");
    }
  }
  c.d = j.value("d", c.d);
  c.heads = j.value("heads", c.heads);
  c.n_freq = j.value("n_freq", c.n_freq);
  c.n_tokens_v = j.value("n_tokens_v", c.n_tokens_v);
  c.n_tokens_l = j.value("n_tokens_l", c.n_tokens_l);
  c.n_tokens_t = j.value("n_tokens_t", c.n_tokens_t);
  c.img_feat_dim = j.value("img_feat_dim", c.img_feat_dim);
  c.geo_nside = j.value("geo_nside", c.geo_nside);
  c.n_geo_classes = j.value("n_geo_classes", static_cast<int>(cell_count(c.geo_nside)));
  c.n_time_classes = j.value("n_time_classes", c.n_time_classes);
  c.tau = j.value("tau", c.tau);
}

namespace {

struct ShapeSpec {
  std::size_t rows, cols;
  enum Kind { kWeight, kBias, kGain } kind;
};

// Shape of every named tensor for a config.
std::unordered_map<std::string, ShapeSpec> layout(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d);
  const std::size_t rff = static_cast<std::size_t>(c.rff_width());
  const std::size_t nl = static_cast<std::size_t>(c.n_tokens_l);
  const std::size_t nt = static_cast<std::size_t>(c.n_tokens_t);
  const std::size_t nv = static_cast<std::size_t>(c.n_tokens_v);
  const std::size_t feat = static_cast<std::size_t>(c.img_feat_dim);
  const std::size_t geo = static_cast<std::size_t>(c.n_geo_classes);
  const std::size_t tbins = static_cast<std::size_t>(c.n_time_classes);
  using K = ShapeSpec::Kind;
  return {
      {"loc_w1", {rff, d, K::kWeight}},        {"loc_b1", {1, d, K::kBias}},
      {"loc_w2", {d, nl * d, K::kWeight}},     {"loc_b2", {1, nl * d, K::kBias}},
      {"loc_ln_g", {1, d, K::kGain}},          {"loc_ln_b", {1, d, K::kBias}},
      {"time_w1", {rff, d, K::kWeight}},       {"time_b1", {1, d, K::kBias}},
      {"time_w2", {d, nt * d, K::kWeight}},    {"time_b2", {1, nt * d, K::kBias}},
      {"time_ln_g", {1, d, K::kGain}},         {"time_ln_b", {1, d, K::kBias}},
      {"img_w", {feat, nv * d, K::kWeight}},   {"img_b", {1, nv * d, K::kBias}},
      {"img_ln_g", {1, d, K::kGain}},          {"img_ln_b", {1, d, K::kBias}},
      {"ln1_g", {1, d, K::kGain}},             {"ln1_b", {1, d, K::kBias}},
      {"wq", {d, d, K::kWeight}},              {"bq", {1, d, K::kBias}},
      {"wk", {d, d, K::kWeight}},              {"bk", {1, d, K::kBias}},
      {"wv", {d, d, K::kWeight}},              {"bv", {1, d, K::kBias}},
      {"wo", {d, d, K::kWeight}},              {"bo", {1, d, K::kBias}},
      {"ln2_g", {1, d, K::kGain}},             {"ln2_b", {1, d, K::kBias}},
      {"mlp_w1", {d, 4 * d, K::kWeight}},      {"mlp_b1", {1, 4 * d, K::kBias}},
      {"mlp_w2", {4 * d, d, K::kWeight}},      {"mlp_b2", {1, d, K::kBias}},
      {"proj_v_w", {d, d, K::kWeight}},        {"proj_v_b", {1, d, K::kBias}},
      {"proj_l_w", {d, d, K::kWeight}},        {"proj_l_b", {1, d, K::kBias}},
      {"proj_t_w", {d, d, K::kWeight}},        {"proj_t_b", {1, d, K::kBias}},
      {"geo_w1", {d, d, K::kWeight}},          {"geo_b1", {1, d, K::kBias}},
      {"geo_w2", {d, geo, K::kWeight}},        {"geo_b2", {1, geo, K::kBias}},
      {"timeh_w1", {d, d, K::kWeight}},        {"timeh_b1", {1, d, K::kBias}},
      {"timeh_w2", {d, tbins, K::kWeight}},    {"timeh_b2", {1, tbins, K::kBias}},
  };
}

Var linear(Var x, Var w, Var b) { return ad::add_row(ad::matmul(x, w), b); }

Var layer_norm_affine(Var x, Var gain, Var bias) {
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), gain), bias);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto shapes = layout(cfg);
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.visit([&](const char* name, Tensor& t) {
    const ShapeSpec& s = shapes.at(name);
    t = Tensor::matrix(s.rows, s.cols);
    switch (s.kind) {
      case ShapeSpec::kWeight: {
        std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(s.rows)));
        for (double& v : t.values()) v = dist(rng);
        break;
      }
      case ShapeSpec::kGain:
        t.fill(1.0);
        break;
      case ShapeSpec::kBias:
        break;
    }
  });
  return p;
}

std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  p.visit([&](const char*, const Tensor& t) { n += t.size(); });
  return n;
}

std::vector<NamedTensor> to_named(const ModelParams& p) {
  std::vector<NamedTensor> out;
  p.visit([&](const char* name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

ModelParams from_named(const std::vector<NamedTensor>& tensors, const ModelConfig& cfg) {
  cfg.validate();
  const auto shapes = layout(cfg);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = &nt.tensor;
  ModelParams p;
  p.visit([&](const char* name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError(std::string("checkpoint is missing tensor '") + name + "'");
    const ShapeSpec& s = shapes.at(name);
    if (it->second->rows() != s.rows || it->second->cols() != s.cols) {
      throw IoError(std::string("checkpoint tensor '") + name + "' has shape " + dims(*it->second) + ", expected " +
                    std::to_string(s.rows) + "x" + std::to_string(s.cols));
    }
    t = it->second->reshaped(ad::Shape{s.rows, s.cols});
  });
  return p;
}

bool all_finite(const ModelParams& p) {
  bool ok = true;
  p.visit([&](const char*, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

std::vector<double> rff_features(double a, double b, int n_freq) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(4 * n_freq));
  for (int i = 0; i < n_freq; ++i) {
    const double f = std::ldexp(1.0, i);
    out.push_back(std::sin(f * a));
    out.push_back(std::cos(f * a));
    out.push_back(std::sin(f * b));
    out.push_back(std::cos(f * b));
  }
  return out;
}

std::vector<double> location_features(const GeoCoord& c, int n_freq) {
  return rff_features(c.lat() * kDegToRad, c.lon() * kDegToRad, n_freq);
}

std::vector<double> time_features(const TorusTime& t, int n_freq) {
  return rff_features(2.0 * kPi * t.theta(), 2.0 * kPi * t.phi(), n_freq);
}

Tensor stack_rows(std::span<const std::vector<double>> rows) {
  if (rows.empty()) return Tensor::matrix(0, 0);
  const std::size_t w = rows.front().size();
  Tensor out = Tensor::matrix(rows.size(), w);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != w) {
      throw DimensionError("stack_rows: row " + std::to_string(i) + " has width " + std::to_string(rows[i].size()) +
                           ", expected " + std::to_string(w));
    }
    std::copy(rows[i].begin(), rows[i].end(), out.row(i).begin());
  }
  return out;
}

Forward::Forward(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& params, bool trainable)
    : tape_(tape), cfg_(cfg) {
  cfg_.validate();
  // Bind in the fixed visit order so tape ids are deterministic.
  std::vector<Var> bound;
  params.visit([&](const char*, const Tensor& t) {
    bound.push_back(trainable ? tape_.parameter(t) : tape_.constant(t));
  });
  std::size_t i = 0;
  w_.visit([&](const char*, Var& v) { v = bound[i++]; });
}

Var Forward::encode_locations(std::span<const GeoCoord> coords) {
  std::vector<std::vector<double>> feats;
  feats.reserve(coords.size());
  for (const auto& c : coords) feats.push_back(location_features(c, cfg_.n_freq));
  Var x = tape_.constant(stack_rows(feats));
  Var h = ad::relu(linear(x, w_.loc_w1, w_.loc_b1));
  Var tok = linear(h, w_.loc_w2, w_.loc_b2);
  tok = ad::reshape(tok, coords.size() * static_cast<std::size_t>(cfg_.n_tokens_l), static_cast<std::size_t>(cfg_.d));
  return layer_norm_affine(tok, w_.loc_ln_g, w_.loc_ln_b);
}

Var Forward::encode_times(std::span<const TorusTime> times) {
  std::vector<std::vector<double>> feats;
  feats.reserve(times.size());
  for (const auto& t : times) feats.push_back(time_features(t, cfg_.n_freq));
  Var x = tape_.constant(stack_rows(feats));
  Var h = ad::relu(linear(x, w_.time_w1, w_.time_b1));
  Var tok = linear(h, w_.time_w2, w_.time_b2);
  tok = ad::reshape(tok, times.size() * static_cast<std::size_t>(cfg_.n_tokens_t), static_cast<std::size_t>(cfg_.d));
  return layer_norm_affine(tok, w_.time_ln_g, w_.time_ln_b);
}

Var Forward::adapt_images(const Tensor& feats) {
  if (feats.cols() != static_cast<std::size_t>(cfg_.img_feat_dim)) {
    throw DimensionError("adapt_images: feature width " + std::to_string(feats.cols()) + " does not match " +
                         "img_feat_dim " + std::to_string(cfg_.img_feat_dim));
  }
  Var x = tape_.constant(feats);
  Var tok = linear(x, w_.img_w, w_.img_b);
  tok = ad::reshape(tok, feats.rows() * static_cast<std::size_t>(cfg_.n_tokens_v), static_cast<std::size_t>(cfg_.d));
  return layer_norm_affine(tok, w_.img_ln_g, w_.img_ln_b);
}

Var Forward::block(Var x, std::size_t group) {
  Var h = layer_norm_affine(x, w_.ln1_g, w_.ln1_b);
  Var q = linear(h, w_.wq, w_.bq);
  Var k = linear(h, w_.wk, w_.bk);
  Var v = linear(h, w_.wv, w_.bv);
  Var att = ad::grouped_attention(q, k, v, group, static_cast<std::size_t>(cfg_.heads));
  Var x1 = ad::add(x, linear(att, w_.wo, w_.bo));
  Var h2 = layer_norm_affine(x1, w_.ln2_g, w_.ln2_b);
  Var m = linear(ad::relu(linear(h2, w_.mlp_w1, w_.mlp_b1)), w_.mlp_w2, w_.mlp_b2);
  return ad::add(x1, m);
}

Var Forward::projection(Modality m, Var pooled) {
  switch (m) {
    case Modality::kImage:
      return linear(pooled, w_.proj_v_w, w_.proj_v_b);
    case Modality::kLocation:
      return linear(pooled, w_.proj_l_w, w_.proj_l_b);
    case Modality::kTime:
      return linear(pooled, w_.proj_t_w, w_.proj_t_b);
  }
  throw ContractError("projection: unknown modality");
}

Var Forward::pool_project(Var block_out, std::size_t group, std::size_t offset, std::size_t count, Modality m) {
  Var seg = group == count ? block_out : ad::slice_groups(block_out, group, offset, count);
  Var pooled = ad::mean_groups(seg, count);
  return ad::l2_normalize_rows(projection(m, pooled));
}

Var Forward::fuse(Var tokens, Modality m) {
  const auto n = static_cast<std::size_t>(cfg_.tokens(m));
  Var out = block(tokens, n);
  return pool_project(out, n, 0, n, m);
}

BimodalEmbedding Forward::fuse(Var tokens_a, Modality a, Var tokens_b, Modality b) {
  const auto na = static_cast<std::size_t>(cfg_.tokens(a));
  const auto nb = static_cast<std::size_t>(cfg_.tokens(b));
  Var x = ad::concat_groups(tokens_a, na, tokens_b, nb);
  Var out = block(x, na + nb);
  BimodalEmbedding e;
  e.first = pool_project(out, na + nb, 0, na, a);
  e.second = pool_project(out, na + nb, na, nb, b);
  e.fused = fuse_average(e.first, e.second);
  return e;
}

Var fuse_average(Var a, Var b) {
  Var s = ad::add(a, b);
  const Tensor& v = s.value();
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double n2 = 0.0;
    for (double x : v.row(i)) n2 += x * x;
    if (std::sqrt(n2) < 1e-12) {
      throw DegenerateFusionError("fuse: constituents of row " + std::to_string(i) + " are antipodal");
    }
  }
  return ad::l2_normalize_rows(s);
}

Var Forward::geo_logits(Var e) {
  return linear(ad::relu(linear(e, w_.geo_w1, w_.geo_b1)), w_.geo_w2, w_.geo_b2);
}

Var Forward::time_logits(Var e) {
  return linear(ad::relu(linear(e, w_.timeh_w1, w_.timeh_b1)), w_.timeh_w2, w_.timeh_b2);
}

Model::Model(ModelConfig cfg, ModelParams params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

namespace {

void require_same_count(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b) + " inputs");
  }
}

}  // namespace

Tensor Model::embed_images(const Tensor& feats) const {
  if (feats.rows() == 0) return Tensor::matrix(0, static_cast<std::size_t>(cfg_.d));
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.fuse(f.adapt_images(feats), Modality::kImage).value();
}

Tensor Model::embed_locations(std::span<const GeoCoord> coords) const {
  if (coords.empty()) return Tensor::matrix(0, static_cast<std::size_t>(cfg_.d));
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.fuse(f.encode_locations(coords), Modality::kLocation).value();
}

Tensor Model::embed_times(std::span<const TorusTime> times) const {
  if (times.empty()) return Tensor::matrix(0, static_cast<std::size_t>(cfg_.d));
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.fuse(f.encode_times(times), Modality::kTime).value();
}

Tensor Model::embed_image_location(const Tensor& feats, std::span<const GeoCoord> coords) const {
  require_same_count(feats.rows(), coords.size(), "embed_image_location");
  if (coords.empty()) return Tensor::matrix(0, static_cast<std::size_t>(cfg_.d));
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.fuse(f.adapt_images(feats), Modality::kImage, f.encode_locations(coords), Modality::kLocation)
      .fused.value();
}

Tensor Model::embed_image_time(const Tensor& feats, std::span<const TorusTime> times) const {
  require_same_count(feats.rows(), times.size(), "embed_image_time");
  if (times.empty()) return Tensor::matrix(0, static_cast<std::size_t>(cfg_.d));
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.fuse(f.adapt_images(feats), Modality::kImage, f.encode_times(times), Modality::kTime).fused.value();
}

Tensor Model::embed_location_time(std::span<const GeoCoord> coords, std::span<const TorusTime> times) const {
  require_same_count(coords.size(), times.size(), "embed_location_time");
  if (coords.empty()) return Tensor::matrix(0, static_cast<std::size_t>(cfg_.d));
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.fuse(f.encode_locations(coords), Modality::kLocation, f.encode_times(times), Modality::kTime)
      .fused.value();
}

Tensor Model::classify_geo(const Tensor& image_embeddings) const {
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return ad::softmax_rows(f.geo_logits(tape.constant(image_embeddings))).value();
}

Tensor Model::classify_time(const Tensor& image_embeddings) const {
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return ad::softmax_rows(f.time_logits(tape.constant(image_embeddings))).value();
}

Tensor Model::location_tokens(std::span<const GeoCoord> coords) const {
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.encode_locations(coords).value();
}

Tensor Model::time_tokens(std::span<const TorusTime> times) const {
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.encode_times(times).value();
}

Tensor Model::image_tokens(const Tensor& feats) const {
  ad::Tape tape;
  Forward f(tape, cfg_, params_, false);
  return f.adapt_images(feats).value();
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params) {
  save_tensors(path, to_named(params), Precision::kFloat32);
  nlohmann::json j = cfg;
  std::filesystem::path side = path;
  side += ".json";
  atomic_write(side, j.dump(2) + "\n");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  std::ifstream in(side);
  if (!in) throw IoError("cannot open model config " + side.string());
  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(in).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(side.string() + ": " + e.what());
  }
  return Model(cfg, from_named(load_tensors(path), cfg));
}

}  // namespace tiger
