#pragma once

/// @file model.hpp
/// @brief The geo-temporal embedding network.
///
/// Three modality encoders turn an image feature vector, a location and a
/// timestamp into token matrices of width d. A single shared pre-norm
/// transformer block refines one modality's tokens, or two modalities'
/// tokens concatenated per sample. Each modality's token segment is then
/// mean-pooled, projected by its own head h_x and L2-normalized. Bimodal
/// inputs yield one unit vector per constituent plus their normalized sum.
/// Two MLP heads classify the image embedding into HEALPix cells and
/// month/hour bins.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tiger/checkpoint.hpp"
#include "tiger/errors.hpp"
#include "tiger/geomath.hpp"
#include "tiger/tape.hpp"

namespace tiger {

/// Both constituents of a bimodal fusion pooled to (numerically) antipodal vectors.
class DegenerateFusionError : public NumericError {
 public:
  using NumericError::NumericError;
};

enum class Modality { kImage, kLocation, kTime };

struct ModelConfig {
  int d = 64;
  int heads = 4;
  int n_freq = 10;
  int n_tokens_v = 1;
  int n_tokens_l = 1;
  int n_tokens_t = 1;
  int img_feat_dim = 32;
  int geo_nside = 8;
  int n_geo_classes = 768;
  int n_time_classes = kTimeBins;
  double tau = 0.07;

  /// Throws ConfigError on any inconsistency.
  void validate() const;
  int tokens(Modality m) const;
  int rff_width() const { return 4 * n_freq; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Every trainable tensor, generic over the storage type so the same layout
/// serves plain values (ad::Tensor) and tape-bound handles (ad::Var).
template <typename T>
struct ModelWeights {
  // location encoder: rff -> d -> relu -> N_L*d -> LN
  T loc_w1, loc_b1, loc_w2, loc_b2, loc_ln_g, loc_ln_b;
  // time encoder
  T time_w1, time_b1, time_w2, time_b2, time_ln_g, time_ln_b;
  // image adapter: feat -> N_V*d -> LN
  T img_w, img_b, img_ln_g, img_ln_b;
  // fusion block
  T ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  T ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  // per-modality projections
  T proj_v_w, proj_v_b, proj_l_w, proj_l_b, proj_t_w, proj_t_b;
  // classification heads
  T geo_w1, geo_b1, geo_w2, geo_b2;
  T timeh_w1, timeh_b1, timeh_w2, timeh_b2;

  template <typename Self, typename F>
  static void visit_impl(Self& s, F&& f) {
    f("loc_w1", s.loc_w1);
    f("loc_b1", s.loc_b1);
    f("loc_w2", s.loc_w2);
    f("loc_b2", s.loc_b2);
    f("loc_ln_g", s.loc_ln_g);
    f("loc_ln_b", s.loc_ln_b);
    f("time_w1", s.time_w1);
    f("time_b1", s.time_b1);
    f("time_w2", s.time_w2);
    f("time_b2", s.time_b2);
    f("time_ln_g", s.time_ln_g);
    f("time_ln_b", s.time_ln_b);
    f("img_w", s.img_w);
    f("img_b", s.img_b);
    f("img_ln_g", s.img_ln_g);
    f("img_ln_b", s.img_ln_b);
    f("ln1_g", s.ln1_g);
    f("ln1_b", s.ln1_b);
    f("wq", s.wq);
    f("bq", s.bq);
    f("wk", s.wk);
    f("bk", s.bk);
    f("wv", s.wv);
    f("bv", s.bv);
    f("wo", s.wo);
    f("bo", s.bo);
    f("ln2_g", s.ln2_g);
    f("ln2_b", s.ln2_b);
    f("mlp_w1", s.mlp_w1);
    f("mlp_b1", s.mlp_b1);
    f("mlp_w2", s.mlp_w2);
    f("mlp_b2", s.mlp_b2);
    f("proj_v_w", s.proj_v_w);
    f("proj_v_b", s.proj_v_b);
    f("proj_l_w", s.proj_l_w);
    f("proj_l_b", s.proj_l_b);
    f("proj_t_w", s.proj_t_w);
    f("proj_t_b", s.proj_t_b);
    f("geo_w1", s.geo_w1);
    f("geo_b1", s.geo_b1);
    f("geo_w2", s.geo_w2);
    f("geo_b2", s.geo_b2);
    f("timeh_w1", s.timeh_w1);
    f("timeh_b1", s.timeh_b1);
    f("timeh_w2", s.timeh_w2);
    f("timeh_b2", s.timeh_b2);
  }
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, std::forward<F>(f));
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, std::forward<F>(f));
  }
};

using ModelParams = ModelWeights<ad::Tensor>;
using BoundParams = ModelWeights<ad::Var>;

/// Random initialization: weights ~ N(0, 1/fan_in), biases 0, LN gains 1.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

std::size_t parameter_count(const ModelParams& p);
std::vector<NamedTensor> to_named(const ModelParams& p);
/// Throws IoError naming the missing or mis-shaped tensor.
ModelParams from_named(const std::vector<NamedTensor>& tensors, const ModelConfig& cfg);
bool all_finite(const ModelParams& p);

/// Concatenation over frequencies 2^0..2^(n-1) of [sin(f a), cos(f a), sin(f b), cos(f b)].
std::vector<double> rff_features(double a, double b, int n_freq);
/// Location RFF input: (lat, lon) in radians.
std::vector<double> location_features(const GeoCoord& c, int n_freq);
/// Time RFF input: 2*pi*(theta, phi).
std::vector<double> time_features(const TorusTime& t, int n_freq);

/// Unit embeddings of both constituents plus their fused embedding.
struct BimodalEmbedding {
  ad::Var first;
  ad::Var second;
  ad::Var fused;
};

/// Forward pass builder: binds a parameter set to a tape and exposes the
/// network stages as batched tape operations (one sample per row/group).
class Forward {
 public:
  Forward(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& params, bool trainable);

  ad::Tape& tape() { return tape_; }
  const ModelConfig& config() const { return cfg_; }
  const BoundParams& bound() const { return w_; }

  /// (B*N_L) x d tokens.
  ad::Var encode_locations(std::span<const GeoCoord> coords);
  /// (B*N_T) x d tokens.
  ad::Var encode_times(std::span<const TorusTime> times);
  /// feats is B x img_feat_dim; returns (B*N_V) x d tokens.
  ad::Var adapt_images(const ad::Tensor& feats);

  /// The shared transformer block on tokens grouped `group` rows per sample.
  ad::Var block(ad::Var tokens, std::size_t group);

  /// Pool one token segment of a block output and project with h_m: B x d unit rows.
  ad::Var pool_project(ad::Var block_out, std::size_t group, std::size_t offset, std::size_t count, Modality m);

  /// Unimodal pass: B x d unit rows.
  ad::Var fuse(ad::Var tokens, Modality m);
  /// Bimodal pass: tokens of both modalities concatenated per sample before the block.
  BimodalEmbedding fuse(ad::Var tokens_a, Modality a, ad::Var tokens_b, Modality b);

  ad::Var geo_logits(ad::Var image_embedding);
  ad::Var time_logits(ad::Var image_embedding);

 private:
  ad::Var projection(Modality m, ad::Var pooled);

  ad::Tape& tape_;
  const ModelConfig& cfg_;
  BoundParams w_;
};

/// Averages two unit-row batches and renormalizes. Throws DegenerateFusionError
/// when a row pair sums to norm < 1e-12.
ad::Var fuse_average(ad::Var a, ad::Var b);

/// Frozen model for inference: config plus parameters, no hidden state.
class Model {
 public:
  Model(ModelConfig cfg, ModelParams params);

  const ModelConfig& config() const { return cfg_; }
  const ModelParams& params() const { return params_; }

  // Batched embeddings, one unit row per input.
  ad::Tensor embed_images(const ad::Tensor& feats) const;
  ad::Tensor embed_locations(std::span<const GeoCoord> coords) const;
  ad::Tensor embed_times(std::span<const TorusTime> times) const;
  ad::Tensor embed_image_location(const ad::Tensor& feats, std::span<const GeoCoord> coords) const;
  ad::Tensor embed_image_time(const ad::Tensor& feats, std::span<const TorusTime> times) const;
  ad::Tensor embed_location_time(std::span<const GeoCoord> coords, std::span<const TorusTime> times) const;

  /// Softmax over 768 cells / 288 time bins for each image row.
  ad::Tensor classify_geo(const ad::Tensor& image_embeddings) const;
  ad::Tensor classify_time(const ad::Tensor& image_embeddings) const;

  /// Token matrices, for inspection.
  ad::Tensor location_tokens(std::span<const GeoCoord> coords) const;
  ad::Tensor time_tokens(std::span<const TorusTime> times) const;
  ad::Tensor image_tokens(const ad::Tensor& feats) const;

 private:
  ModelConfig cfg_;
  ModelParams params_;
};

/// Writes `path` (float32 tensor file) and `path` + ".json" (config).
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params);
Model load_checkpoint(const std::filesystem::path& path);

/// Stacks feature vectors into a B x width tensor.
ad::Tensor stack_rows(std::span<const std::vector<double>> rows);

}  // namespace tiger
