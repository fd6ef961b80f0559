#pragma once

/// @file retrieval.hpp
/// @brief Galleries, exact cosine search, entropy-adaptive reranking and the
/// four retrieval tasks.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tiger/data.hpp"
#include "tiger/geomath.hpp"
#include "tiger/model.hpp"

namespace tiger {

/// Per-row gallery metadata. `bin` is the class index b(x) in the relevant
/// classifier space, or -1 when the gallery has no class space.
struct GalleryMeta {
  std::string id;
  std::optional<GeoCoord> coord;
  std::optional<Timestamp> timestamp;
  std::optional<TorusTime> time;
  int bin = -1;

  friend bool operator==(const GalleryMeta&, const GalleryMeta&) = default;
};

/// Immutable store of unit rows. Rows are held at float32 precision so the
/// on-disk form round-trips exactly.
class Gallery {
 public:
  Gallery() = default;

  std::size_t size() const { return meta_.size(); }
  bool empty() const { return meta_.empty(); }
  std::size_t dim() const { return rows_.cols(); }
  const ad::Tensor& rows() const { return rows_; }
  std::span<const double> row(std::size_t i) const { return rows_.row(i); }
  const std::vector<GalleryMeta>& meta() const { return meta_; }
  const GalleryMeta& meta(std::size_t i) const { return meta_[i]; }
  /// Number of classes the `bin` field refers to (0 = none).
  int classes() const { return classes_; }

  /// Contiguous row ranges [begin, end) for a parallel scan.
  std::vector<std::pair<std::size_t, std::size_t>> shards(std::size_t count) const;

  friend bool operator==(const Gallery&, const Gallery&) = default;

 private:
  friend Gallery build_gallery(const ad::Tensor&, std::vector<GalleryMeta>, int);
  friend Gallery load_gallery(const std::filesystem::path&);

  ad::Tensor rows_;
  std::vector<GalleryMeta> meta_;
  int classes_ = 0;
};

/// Throws ContractError naming the first row whose norm is not 1 +- 1e-6, or
/// whose bin lies outside [0, classes) when classes > 0.
Gallery build_gallery(const ad::Tensor& embeddings, std::vector<GalleryMeta> meta, int classes = 0);

/// `path` holds the float32 matrix, `path`.json the metadata.
void save_gallery(const Gallery& g, const std::filesystem::path& path);
Gallery load_gallery(const std::filesystem::path& path);

struct Hit {
  std::size_t row = 0;
  double cosine = 0.0;
  double score = 0.0;
};

struct QueryResult {
  std::vector<Hit> hits;
  double beta = 0.0;
};

/// Indices of the k largest scores, ties broken by ascending index.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

/// Cosine of `query` against every gallery row.
std::vector<double> similarities(std::span<const double> query, const Gallery& g);

/// Exact top-k by cosine; k is clipped to the gallery size. Throws
/// ContractError for k == 0 and DimensionError for a width mismatch.
QueryResult search(std::span<const double> query, const Gallery& g, std::size_t k);

struct RerankConfig {
  double psi = 0.07;
  double beta_max = 1.0;

  void validate() const;
};

/// beta_max * (1 - H(p) / ln B), clamped to [0, beta_max].
double entropy_beta(std::span<const double> probs, double beta_max);

/// sims_i / psi + beta * ln(max(probs[bins_i], 1e-12)) with beta from entropy_beta.
/// Throws ContractError for a bin outside probs and DimensionError on a length mismatch.
std::vector<double> rerank(std::span<const double> sims, std::span<const double> probs, std::span<const int> bins,
                           const RerankConfig& cfg, double* beta_out = nullptr);

/// Search followed by rerank against the gallery's bins; `probs` empty means
/// no prior (beta = 0).
QueryResult search_reranked(std::span<const double> query, const Gallery& g, std::span<const double> probs,
                            const RerankConfig& cfg, std::size_t k);

struct RetrievalConfig {
  RerankConfig geo{0.07, 1.0};
  RerankConfig time{0.07, 2.0};
  /// Apply the classifier prior for location and time galleries.
  bool rerank = true;
  /// Time gallery of 365 x 24 day/hour centers instead of the 288 bins.
  bool fine_time_grid = false;
  /// Query time prediction with the fused image-location embedding.
  bool condition_time_on_location = true;
  int top_k = 10;

  void validate() const;
};

void to_json(nlohmann::json& j, const RetrievalConfig& c);
void from_json(const nlohmann::json& j, RetrievalConfig& c);

// ---------------------------------------------------------------------------
// Galleries for the tasks

/// Unique coordinates of `train` (first-seen order) followed by every cell center.
std::vector<GeoCoord> default_geo_candidates(const Dataset& train, int nside);
Gallery build_location_gallery(const Model& model, std::span<const GeoCoord> candidates);
Gallery build_time_gallery(const Model& model, bool fine_grid = false);
/// Image embeddings of every record; ids are "<camera_id>#<index>".
Gallery build_image_gallery(const Model& model, const Dataset& data);

// ---------------------------------------------------------------------------
// Tasks. Queries are batched: one row / element per query.

struct GeoPrediction {
  GeoCoord coord;
  QueryResult result;
};

/// I -> l (or I t -> l when `times` is given): query v (or vt) against location rows.
std::vector<GeoPrediction> task_geolocalize(const Model& model, const ad::Tensor& feats, const Gallery& locations,
                                            const RetrievalConfig& cfg,
                                            std::optional<std::span<const TorusTime>> times = std::nullopt);

struct TimePrediction {
  TorusTime time;
  QueryResult result;
};

/// I -> t (or I l -> t when `coords` is given).
std::vector<TimePrediction> task_time_predict(const Model& model, const ad::Tensor& feats, const Gallery& times,
                                              const RetrievalConfig& cfg,
                                              std::optional<std::span<const GeoCoord>> coords = std::nullopt);

/// I t -> I: fused image-time query, plain cosine ranking.
std::vector<QueryResult> task_geotime_retrieve(const Model& model, const ad::Tensor& feats,
                                               std::span<const TorusTime> target_times, const Gallery& images,
                                               std::size_t k);

/// l t -> I: fused location-time query, plain cosine ranking.
std::vector<QueryResult> task_compositional(const Model& model, std::span<const GeoCoord> coords,
                                            std::span<const TorusTime> times, const Gallery& images, std::size_t k);

nlohmann::json query_result_to_json(const QueryResult& r, const Gallery& g);

}  // namespace tiger
