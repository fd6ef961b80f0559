#pragma once

/// @file data.hpp
/// @brief Image/location/time records, the synthetic webcam world, the
/// quality probe and the curation pipeline.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tiger/geomath.hpp"

namespace tiger {

/// One (image, location, time) triplet. The image is represented by a
/// precomputed feature vector. A missing timestamp marks location-only data.
struct Record {
  std::string camera_id;
  GeoCoord coord;
  std::optional<Timestamp> timestamp;
  std::vector<double> feature;
  std::optional<double> quality;

  TorusTime torus() const { return timestamp_to_torus(*timestamp); }
  friend bool operator==(const Record&, const Record&) = default;
};

struct Dataset {
  std::vector<Record> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  /// Width of the feature vectors, 0 for an empty dataset.
  std::size_t feature_width() const { return records.empty() ? 0 : records.front().feature.size(); }
  /// Throws DimensionError on non-uniform widths, ContractError on quality outside [0, 1].
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic world

struct SyntheticWorldConfig {
  int n_cameras = 200;
  int frames_per_camera = 100;
  int feature_dim = 32;
  double seasonal_amp = 1.0;
  double diurnal_amp = 1.0;
  double noise_sigma = 0.05;
  /// Weight of a smooth location field mixed into each camera signature
  /// (0 = signature independent of location).
  double geo_signal = 0.8;
  /// Fraction of frames replaced by corrupted (camera-independent) features.
  double corrupt_fraction = 0.0;
  int year = 2023;
  std::uint64_t seed = 7;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticWorldConfig& c);
void from_json(const nlohmann::json& j, SyntheticWorldConfig& c);

/// Fixed directions shared by all cameras of a world.
struct WorldBasis {
  std::vector<double> season_cos, season_sin, diurnal_cos, diurnal_sin;
  std::vector<double> corruption;
};

/// Deterministic in cfg.seed. Cameras are uniform on the sphere, timestamps
/// uniform over one year and one day. Southern-hemisphere cameras see the
/// seasonal component shifted by half a year.
Dataset generate_synthetic(const SyntheticWorldConfig& cfg);

/// The shared directions a world with this config uses.
WorldBasis world_basis(const SyntheticWorldConfig& cfg);

/// Noise-free feature of a camera signature at a time and latitude.
std::vector<double> synthetic_feature(const std::vector<double>& signature, const WorldBasis& basis,
                                      const SyntheticWorldConfig& cfg, double lat, const TorusTime& t);

/// Labeled examples for the quality probe: clean frames (label 1) and
/// corrupted frames (label 0), half each.
struct LabeledFeatures {
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
};
LabeledFeatures generate_probe_set(const SyntheticWorldConfig& cfg, int n_examples);

// ---------------------------------------------------------------------------
// Quality probe

/// Logistic-regression probe: score = sigmoid(w . x + b).
struct QualityProbe {
  std::vector<double> weights;
  double bias = 0.0;

  double score(const std::vector<double>& feature) const;
};

struct ProbeTrainingResult {
  QualityProbe probe;
  double held_out_accuracy = 0.0;
  int iterations = 0;
  double final_grad_norm = 0.0;
};

/// Full-batch gradient descent on the mean log-loss until the gradient norm
/// drops below 1e-6 or 10^4 iterations. Every tenth example is held out for
/// the reported accuracy. Throws ContractError unless each class has at least
/// two examples.
ProbeTrainingResult train_quality_probe(const std::vector<std::vector<double>>& features,
                                        const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Curation

enum class QualityClass { kHigh, kMedium, kLow };
const char* to_string(QualityClass q);

struct SplitThresholds {
  double t_high = 0.7;
  double t_low = 0.4;
  double bin_size_deg = 10.0;
  int min_frames = 500;
  /// Distinct calendar months required, standing in for "a full year".
  int min_months = 12;
  /// Maximum number of test cameras.
  int test_camera_budget = 20;

  void validate() const;
};

/// High if s >= t_high, Medium if t_low <= s < t_high, Low otherwise.
QualityClass partition_quality(double score, const SplitThresholds& th);

/// Key of the lat/lon bin containing c: (row, col) packed as row * 1000 + col.
int geo_bin(const GeoCoord& c, double bin_size_deg);

struct CurationReport {
  std::map<std::string, std::size_t> records_per_class;
  /// Retained records per geographic bin key.
  std::map<int, std::size_t> records_per_bin;
  /// Test cameras per geographic bin key.
  std::map<int, std::size_t> test_cameras_per_bin;
  std::size_t candidate_cameras = 0;
  std::vector<std::string> test_cameras;
  std::map<std::string, std::string> rejected;  // camera -> reason
  bool camera_disjoint = true;
  std::string note;

  nlohmann::json to_json() const;
};

struct CurationResult {
  Dataset train;
  Dataset test;
  CurationReport report;
};

/// Drops Low records, picks test cameras round-robin over occupied bins among
/// High-quality cameras meeting the frame and month rules, and assigns every
/// other retained camera to train. Throws ContractError if a record lacks a
/// quality score.
CurationResult curate_split(const Dataset& data, const SplitThresholds& th, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

/// One JSON object per line. Throws IoError with the line number on malformed
/// input and DimensionError on a feature-width mismatch.
Dataset load_jsonl(const std::filesystem::path& path);
void save_jsonl(const Dataset& data, const std::filesystem::path& path);

nlohmann::json record_to_json(const Record& r);
Record record_from_json(const nlohmann::json& j);

/// Packed float32 row-major features at `path` with a JSON index at `path`.json.
void save_feature_sidecar(const Dataset& data, const std::filesystem::path& path);
std::vector<std::vector<double>> load_feature_sidecar(const std::filesystem::path& path);

}  // namespace tiger
