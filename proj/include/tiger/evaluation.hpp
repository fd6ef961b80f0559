#pragma once

/// @file evaluation.hpp
/// @brief Circular time errors, geodesic error, recall under joint geo-time
/// thresholds, hemispheric balance and confusion matrices.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tiger/data.hpp"
#include "tiger/geomath.hpp"
#include "tiger/model.hpp"
#include "tiger/retrieval.hpp"

namespace tiger {

struct ThresholdSet {
  double t_geo_km = 25.0;
  double t_toy_days = 30.0;
  double t_tod_hours = 1.0;

  void validate() const;
};

/// 24 * circular gap of the day fractions; at most 12 h.
double tod_error_hours(const TorusTime& pred, const TorusTime& gt);
/// 365 * circular gap of the year fractions; at most 182.5 d.
double toy_error_days(const TorusTime& pred, const TorusTime& gt);
double geoloc_error_km(const GeoCoord& pred, const GeoCoord& gt);

/// A retrieved item compared against a (location, target time) query.
struct RetrievedItem {
  GeoCoord coord;
  TorusTime time;
};

bool within_thresholds(const RetrievedItem& item, const GeoCoord& query_coord, const TorusTime& target,
                       const ThresholdSet& th);

/// Ranked retrievals for one query plus what it asked for.
struct RankedQuery {
  GeoCoord coord;
  TorusTime target;
  std::vector<RetrievedItem> ranked;
};

/// Per-query hit flags at k.
std::vector<std::uint8_t> geotime_hits(std::span<const RankedQuery> queries, const ThresholdSet& th, std::size_t k);
/// Fraction of queries with a hit among the top k. 0 for no queries.
double geotime_recall(std::span<const RankedQuery> queries, const ThresholdSet& th, std::size_t k);

/// Expected recall@k of a uniformly random ranking of a gallery of size g in
/// which query i has relevant[i] qualifying items.
double random_ranking_recall(std::span<const std::size_t> relevant, std::size_t gallery_size, std::size_t k);

struct HemisphereRecall {
  double north = 0.0;
  double south = 0.0;
  std::size_t n_north = 0;
  std::size_t n_south = 0;
  /// Absent when the southern recall is zero or no southern query exists.
  std::optional<double> ratio;
};

/// Latitude 0 counts as North. Throws ContractError if either hemisphere has no queries.
HemisphereRecall hemispheric_ratio(std::span<const std::uint8_t> hits, std::span<const double> latitudes);

struct ConfusionMatrices {
  std::array<std::array<std::int64_t, kMonthBins>, kMonthBins> month{};
  std::array<std::array<std::int64_t, kHourBins>, kHourBins> hour{};
};

/// Row = ground truth, column = prediction.
ConfusionMatrices confusion_matrices(std::span<const TimeBinId> pred, std::span<const TimeBinId> gt);

struct MetricsReport {
  std::size_t n_queries = 0;
  double mean_toy_error_days = 0.0;
  double mean_tod_error_hours = 0.0;
  double mean_geo_error_km = 0.0;
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
  double random_recall_at_10 = 0.0;
  double north_recall_at_10 = 0.0;
  double south_recall_at_10 = 0.0;
  std::optional<double> ns_ratio;
  ConfusionMatrices confusion;
  ThresholdSet thresholds;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  /// metric,value lines.
  std::string to_csv() const;
  std::string month_confusion_csv() const;
  std::string hour_confusion_csv() const;

  friend bool operator==(const MetricsReport& a, const MetricsReport& b);
};

struct EvaluationConfig {
  ThresholdSet thresholds;
  /// Upper bound on test queries (0 = all); chosen deterministically from the seed.
  std::size_t max_queries = 0;
  std::uint64_t seed = 11;

  void validate() const;
};

void to_json(nlohmann::json& j, const EvaluationConfig& c);
void from_json(const nlohmann::json& j, EvaluationConfig& c);

/// Runs every task on the test set. Time prediction and geolocalization use
/// each test frame as a query; geo-time retrieval asks, for each test frame,
/// for the time of another frame of the same camera (picked from the seed)
/// over a gallery of all other test frames. Location candidates come from
/// `train` plus all cell centers.
MetricsReport evaluate_model(const Model& model, const Dataset& train, const Dataset& test,
                             const RetrievalConfig& rcfg, const EvaluationConfig& ecfg);

}  // namespace tiger
