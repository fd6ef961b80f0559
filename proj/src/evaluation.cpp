#include "tiger/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "tiger/errors.hpp"

namespace tiger {

void ThresholdSet::validate() const {
  if (!(t_geo_km > 0.0 && t_toy_days > 0.0 && t_tod_hours > 0.0)) {
    throw ConfigError("evaluation.thresholds: all thresholds must be positive");
  }
}

double tod_error_hours(const TorusTime& pred, const TorusTime& gt) { return 24.0 * circular_gap(pred.phi(), gt.phi()); }

double toy_error_days(const TorusTime& pred, const TorusTime& gt) {
  return 365.0 * circular_gap(pred.theta(), gt.theta());
}

double geoloc_error_km(const GeoCoord& pred, const GeoCoord& gt) { return haversine_km(pred, gt); }

bool within_thresholds(const RetrievedItem& item, const GeoCoord& query_coord, const TorusTime& target,
                       const ThresholdSet& th) {
  return haversine_km(item.coord, query_coord) <= th.t_geo_km && toy_error_days(item.time, target) <= th.t_toy_days &&
         tod_error_hours(item.time, target) <= th.t_tod_hours;
}

std::vector<std::uint8_t> geotime_hits(std::span<const RankedQuery> queries, const ThresholdSet& th, std::size_t k) {
  std::vector<std::uint8_t> hits;
  hits.reserve(queries.size());
  for (const auto& q : queries) {
    const std::size_t n = std::min(k, q.ranked.size());
    bool hit = false;
    for (std::size_t i = 0; i < n && !hit; ++i) hit = within_thresholds(q.ranked[i], q.coord, q.target, th);
    hits.push_back(hit);
  }
  return hits;
}

double geotime_recall(std::span<const RankedQuery> queries, const ThresholdSet& th, std::size_t k) {
  if (queries.empty()) return 0.0;
  const auto hits = geotime_hits(queries, th, k);
  return static_cast<double>(std::count(hits.begin(), hits.end(), std::uint8_t{1})) / static_cast<double>(queries.size());
}

double random_ranking_recall(std::span<const std::size_t> relevant, std::size_t gallery_size, std::size_t k) {
  if (relevant.empty()) return 0.0;
  k = std::min(k, gallery_size);
  double total = 0.0;
  for (std::size_t h : relevant) {
    if (h > gallery_size) throw ContractError("random_ranking_recall: more relevant items than gallery rows");
    // P(no relevant item among k draws without replacement).
    double miss = 1.0;
    for (std::size_t j = 0; j < k; ++j) {
      miss *= static_cast<double>(gallery_size - h - std::min(j, gallery_size - h)) /
              static_cast<double>(gallery_size - j);
      if (miss == 0.0) break;
    }
    total += 1.0 - miss;
  }
  return total / static_cast<double>(relevant.size());
}

HemisphereRecall hemispheric_ratio(std::span<const std::uint8_t> hits, std::span<const double> latitudes) {
  if (hits.size() != latitudes.size()) throw DimensionError("hemispheric_ratio: hits and latitudes differ in length");
  HemisphereRecall r;
  std::size_t hn = 0, hs = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (latitudes[i] >= 0.0) {
      ++r.n_north;
      hn += hits[i];
    } else {
      ++r.n_south;
      hs += hits[i];
    }
  }
  if (r.n_north == 0 || r.n_south == 0) {
    throw ContractError("hemispheric_ratio: both hemispheres need queries (north " + std::to_string(r.n_north) +
                        ", south " + std::to_string(r.n_south) + ")");
  }
  r.north = static_cast<double>(hn) / static_cast<double>(r.n_north);
  r.south = static_cast<double>(hs) / static_cast<double>(r.n_south);
  if (r.south > 0.0) r.ratio = r.north / r.south;
  return r;
}

ConfusionMatrices confusion_matrices(std::span<const TimeBinId> pred, std::span<const TimeBinId> gt) {
  if (pred.size() != gt.size()) throw DimensionError("confusion_matrices: prediction and truth differ in length");
  ConfusionMatrices c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].month < 0 || pred[i].month >= kMonthBins || gt[i].month < 0 || gt[i].month >= kMonthBins ||
        pred[i].hour < 0 || pred[i].hour >= kHourBins || gt[i].hour < 0 || gt[i].hour >= kHourBins) {
      throw ContractError("confusion_matrices: invalid bin at index " + std::to_string(i));
    }
    ++c.month[static_cast<std::size_t>(gt[i].month)][static_cast<std::size_t>(pred[i].month)];
    ++c.hour[static_cast<std::size_t>(gt[i].hour)][static_cast<std::size_t>(pred[i].hour)];
  }
  return c;
}

// ---------------------------------------------------------------------------
// Report

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["n_queries"] = n_queries;
  j["mean_toy_error_days"] = mean_toy_error_days;
  j["mean_tod_error_hours"] = mean_tod_error_hours;
  j["mean_geo_error_km"] = mean_geo_error_km;
  j["recall_at_1"] = recall_at_1;
  j["recall_at_5"] = recall_at_5;
  j["recall_at_10"] = recall_at_10;
  j["random_recall_at_10"] = random_recall_at_10;
  j["north_recall_at_10"] = north_recall_at_10;
  j["south_recall_at_10"] = south_recall_at_10;
  j["ns_ratio"] = ns_ratio ? nlohmann::json(*ns_ratio) : nlohmann::json(nullptr);
  j["confusion_month"] = confusion.month;
  j["confusion_hour"] = confusion.hour;
  j["thresholds"] = {{"t_geo_km", thresholds.t_geo_km},
                     {"t_toy_days", thresholds.t_toy_days},
                     {"t_tod_hours", thresholds.t_tod_hours}};
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.n_queries = j.at("n_queries").get<std::size_t>();
  r.mean_toy_error_days = j.at("mean_toy_error_days").get<double>();
  r.mean_tod_error_hours = j.at("mean_tod_error_hours").get<double>();
  r.mean_geo_error_km = j.at("mean_geo_error_km").get<double>();
  r.recall_at_1 = j.at("recall_at_1").get<double>();
  r.recall_at_5 = j.at("recall_at_5").get<double>();
  r.recall_at_10 = j.at("recall_at_10").get<double>();
  r.random_recall_at_10 = j.at("random_recall_at_10").get<double>();
  r.north_recall_at_10 = j.at("north_recall_at_10").get<double>();
  r.south_recall_at_10 = j.at("south_recall_at_10").get<double>();
  if (!j.at("ns_ratio").is_null()) r.ns_ratio = j["ns_ratio"].get<double>();
  r.confusion.month = j.at("confusion_month").get<decltype(r.confusion.month)>();
  r.confusion.hour = j.at("confusion_hour").get<decltype(r.confusion.hour)>();
  const auto& t = j.at("thresholds");
  r.thresholds = {t.at("t_geo_km").get<double>(), t.at("t_toy_days").get<double>(), t.at("t_tod_hours").get<double>()};
  return r;
}

bool operator==(const MetricsReport& a, const MetricsReport& b) {
  return a.to_json() == b.to_json();
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "metric,value\n";
  os << "n_queries," << n_queries << "\n";
  os << "mean_toy_error_days," << mean_toy_error_days << "\n";
  os << "mean_tod_error_hours," << mean_tod_error_hours << "\n";
  os << "mean_geo_error_km," << mean_geo_error_km << "\n";
  os << "recall_at_1," << recall_at_1 << "\n";
  os << "recall_at_5," << recall_at_5 << "\n";
  os << "recall_at_10," << recall_at_10 << "\n";
  os << "random_recall_at_10," << random_recall_at_10 << "\n";
  os << "north_recall_at_10," << north_recall_at_10 << "\n";
  os << "south_recall_at_10," << south_recall_at_10 << "\n";
  os << "ns_ratio," << (ns_ratio ? std::to_string(*ns_ratio) : std::string("undefined")) << "\n";
  return os.str();
}

namespace {

template <std::size_t N>
std::string grid_csv(const std::array<std::array<std::int64_t, N>, N>& m) {
  std::ostringstream os;
  for (const auto& row : m) {
    for (std::size_t c = 0; c < N; ++c) os << (c ? "," : "") << row[c];
    os << "\n";
  }
  return os.str();
}

}  // namespace

std::string MetricsReport::month_confusion_csv() const { return grid_csv(confusion.month); }
std::string MetricsReport::hour_confusion_csv() const { return grid_csv(confusion.hour); }

void EvaluationConfig::validate() const { thresholds.validate(); }

void to_json(nlohmann::json& j, const EvaluationConfig& c) {
  j = nlohmann::json{{"t_geo_km", c.thresholds.t_geo_km},
                     {"t_toy_days", c.thresholds.t_toy_days},
                     {"t_tod_hours", c.thresholds.t_tod_hours},
                     {"max_queries", c.max_queries},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EvaluationConfig& c) {
  static const std::set<std::string> kKeys = {"t_geo_km", "t_toy_days", "t_tod_hours", "max_queries", "seed"};
  if (!j.is_object()) throw ConfigError("evaluation: expected an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.count(key)) throw ConfigError("evaluation." + key + ": unknown key");
  try {
    c.thresholds.t_geo_km = j.value("t_geo_km", c.thresholds.t_geo_km);
    c.thresholds.t_toy_days = j.value("t_toy_days", c.thresholds.t_toy_days);
    c.thresholds.t_tod_hours = j.value("t_tod_hours", c.thresholds.t_tod_hours);
    c.max_queries = j.value("max_queries", c.max_queries);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("evaluation: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Benchmark

MetricsReport evaluate_model(const Model& model, const Dataset& train, const Dataset& test,
                             const RetrievalConfig& rcfg, const EvaluationConfig& ecfg) {
  rcfg.validate();
  ecfg.validate();
  std::vector<std::size_t> timed;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.records[i].timestamp) timed.push_back(i);
  if (timed.empty()) throw ContractError("evaluate_model: test set has no timestamped records");

  std::mt19937_64 rng(ecfg.seed);
  std::vector<std::size_t> queries = timed;
  if (ecfg.max_queries > 0 && queries.size() > ecfg.max_queries) {
    std::shuffle(queries.begin(), queries.end(), rng);
    queries.resize(ecfg.max_queries);
    std::sort(queries.begin(), queries.end());
  }

  MetricsReport rep;
  rep.thresholds = ecfg.thresholds;
  rep.n_queries = queries.size();

  std::vector<std::vector<double>> feat_rows;
  std::vector<GeoCoord> coords;
  std::vector<TorusTime> truth;
  for (std::size_t i : queries) {
    feat_rows.push_back(test.records[i].feature);
    coords.push_back(test.records[i].coord);
    truth.push_back(test.records[i].torus());
  }
  const ad::Tensor feats = stack_rows(feat_rows);

  // Time prediction.
  const Gallery time_gallery = build_time_gallery(model, rcfg.fine_time_grid);
  const auto tp = rcfg.condition_time_on_location
                      ? task_time_predict(model, feats, time_gallery, rcfg, std::span<const GeoCoord>(coords))
                      : task_time_predict(model, feats, time_gallery, rcfg);
  std::vector<TimeBinId> pred_bins, gt_bins;
  double toy = 0.0, tod = 0.0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    toy += toy_error_days(tp[i].time, truth[i]);
    tod += tod_error_hours(tp[i].time, truth[i]);
    pred_bins.push_back(torus_to_bin(tp[i].time));
    gt_bins.push_back(torus_to_bin(truth[i]));
  }
  rep.mean_toy_error_days = toy / static_cast<double>(tp.size());
  rep.mean_tod_error_hours = tod / static_cast<double>(tp.size());
  rep.confusion = confusion_matrices(pred_bins, gt_bins);

  // Geolocalization.
  const auto candidates = default_geo_candidates(train, model.config().geo_nside);
  const Gallery loc_gallery = build_location_gallery(model, candidates);
  const auto gp = task_geolocalize(model, feats, loc_gallery, rcfg);
  double geo = 0.0;
  for (std::size_t i = 0; i < gp.size(); ++i) geo += geoloc_error_km(gp[i].coord, coords[i]);
  rep.mean_geo_error_km = geo / static_cast<double>(gp.size());

  // Geo-time retrieval over the other test frames.
  std::map<std::string, std::vector<std::size_t>> by_camera;
  for (std::size_t i : timed) by_camera[test.records[i].camera_id].push_back(i);
  std::vector<std::size_t> gq;  // query record indices with a partner frame
  std::vector<TorusTime> targets;
  for (std::size_t i : queries) {
    const auto& frames = by_camera[test.records[i].camera_id];
    if (frames.size() < 2) continue;
    const auto pos = static_cast<std::size_t>(std::lower_bound(frames.begin(), frames.end(), i) - frames.begin());
    std::uniform_int_distribution<std::size_t> pick(0, frames.size() - 2);
    std::size_t r = pick(rng);
    if (r >= pos) ++r;
    const std::size_t j = frames[r];
    gq.push_back(i);
    targets.push_back(test.records[j].torus());
  }
  if (!gq.empty()) {
    Dataset gallery_data;
    std::vector<std::size_t> gallery_index;
    for (std::size_t i : timed) {
      gallery_data.records.push_back(test.records[i]);
      gallery_index.push_back(i);
    }
    const Gallery images = build_image_gallery(model, gallery_data);
    std::vector<std::vector<double>> qf;
    for (std::size_t i : gq) qf.push_back(test.records[i].feature);
    const std::size_t k = 10;
    const auto results = task_geotime_retrieve(model, stack_rows(qf), targets, images, k + 1);

    std::vector<RankedQuery> ranked;
    std::vector<std::size_t> relevant;
    std::vector<double> lats;
    for (std::size_t q = 0; q < gq.size(); ++q) {
      const Record& qr = test.records[gq[q]];
      RankedQuery rq{qr.coord, targets[q], {}};
      for (const Hit& h : results[q].hits) {
        if (gallery_index[h.row] == gq[q]) continue;
        const Record& r = test.records[gallery_index[h.row]];
        rq.ranked.push_back({r.coord, r.torus()});
      }
      if (rq.ranked.size() > k) rq.ranked.resize(k);
      std::size_t rel = 0;
      for (std::size_t g : gallery_index) {
        if (g == gq[q]) continue;
        const Record& r = test.records[g];
        rel += within_thresholds({r.coord, r.torus()}, qr.coord, targets[q], ecfg.thresholds);
      }
      relevant.push_back(rel);
      lats.push_back(qr.coord.lat());
      ranked.push_back(std::move(rq));
    }
    rep.recall_at_1 = geotime_recall(ranked, ecfg.thresholds, 1);
    rep.recall_at_5 = geotime_recall(ranked, ecfg.thresholds, 5);
    rep.recall_at_10 = geotime_recall(ranked, ecfg.thresholds, 10);
    rep.random_recall_at_10 = random_ranking_recall(relevant, gallery_index.size() - 1, 10);
    const auto hits = geotime_hits(ranked, ecfg.thresholds, 10);
    bool has_n = false, has_s = false;
    for (double lat : lats) (lat >= 0.0 ? has_n : has_s) = true;
    if (has_n && has_s) {
      const auto hr = hemispheric_ratio(hits, lats);
      rep.north_recall_at_10 = hr.north;
      rep.south_recall_at_10 = hr.south;
      rep.ns_ratio = hr.ratio;
    } else {
      (has_n ? rep.north_recall_at_10 : rep.south_recall_at_10) = rep.recall_at_10;
    }
  }
  return rep;
}

}  // namespace tiger
