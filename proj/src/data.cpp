#include "tiger/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "tiger/checkpoint.hpp"
#include "tiger/errors.hpp"

namespace tiger {

void Dataset::validate() const {
  const std::size_t w = feature_width();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Record& r = records[i];
    if (r.feature.size() != w) {
      throw DimensionError("record " + std::to_string(i) + " (" + r.camera_id + ") has feature width " +
                           std::to_string(r.feature.size()) + ", expected " + std::to_string(w));
    }
    if (r.quality && (*r.quality < 0.0 || *r.quality > 1.0)) {
      throw ContractError("record " + std::to_string(i) + " has quality outside [0, 1]");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic world

void SyntheticWorldConfig::validate() const {
  if (n_cameras <= 0) throw ConfigError("data.n_cameras must be positive");
  if (frames_per_camera <= 0) throw ConfigError("data.frames_per_camera must be positive");
  if (feature_dim < 8) throw ConfigError("data.feature_dim must be >= 8");
  if (seasonal_amp < 0.0) throw ConfigError("data.seasonal_amp must be >= 0");
  if (diurnal_amp < 0.0) throw ConfigError("data.diurnal_amp must be >= 0");
  if (noise_sigma < 0.0) throw ConfigError("data.noise_sigma must be >= 0");
  if (geo_signal < 0.0 || geo_signal > 1.0) throw ConfigError("data.geo_signal must lie in [0, 1]");
  if (corrupt_fraction < 0.0 || corrupt_fraction > 1.0) throw ConfigError("data.corrupt_fraction must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const SyntheticWorldConfig& c) {
  j = nlohmann::json{{"n_cameras", c.n_cameras},       {"frames_per_camera", c.frames_per_camera},
                     {"feature_dim", c.feature_dim},   {"seasonal_amp", c.seasonal_amp},
                     {"diurnal_amp", c.diurnal_amp},   {"noise_sigma", c.noise_sigma},
                     {"geo_signal", c.geo_signal},     {"corrupt_fraction", c.corrupt_fraction},
                     {"year", c.year},                 {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SyntheticWorldConfig& c) {
  static const std::set<std::string> kKeys = {"n_cameras",  "frames_per_camera", "feature_dim",      "seasonal_amp",
                                              "diurnal_amp", "noise_sigma",      "geo_signal",       "corrupt_fraction",
                                              "year",        "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw ConfigError("data." + key + ": unknown key");
  }
  c.n_cameras = j.value("n_cameras", c.n_cameras);
  c.frames_per_camera = j.value("frames_per_camera", c.frames_per_camera);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.seasonal_amp = j.value("seasonal_amp", c.seasonal_amp);
  c.diurnal_amp = j.value("diurnal_amp", c.diurnal_amp);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.geo_signal = j.value("geo_signal", c.geo_signal);
  c.corrupt_fraction = j.value("corrupt_fraction", c.corrupt_fraction);
  c.year = j.value("year", c.year);
  c.seed = j.value("seed", c.seed);
}

namespace {

constexpr std::uint64_t kBasisStream = 0x9e3779b97f4a7c15ULL;

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> v(dim);
  double s = 0.0;
  for (double& x : v) {
    x = n01(rng);
    s += x * x;
  }
  s = std::sqrt(s);
  for (double& x : v) x /= s;
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Orthonormalizes v against `against` (Gram-Schmidt).
void orthonormalize(std::vector<double>& v, const std::vector<const std::vector<double>*>& against) {
  for (const auto* u : against) {
    const double p = dot(v, *u);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * (*u)[i];
  }
  const double n = std::sqrt(dot(v, v));
  for (double& x : v) x /= n;
}

struct LocationField {
  std::vector<std::array<double, 3>> freq;
  std::vector<double> phase;

  std::vector<double> operator()(const GeoCoord& c) const {
    const double lat = c.lat() * kDegToRad, lon = c.lon() * kDegToRad;
    const std::array<double, 3> u = {std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat)};
    std::vector<double> f(freq.size());
    double s = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) {
      f[k] = std::sin(freq[k][0] * u[0] + freq[k][1] * u[1] + freq[k][2] * u[2] + phase[k]);
      s += f[k] * f[k];
    }
    s = std::sqrt(s);
    for (double& x : f) x /= s;
    return f;
  }
};

LocationField location_field(const SyntheticWorldConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ (kBasisStream * 3));
  std::normal_distribution<double> freq(0.0, 2.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  LocationField f;
  for (int k = 0; k < cfg.feature_dim; ++k) {
    f.freq.push_back({freq(rng), freq(rng), freq(rng)});
    f.phase.push_back(phase(rng));
  }
  return f;
}

std::vector<double> corrupted_feature(const WorldBasis& basis, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.5);
  std::vector<double> f(basis.corruption.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = 2.0 * basis.corruption[i] + noise(rng);
  return f;
}

}  // namespace

WorldBasis world_basis(const SyntheticWorldConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed ^ kBasisStream);
  const auto dim = static_cast<std::size_t>(cfg.feature_dim);
  WorldBasis b;
  b.season_cos = random_unit(rng, dim);
  b.season_sin = random_unit(rng, dim);
  orthonormalize(b.season_sin, {&b.season_cos});
  b.diurnal_cos = random_unit(rng, dim);
  orthonormalize(b.diurnal_cos, {&b.season_cos, &b.season_sin});
  b.diurnal_sin = random_unit(rng, dim);
  orthonormalize(b.diurnal_sin, {&b.season_cos, &b.season_sin, &b.diurnal_cos});
  b.corruption = random_unit(rng, dim);
  return b;
}

std::vector<double> synthetic_feature(const std::vector<double>& signature, const WorldBasis& basis,
                                      const SyntheticWorldConfig& cfg, double lat, const TorusTime& t) {
  const double theta_adj = lat < 0.0 ? wrap_unit(t.theta() + 0.5) : t.theta();
  const double sc = cfg.seasonal_amp * std::cos(2.0 * kPi * theta_adj);
  const double ss = cfg.seasonal_amp * std::sin(2.0 * kPi * theta_adj);
  const double dc = cfg.diurnal_amp * std::cos(2.0 * kPi * t.phi());
  const double ds = cfg.diurnal_amp * std::sin(2.0 * kPi * t.phi());
  std::vector<double> f(signature.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    f[i] = signature[i] + sc * basis.season_cos[i] + ss * basis.season_sin[i] + dc * basis.diurnal_cos[i] +
           ds * basis.diurnal_sin[i];
  }
  return f;
}

Dataset generate_synthetic(const SyntheticWorldConfig& cfg) {
  cfg.validate();
  const WorldBasis basis = world_basis(cfg);
  const LocationField field = location_field(cfg);
  const auto dim = static_cast<std::size_t>(cfg.feature_dim);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::int64_t year_start = Timestamp{cfg.year, 1, 1, 0, 0, 0}.to_epoch_seconds();
  const std::int64_t year_seconds = static_cast<std::int64_t>(days_in_year(cfg.year)) * 86400;
  std::uniform_int_distribution<std::int64_t> second_of_year(0, year_seconds - 1);

  Dataset out;
  out.records.reserve(static_cast<std::size_t>(cfg.n_cameras) * static_cast<std::size_t>(cfg.frames_per_camera));
  for (int c = 0; c < cfg.n_cameras; ++c) {
    const double z = 2.0 * unit(rng) - 1.0;
    const double lon = 360.0 * unit(rng) - 180.0;
    const GeoCoord coord(std::asin(z) * kRadToDeg, lon);
    std::vector<double> sig = random_unit(rng, dim);
    if (cfg.geo_signal > 0.0) {
      const std::vector<double> g = field(coord);
      for (std::size_t i = 0; i < dim; ++i) sig[i] = (1.0 - cfg.geo_signal) * sig[i] + cfg.geo_signal * g[i];
      const double n = std::sqrt(dot(sig, sig));
      for (double& x : sig) x /= n;
    }
    char id[32];
    std::snprintf(id, sizeof(id), "cam%04d", c);
    for (int f = 0; f < cfg.frames_per_camera; ++f) {
      Record r;
      r.camera_id = id;
      r.coord = coord;
      r.timestamp = Timestamp::from_epoch_seconds(year_start + second_of_year(rng));
      const bool corrupt = cfg.corrupt_fraction > 0.0 && unit(rng) < cfg.corrupt_fraction;
      if (corrupt) {
        r.feature = corrupted_feature(basis, rng);
      } else {
        r.feature = synthetic_feature(sig, basis, cfg, coord.lat(), r.torus());
        for (double& x : r.feature) x += cfg.noise_sigma * noise(rng);
      }
      out.records.push_back(std::move(r));
    }
  }
  return out;
}

LabeledFeatures generate_probe_set(const SyntheticWorldConfig& cfg, int n_examples) {
  SyntheticWorldConfig clean = cfg;
  clean.corrupt_fraction = 0.0;
  clean.n_cameras = std::max(1, n_examples / 2);
  clean.frames_per_camera = 1;
  clean.seed = cfg.seed + 1;
  const Dataset good = generate_synthetic(clean);
  const WorldBasis basis = world_basis(cfg);
  std::mt19937_64 rng(cfg.seed + 2);
  LabeledFeatures out;
  for (int i = 0; i < n_examples; ++i) {
    if (i % 2 == 0) {
      out.features.push_back(good.records[static_cast<std::size_t>(i / 2) % good.size()].feature);
      out.labels.push_back(1);
    } else {
      out.features.push_back(corrupted_feature(basis, rng));
      out.labels.push_back(0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quality probe

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double QualityProbe::score(const std::vector<double>& feature) const {
  if (feature.size() != weights.size()) {
    throw DimensionError("QualityProbe: feature width " + std::to_string(feature.size()) + " vs probe width " +
                         std::to_string(weights.size()));
  }
  return sigmoid(dot(weights, feature) + bias);
}

ProbeTrainingResult train_quality_probe(const std::vector<std::vector<double>>& features,
                                        const std::vector<int>& labels) {
  if (features.size() != labels.size()) throw DimensionError("train_quality_probe: features/labels size mismatch");
  std::vector<std::size_t> train_idx, held_idx;
  for (std::size_t i = 0; i < features.size(); ++i) (i % 10 == 9 ? held_idx : train_idx).push_back(i);
  std::size_t pos = 0, neg = 0;
  for (std::size_t i : train_idx) (labels[i] == 1 ? pos : neg)++;
  if (pos < 2 || neg < 2) {
    throw ContractError("train_quality_probe: need at least two examples of each class, got " + std::to_string(pos) +
                        " positive and " + std::to_string(neg) + " negative");
  }
  const std::size_t dim = features.front().size();
  for (const auto& f : features)
    if (f.size() != dim) throw DimensionError("train_quality_probe: non-uniform feature width");

  ProbeTrainingResult res;
  res.probe.weights.assign(dim, 0.0);
  constexpr double kLearningRate = 0.5;
  constexpr int kMaxIters = 10000;
  const double n = static_cast<double>(train_idx.size());
  std::vector<double> grad(dim);
  for (res.iterations = 0; res.iterations < kMaxIters; ++res.iterations) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i : train_idx) {
      const double err = res.probe.score(features[i]) - static_cast<double>(labels[i] == 1);
      for (std::size_t k = 0; k < dim; ++k) grad[k] += err * features[i][k];
      gb += err;
    }
    double norm2 = gb * gb / (n * n);
    for (double g : grad) norm2 += g * g / (n * n);
    res.final_grad_norm = std::sqrt(norm2);
    if (res.final_grad_norm < 1e-6) break;
    for (std::size_t k = 0; k < dim; ++k) res.probe.weights[k] -= kLearningRate * grad[k] / n;
    res.probe.bias -= kLearningRate * gb / n;
  }
  std::size_t correct = 0;
  for (std::size_t i : held_idx) correct += (res.probe.score(features[i]) >= 0.5) == (labels[i] == 1);
  res.held_out_accuracy = held_idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(held_idx.size());
  return res;
}

// ---------------------------------------------------------------------------
// Curation

const char* to_string(QualityClass q) {
  switch (q) {
    case QualityClass::kHigh:
      return "high";
    case QualityClass::kMedium:
      return "medium";
    case QualityClass::kLow:
      return "low";
  }
  return "?";
}

void SplitThresholds::validate() const {
  if (!(0.0 <= t_low && t_low < t_high && t_high <= 1.0)) {
    throw ConfigError("thresholds must satisfy 0 <= t_low < t_high <= 1");
  }
  if (!(bin_size_deg > 0.0)) throw ConfigError("bin_size_deg must be positive");
  if (min_frames < 0 || min_months < 0 || min_months > 12) throw ConfigError("invalid frame/month requirement");
  if (test_camera_budget < 0) throw ConfigError("test_camera_budget must be >= 0");
}

QualityClass partition_quality(double score, const SplitThresholds& th) {
  if (score >= th.t_high) return QualityClass::kHigh;
  if (score >= th.t_low) return QualityClass::kMedium;
  return QualityClass::kLow;
}

int geo_bin(const GeoCoord& c, double bin_size_deg) {
  const int rows = static_cast<int>(std::ceil(180.0 / bin_size_deg));
  const int cols = static_cast<int>(std::ceil(360.0 / bin_size_deg));
  const int r = std::clamp(static_cast<int>(std::floor((c.lat() + 90.0) / bin_size_deg)), 0, rows - 1);
  const int col = std::clamp(static_cast<int>(std::floor((c.lon() + 180.0) / bin_size_deg)), 0, cols - 1);
  return r * 1000 + col;
}

nlohmann::json CurationReport::to_json() const {
  nlohmann::json j;
  j["records_per_class"] = records_per_class;
  nlohmann::json bins = nlohmann::json::object();
  for (const auto& [k, v] : records_per_bin) {
    bins[std::to_string(k / 1000) + "," + std::to_string(k % 1000)] = v;
  }
  j["records_per_bin"] = bins;
  nlohmann::json tbins = nlohmann::json::object();
  for (const auto& [k, v] : test_cameras_per_bin) {
    tbins[std::to_string(k / 1000) + "," + std::to_string(k % 1000)] = v;
  }
  j["test_cameras_per_bin"] = tbins;
  j["candidate_cameras"] = candidate_cameras;
  j["test_cameras"] = test_cameras;
  j["rejected"] = rejected;
  j["camera_disjoint"] = camera_disjoint;
  if (!note.empty()) j["note"] = note;
  return j;
}

CurationResult curate_split(const Dataset& data, const SplitThresholds& th, std::uint64_t seed) {
  th.validate();
  CurationResult res;
  auto& rep = res.report;
  rep.records_per_class = {{"high", 0}, {"medium", 0}, {"low", 0}};

  struct CameraStats {
    GeoCoord coord;
    std::size_t high_frames = 0;
    std::set<int> high_months;
  };
  std::map<std::string, CameraStats> cams;
  std::vector<QualityClass> cls(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Record& r = data.records[i];
    if (!r.quality) throw ContractError("curate_split: record " + std::to_string(i) + " has no quality score");
    cls[i] = partition_quality(*r.quality, th);
    rep.records_per_class[to_string(cls[i])]++;
    if (cls[i] == QualityClass::kLow) continue;
    rep.records_per_bin[geo_bin(r.coord, th.bin_size_deg)]++;
    auto& st = cams[r.camera_id];
    st.coord = r.coord;
    if (cls[i] == QualityClass::kHigh) {
      ++st.high_frames;
      if (r.timestamp) st.high_months.insert(r.timestamp->month);
    }
  }

  std::map<int, std::vector<std::string>> by_bin;
  for (const auto& [id, st] : cams) {
    if (st.high_frames < static_cast<std::size_t>(th.min_frames)) {
      rep.rejected[id] = "only " + std::to_string(st.high_frames) + " high-quality frames";
    } else if (st.high_months.size() < static_cast<std::size_t>(th.min_months)) {
      rep.rejected[id] = "high-quality frames cover only " + std::to_string(st.high_months.size()) + " months";
    } else {
      by_bin[geo_bin(st.coord, th.bin_size_deg)].push_back(id);
      ++rep.candidate_cameras;
    }
  }

  std::mt19937_64 rng(seed);
  for (auto& [_, ids] : by_bin) std::shuffle(ids.begin(), ids.end(), rng);
  std::set<std::string> test_set;
  const auto budget = static_cast<std::size_t>(th.test_camera_budget);
  for (std::size_t round = 0; test_set.size() < budget; ++round) {
    bool took = false;
    for (auto& [bin, ids] : by_bin) {
      if (test_set.size() >= budget) break;
      if (round < ids.size()) {
        test_set.insert(ids[round]);
        rep.test_cameras.push_back(ids[round]);
        rep.test_cameras_per_bin[bin]++;
        took = true;
      }
    }
    if (!took) break;
  }
  if (test_set.empty()) rep.note = "no eligible test cameras";

  for (std::size_t i = 0; i < data.size(); ++i) {
    if (cls[i] == QualityClass::kLow) continue;
    const Record& r = data.records[i];
    if (test_set.count(r.camera_id)) {
      if (cls[i] == QualityClass::kHigh) res.test.records.push_back(r);
    } else {
      res.train.records.push_back(r);
    }
  }

  std::set<std::string> train_ids;
  for (const auto& r : res.train.records) train_ids.insert(r.camera_id);
  for (const auto& id : test_set)
    if (train_ids.count(id)) rep.camera_disjoint = false;
  if (!rep.camera_disjoint) throw ContractError("curate_split: train and test share a camera");
  return res;
}

// ---------------------------------------------------------------------------
// Files

nlohmann::json record_to_json(const Record& r) {
  nlohmann::json j;
  j["camera_id"] = r.camera_id;
  j["lat"] = r.coord.lat();
  j["lon"] = r.coord.lon();
  j["timestamp"] = r.timestamp ? nlohmann::json(r.timestamp->to_iso()) : nlohmann::json(nullptr);
  j["feature"] = r.feature;
  if (r.quality) j["quality"] = *r.quality;
  return j;
}

Record record_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys = {"camera_id", "lat", "lon", "timestamp", "feature", "quality"};
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw std::invalid_argument("unknown field '" + key + "'");
  }
  Record r;
  r.camera_id = j.at("camera_id").get<std::string>();
  r.coord = GeoCoord(j.at("lat").get<double>(), j.at("lon").get<double>());
  const auto& ts = j.at("timestamp");
  if (!ts.is_null()) r.timestamp = Timestamp::parse_iso(ts.get<std::string>());
  r.feature = j.at("feature").get<std::vector<double>>();
  if (j.contains("quality") && !j["quality"].is_null()) {
    r.quality = j["quality"].get<double>();
    if (*r.quality < 0.0 || *r.quality > 1.0) throw std::invalid_argument("quality outside [0, 1]");
  }
  return r;
}

Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Record r;
    try {
      r = record_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!out.empty() && r.feature.size() != out.feature_width()) {
      throw DimensionError(path.string() + ":" + std::to_string(lineno) + ": feature width " +
                           std::to_string(r.feature.size()) + ", expected " + std::to_string(out.feature_width()));
    }
    out.records.push_back(std::move(r));
  }
  return out;
}

void save_jsonl(const Dataset& data, const std::filesystem::path& path) {
  std::string buf;
  for (const auto& r : data.records) {
    buf += record_to_json(r).dump();
    buf += '\n';
  }
  atomic_write(path, buf);
}

void save_feature_sidecar(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  std::vector<char> bytes;
  bytes.reserve(data.size() * data.feature_width() * sizeof(float));
  for (const auto& r : data.records)
    for (double v : r.feature) {
      const float f = static_cast<float>(v);
      const char* p = reinterpret_cast<const char*>(&f);
      bytes.insert(bytes.end(), p, p + sizeof(float));
    }
  atomic_write(path, bytes);
  nlohmann::json idx;
  idx["rows"] = data.size();
  idx["cols"] = data.feature_width();
  idx["dtype"] = "float32-le";
  std::vector<std::string> ids;
  for (const auto& r : data.records) ids.push_back(r.camera_id);
  idx["camera_ids"] = ids;
  std::filesystem::path side = path;
  side += ".json";
  atomic_write(side, idx.dump() + "\n");
}

std::vector<std::vector<double>> load_feature_sidecar(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  std::ifstream in(side);
  if (!in) throw IoError("cannot open " + side.string());
  nlohmann::json idx;
  try {
    idx = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw IoError(side.string() + ": " + e.what());
  }
  const auto rows = idx.at("rows").get<std::size_t>();
  const auto cols = idx.at("cols").get<std::size_t>();
  const auto bytes = read_file(path);
  if (bytes.size() != rows * cols * sizeof(float)) throw IoError(path.string() + ": size does not match index");
  std::vector<std::vector<double>> out(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < cols; ++k) {
      float f;
      std::memcpy(&f, bytes.data() + (i * cols + k) * sizeof(float), sizeof(float));
      out[i][k] = f;
    }
  return out;
}

}  // namespace tiger
