#include "tiger/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "tiger/checkpoint.hpp"
#include "tiger/errors.hpp"
#include "tiger/objectives.hpp"

namespace tiger {

using ad::Tensor;

namespace {

constexpr double kNormTolerance = 1e-6;
constexpr std::size_t kEmbedChunk = 1024;

Tensor slice(const Tensor& t, std::size_t begin, std::size_t count) {
  Tensor out = Tensor::matrix(count, t.cols());
  std::copy_n(t.values().begin() + static_cast<std::ptrdiff_t>(begin * t.cols()), count * t.cols(),
              out.values().begin());
  return out;
}

Tensor vstack(const std::vector<Tensor>& parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.size();
  }
  return out;
}

// Applies `embed(begin, count)` in chunks and stacks the results.
template <typename F>
Tensor chunked(std::size_t n, std::size_t cols, F&& embed) {
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < n; b += kEmbedChunk) parts.push_back(embed(b, std::min(kEmbedChunk, n - b)));
  return vstack(parts, cols);
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> Gallery::shards(std::size_t count) const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (count == 0) count = 1;
  const std::size_t n = size();
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t b = n * s / count, e = n * (s + 1) / count;
    if (e > b) out.emplace_back(b, e);
  }
  return out;
}

Gallery build_gallery(const Tensor& embeddings, std::vector<GalleryMeta> meta, int classes) {
  if (embeddings.rows() != meta.size() && !(meta.empty() && embeddings.size() == 0)) {
    throw DimensionError("build_gallery: " + std::to_string(embeddings.rows()) + " rows but " +
                         std::to_string(meta.size()) + " metadata entries");
  }
  Gallery g;
  g.rows_ = meta.empty() ? Tensor::matrix(0, embeddings.size() == 0 ? 0 : embeddings.cols())
                         : round_to_float(embeddings);
  for (std::size_t i = 0; i < meta.size(); ++i) {
    double s = 0.0;
    for (double v : embeddings.row(i)) s += v * v;
    if (!(std::abs(std::sqrt(s) - 1.0) <= kNormTolerance)) {
      throw ContractError("build_gallery: row " + std::to_string(i) + " ('" + meta[i].id + "') has norm " +
                          std::to_string(std::sqrt(s)));
    }
    if (classes > 0 && (meta[i].bin < 0 || meta[i].bin >= classes)) {
      throw ContractError("build_gallery: row " + std::to_string(i) + " ('" + meta[i].id + "') has bin " +
                          std::to_string(meta[i].bin) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  g.meta_ = std::move(meta);
  g.classes_ = classes;
  return g;
}

void save_gallery(const Gallery& g, const std::filesystem::path& path) {
  save_tensors(path, {{"rows", g.rows()}}, Precision::kFloat32);
  nlohmann::json items = nlohmann::json::array();
  for (const auto& m : g.meta()) {
    nlohmann::json j;
    j["id"] = m.id;
    if (m.coord) {
      j["lat"] = m.coord->lat();
      j["lon"] = m.coord->lon();
    }
    if (m.timestamp) j["timestamp"] = m.timestamp->to_iso();
    if (m.time) {
      j["theta"] = m.time->theta();
      j["phi"] = m.time->phi();
    }
    j["bin"] = m.bin;
    items.push_back(std::move(j));
  }
  nlohmann::json doc{{"rows", g.size()}, {"dim", g.dim()}, {"classes", g.classes()}, {"items", std::move(items)}};
  std::filesystem::path side = path;
  side += ".json";
  atomic_write(side, doc.dump() + "\n");
}

Gallery load_gallery(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  std::ifstream in(side);
  if (!in) throw IoError("cannot open " + side.string());
  Gallery g;
  try {
    const nlohmann::json doc = nlohmann::json::parse(in);
    g.classes_ = doc.at("classes").get<int>();
    for (const auto& j : doc.at("items")) {
      GalleryMeta m;
      m.id = j.at("id").get<std::string>();
      if (j.contains("lat")) m.coord = GeoCoord(j["lat"].get<double>(), j["lon"].get<double>());
      if (j.contains("timestamp")) m.timestamp = Timestamp::parse_iso(j["timestamp"].get<std::string>());
      if (j.contains("theta")) m.time = TorusTime(j["theta"].get<double>(), j["phi"].get<double>());
      m.bin = j.at("bin").get<int>();
      g.meta_.push_back(std::move(m));
    }
    const auto dim = doc.at("dim").get<std::size_t>();
    const auto tensors = load_tensors(path);
    if (tensors.size() != 1 || tensors[0].name != "rows") throw IoError(path.string() + ": expected one 'rows' tensor");
    g.rows_ = tensors[0].tensor;
    if (g.rows_.size() == 0) g.rows_ = Tensor::matrix(0, dim);
    if (g.rows_.rows() != g.meta_.size() || (g.rows_.size() != 0 && g.rows_.cols() != dim)) {
      throw IoError(path.string() + ": matrix " + ad::dims(g.rows_) + " does not match metadata");
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(side.string() + ": " + e.what());
  }
  return g;
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

std::vector<double> similarities(std::span<const double> query, const Gallery& g) {
  if (g.empty()) return {};
  if (query.size() != g.dim()) {
    throw DimensionError("search: query width " + std::to_string(query.size()) + " vs gallery width " +
                         std::to_string(g.dim()));
  }
  std::vector<double> sims(g.size());
  for (const auto& [b, e] : g.shards(1)) {
    for (std::size_t i = b; i < e; ++i) {
      auto r = g.row(i);
      double s = 0.0;
      for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * query[k];
      sims[i] = s;
    }
  }
  return sims;
}

QueryResult search(std::span<const double> query, const Gallery& g, std::size_t k) {
  if (k == 0) throw ContractError("search: k must be >= 1");
  const auto sims = similarities(query, g);
  QueryResult r;
  for (std::size_t i : top_k(sims, k)) r.hits.push_back({i, sims[i], sims[i]});
  return r;
}

void RerankConfig::validate() const {
  if (!(psi > 0.0)) throw ConfigError("retrieval: psi must be > 0");
  if (!(beta_max >= 0.0)) throw ConfigError("retrieval: beta_max must be >= 0");
}

double entropy_beta(std::span<const double> probs, double beta_max) {
  if (probs.size() <= 1) return beta_max;
  const auto [lo, hi] = std::minmax_element(probs.begin(), probs.end());
  if (*lo == *hi) return 0.0;
  const double b = beta_max * (1.0 - entropy(probs) / std::log(static_cast<double>(probs.size())));
  return std::clamp(b, 0.0, beta_max);
}

std::vector<double> rerank(std::span<const double> sims, std::span<const double> probs, std::span<const int> bins,
                           const RerankConfig& cfg, double* beta_out) {
  if (sims.size() != bins.size()) {
    throw DimensionError("rerank: " + std::to_string(sims.size()) + " similarities vs " +
                         std::to_string(bins.size()) + " bins");
  }
  cfg.validate();
  const double beta = probs.empty() ? 0.0 : entropy_beta(probs, cfg.beta_max);
  if (beta_out) *beta_out = beta;
  std::vector<double> out(sims.size());
  for (std::size_t i = 0; i < sims.size(); ++i) {
    out[i] = sims[i] / cfg.psi;
    if (probs.empty()) continue;
    if (bins[i] < 0 || static_cast<std::size_t>(bins[i]) >= probs.size()) {
      throw ContractError("rerank: bin " + std::to_string(bins[i]) + " of row " + std::to_string(i) +
                          " outside [0, " + std::to_string(probs.size()) + ")");
    }
    out[i] += beta * std::log(std::max(probs[static_cast<std::size_t>(bins[i])], kProbFloor));
  }
  return out;
}

QueryResult search_reranked(std::span<const double> query, const Gallery& g, std::span<const double> probs,
                            const RerankConfig& cfg, std::size_t k) {
  if (k == 0) throw ContractError("search: k must be >= 1");
  const auto sims = similarities(query, g);
  std::vector<int> bins(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) bins[i] = g.meta(i).bin;
  QueryResult r;
  const auto scores = rerank(sims, probs, bins, cfg, &r.beta);
  for (std::size_t i : top_k(scores, k)) r.hits.push_back({i, sims[i], scores[i]});
  return r;
}

void RetrievalConfig::validate() const {
  geo.validate();
  time.validate();
  if (top_k <= 0) throw ConfigError("retrieval.top_k must be positive");
}

void to_json(nlohmann::json& j, const RetrievalConfig& c) {
  j = nlohmann::json{{"geo", {{"psi", c.geo.psi}, {"beta_max", c.geo.beta_max}}},
                     {"time", {{"psi", c.time.psi}, {"beta_max", c.time.beta_max}}},
                     {"rerank", c.rerank},
                     {"fine_time_grid", c.fine_time_grid},
                     {"condition_time_on_location", c.condition_time_on_location},
                     {"top_k", c.top_k}};
}

void from_json(const nlohmann::json& j, RetrievalConfig& c) {
  static const std::set<std::string> kKeys = {"geo", "time", "rerank", "fine_time_grid", "condition_time_on_location",
                                              "top_k"};
  if (!j.is_object()) throw ConfigError("retrieval: expected an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.count(key)) throw ConfigError("retrieval." + key + ": unknown key");
  auto rr = [](const nlohmann::json& s, RerankConfig& r, const std::string& where) {
    if (!s.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : s.items())
      if (key != "psi" && key != "beta_max") throw ConfigError(where + "." + key + ": unknown key");
    r.psi = s.value("psi", r.psi);
    r.beta_max = s.value("beta_max", r.beta_max);
  };
  try {
    if (j.contains("geo")) rr(j["geo"], c.geo, "retrieval.geo");
    if (j.contains("time")) rr(j["time"], c.time, "retrieval.time");
    c.rerank = j.value("rerank", c.rerank);
    c.fine_time_grid = j.value("fine_time_grid", c.fine_time_grid);
    c.condition_time_on_location = j.value("condition_time_on_location", c.condition_time_on_location);
    c.top_k = j.value("top_k", c.top_k);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("retrieval: ") + e.what());
  }
}

std::vector<GeoCoord> default_geo_candidates(const Dataset& train, int nside) {
  std::vector<GeoCoord> out;
  std::set<std::pair<double, double>> seen;
  for (const auto& r : train.records)
    if (seen.insert({r.coord.lat(), r.coord.lon()}).second) out.push_back(r.coord);
  for (std::int64_t i = 0; i < cell_count(nside); ++i) out.push_back(cell_center(CellId{nside, i}));
  return out;
}

Gallery build_location_gallery(const Model& model, std::span<const GeoCoord> candidates) {
  const auto d = static_cast<std::size_t>(model.config().d);
  Tensor emb = chunked(candidates.size(), d, [&](std::size_t b, std::size_t n) {
    return model.embed_locations(candidates.subspan(b, n));
  });
  std::vector<GalleryMeta> meta;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    GalleryMeta m;
    m.id = "loc#" + std::to_string(i);
    m.coord = candidates[i];
    m.bin = static_cast<int>(geo_to_cell(candidates[i], model.config().geo_nside).index);
    meta.push_back(std::move(m));
  }
  return build_gallery(emb, std::move(meta), model.config().n_geo_classes);
}

Gallery build_time_gallery(const Model& model, bool fine_grid) {
  std::vector<TorusTime> centers;
  std::vector<GalleryMeta> meta;
  if (fine_grid) {
    for (int day = 0; day < 365; ++day)
      for (int h = 0; h < kHourBins; ++h) centers.emplace_back((day + 0.5) / 365.0, (h + 0.5) / kHourBins);
  } else {
    for (int b = 0; b < kTimeBins; ++b) centers.push_back(bin_center(TimeBinId::from_flat(b)));
  }
  for (std::size_t i = 0; i < centers.size(); ++i) {
    GalleryMeta m;
    m.id = "time#" + std::to_string(i);
    m.time = centers[i];
    m.bin = torus_to_bin(centers[i]).flat();
    meta.push_back(std::move(m));
  }
  const auto d = static_cast<std::size_t>(model.config().d);
  const std::span<const TorusTime> all(centers);
  Tensor emb = chunked(centers.size(), d, [&](std::size_t b, std::size_t n) { return model.embed_times(all.subspan(b, n)); });
  return build_gallery(emb, std::move(meta), model.config().n_time_classes);
}

Gallery build_image_gallery(const Model& model, const Dataset& data) {
  const auto d = static_cast<std::size_t>(model.config().d);
  Tensor emb = chunked(data.size(), d, [&](std::size_t b, std::size_t n) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = b; i < b + n; ++i) rows.push_back(data.records[i].feature);
    return model.embed_images(stack_rows(rows));
  });
  std::vector<GalleryMeta> meta;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Record& r = data.records[i];
    GalleryMeta m;
    m.id = r.camera_id + "#" + std::to_string(i);
    m.coord = r.coord;
    m.timestamp = r.timestamp;
    if (r.timestamp) m.time = r.torus();
    meta.push_back(std::move(m));
  }
  return build_gallery(emb, std::move(meta), 0);
}

namespace {

void require_rows(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a) + " queries vs " + std::to_string(b) +
                         " conditioning inputs");
  }
}

}  // namespace

std::vector<GeoPrediction> task_geolocalize(const Model& model, const Tensor& feats, const Gallery& locations,
                                            const RetrievalConfig& cfg,
                                            std::optional<std::span<const TorusTime>> times) {
  if (locations.empty()) throw ContractError("task_geolocalize: empty candidate set");
  const std::size_t n = feats.rows();
  const auto d = static_cast<std::size_t>(model.config().d);
  const Tensor v = chunked(n, d, [&](std::size_t b, std::size_t c) { return model.embed_images(slice(feats, b, c)); });
  Tensor q = v;
  if (times) {
    require_rows(n, times->size(), "task_geolocalize");
    q = chunked(n, d, [&](std::size_t b, std::size_t c) {
      return model.embed_image_time(slice(feats, b, c), times->subspan(b, c));
    });
  }
  const Tensor probs = cfg.rerank ? model.classify_geo(v) : Tensor();
  std::vector<GeoPrediction> out;
  for (std::size_t i = 0; i < n; ++i) {
    QueryResult r = search_reranked(q.row(i), locations, cfg.rerank ? probs.row(i) : std::span<const double>(),
                                    cfg.geo, static_cast<std::size_t>(cfg.top_k));
    out.push_back({*locations.meta(r.hits.front().row).coord, std::move(r)});
  }
  return out;
}

std::vector<TimePrediction> task_time_predict(const Model& model, const Tensor& feats, const Gallery& times,
                                              const RetrievalConfig& cfg,
                                              std::optional<std::span<const GeoCoord>> coords) {
  if (times.empty()) throw ContractError("task_time_predict: empty time gallery");
  const std::size_t n = feats.rows();
  const auto d = static_cast<std::size_t>(model.config().d);
  const Tensor v = chunked(n, d, [&](std::size_t b, std::size_t c) { return model.embed_images(slice(feats, b, c)); });
  Tensor q = v;
  if (coords) {
    require_rows(n, coords->size(), "task_time_predict");
    q = chunked(n, d, [&](std::size_t b, std::size_t c) {
      return model.embed_image_location(slice(feats, b, c), coords->subspan(b, c));
    });
  }
  const Tensor probs = cfg.rerank ? model.classify_time(v) : Tensor();
  std::vector<TimePrediction> out;
  for (std::size_t i = 0; i < n; ++i) {
    QueryResult r = search_reranked(q.row(i), times, cfg.rerank ? probs.row(i) : std::span<const double>(),
                                    cfg.time, static_cast<std::size_t>(cfg.top_k));
    out.push_back({*times.meta(r.hits.front().row).time, std::move(r)});
  }
  return out;
}

std::vector<QueryResult> task_geotime_retrieve(const Model& model, const Tensor& feats,
                                               std::span<const TorusTime> target_times, const Gallery& images,
                                               std::size_t k) {
  require_rows(feats.rows(), target_times.size(), "task_geotime_retrieve");
  std::vector<QueryResult> out;
  if (images.empty()) return std::vector<QueryResult>(feats.rows());
  const auto d = static_cast<std::size_t>(model.config().d);
  const Tensor q = chunked(feats.rows(), d, [&](std::size_t b, std::size_t c) {
    return model.embed_image_time(slice(feats, b, c), target_times.subspan(b, c));
  });
  for (std::size_t i = 0; i < q.rows(); ++i) out.push_back(search(q.row(i), images, k));
  return out;
}

std::vector<QueryResult> task_compositional(const Model& model, std::span<const GeoCoord> coords,
                                            std::span<const TorusTime> times, const Gallery& images, std::size_t k) {
  require_rows(coords.size(), times.size(), "task_compositional");
  std::vector<QueryResult> out;
  if (images.empty()) return std::vector<QueryResult>(coords.size());
  const auto d = static_cast<std::size_t>(model.config().d);
  const Tensor q = chunked(coords.size(), d, [&](std::size_t b, std::size_t c) {
    return model.embed_location_time(coords.subspan(b, c), times.subspan(b, c));
  });
  for (std::size_t i = 0; i < q.rows(); ++i) out.push_back(search(q.row(i), images, k));
  return out;
}

nlohmann::json query_result_to_json(const QueryResult& r, const Gallery& g) {
  nlohmann::json hits = nlohmann::json::array();
  for (std::size_t rank = 0; rank < r.hits.size(); ++rank) {
    const Hit& h = r.hits[rank];
    const GalleryMeta& m = g.meta(h.row);
    nlohmann::json j{{"rank", rank + 1}, {"row", h.row}, {"id", m.id}, {"cosine", h.cosine}, {"score", h.score}};
    if (m.coord) {
      j["lat"] = m.coord->lat();
      j["lon"] = m.coord->lon();
    }
    if (m.timestamp) j["timestamp"] = m.timestamp->to_iso();
    if (m.time) {
      j["theta"] = m.time->theta();
      j["phi"] = m.time->phi();
    }
    if (m.bin >= 0) j["bin"] = m.bin;
    hits.push_back(std::move(j));
  }
  return nlohmann::json{{"beta", r.beta}, {"hits", std::move(hits)}};
}

}  // namespace tiger
