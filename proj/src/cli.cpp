#include "tiger/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "tiger/checkpoint.hpp"
#include "tiger/config.hpp"
#include "tiger/data.hpp"
#include "tiger/errors.hpp"
#include "tiger/evaluation.hpp"
#include "tiger/model.hpp"
#include "tiger/retrieval.hpp"
#include "tiger/trainer.hpp"

namespace tiger {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration JSON");
  cmd->add_option("--seed", c.seed, "Seed overriding every section seed");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.apply_seed(*c.seed);
  cfg.validate();
  return cfg;
}

void require_file(const std::string& path, const char* flag) {
  if (!fs::exists(path)) throw IoError(std::string(flag) + ": no such file " + path);
}

void log(const std::string& msg) { std::cerr << msg << "\n"; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::string out;
  std::string probe_out;
  int probe_size = 1000;
};

void cmd_generate(const GenerateArgs& a) {
  const RunConfig cfg = resolve_config(a.common);
  const Dataset data = generate_synthetic(cfg.data);
  save_jsonl(data, a.out);
  log("wrote " + std::to_string(data.size()) + " records to " + a.out);
  if (!a.probe_out.empty()) {
    const LabeledFeatures probe = generate_probe_set(cfg.data, a.probe_size);
    std::string buf;
    for (std::size_t i = 0; i < probe.features.size(); ++i) {
      buf += nlohmann::json{{"feature", probe.features[i]}, {"label", probe.labels[i]}}.dump() + "\n";
    }
    atomic_write(a.probe_out, buf);
    log("wrote " + std::to_string(probe.features.size()) + " probe examples to " + a.probe_out);
  }
}

struct CurateArgs {
  Common common;
  std::string in, out_train, out_test, report, probe;
  std::optional<double> t_high, t_low, bin_size;
  std::optional<int> min_frames, min_months, budget;
};

LabeledFeatures load_probe_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  LabeledFeatures out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.features.push_back(j.at("feature").get<std::vector<double>>());
      out.labels.push_back(j.at("label").get<int>());
    } catch (const std::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void cmd_curate(const CurateArgs& a) {
  RunConfig cfg = resolve_config(a.common);
  SplitThresholds th = cfg.curation;
  if (a.t_high) th.t_high = *a.t_high;
  if (a.t_low) th.t_low = *a.t_low;
  if (a.bin_size) th.bin_size_deg = *a.bin_size;
  if (a.min_frames) th.min_frames = *a.min_frames;
  if (a.min_months) th.min_months = *a.min_months;
  if (a.budget) th.test_camera_budget = *a.budget;
  th.validate();
  require_file(a.in, "--in");
  if (!a.probe.empty()) require_file(a.probe, "--probe");

  Dataset data = load_jsonl(a.in);
  if (!a.probe.empty()) {
    const LabeledFeatures probe_set = load_probe_file(a.probe);
    const ProbeTrainingResult probe = train_quality_probe(probe_set.features, probe_set.labels);
    log("quality probe: held-out accuracy " + fmt(probe.held_out_accuracy) + " after " +
        std::to_string(probe.iterations) + " iterations");
    for (Record& r : data.records) r.quality = probe.probe.score(r.feature);
  } else {
    for (const Record& r : data.records) {
      if (!r.quality) throw ConfigError("curate: records lack quality scores and no --probe was given");
    }
  }
  const CurationResult res = curate_split(data, th, cfg.data.seed);
  if (!res.report.camera_disjoint) throw ContractError("curate: split is not camera-disjoint");
  save_jsonl(res.train, a.out_train);
  save_jsonl(res.test, a.out_test);
  const std::string report = a.report.empty() ? a.out_train + ".report.json" : a.report;
  atomic_write(report, res.report.to_json().dump(2) + "\n");
  for (const auto& [cls, n] : res.report.records_per_class) log(cls + ": " + std::to_string(n) + " records");
  log("bins occupied: " + std::to_string(res.report.records_per_bin.size()));
  log("train: " + std::to_string(res.train.size()) + " records, test: " + std::to_string(res.test.size()) +
      " records from " + std::to_string(res.report.test_cameras.size()) + " cameras");
  log("camera-disjoint: yes");
  if (!res.report.note.empty()) log("note: " + res.report.note);
}

struct TrainArgs {
  Common common;
  std::string data, out, resume;
};

void cmd_train(const TrainArgs& a) {
  const RunConfig cfg = resolve_config(a.common);
  require_file(a.data, "--data");
  if (!a.resume.empty()) require_file(a.resume, "--resume");
  const Dataset data = load_jsonl(a.data);
  RunOptions opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) opts.resume = fs::path(a.resume);
  const int every = std::max(1, cfg.trainer.schedule.total_iters / 20);
  opts.on_iter = [&](const LogRow& r) {
    if (r.iter % every == 0) log("iter " + std::to_string(r.iter) + " lr " + fmt(r.lr) + " loss " + fmt(r.loss.total));
  };
  fs::create_directories(a.out);
  atomic_write(fs::path(a.out) / "config.json", run_config_to_json(cfg).dump(2) + "\n");
  const TrainingResult res = run_training(data, cfg.model, cfg.trainer, opts);
  log("final checkpoint " + (fs::path(a.out) / "model_final.ckpt").string());
  if (!res.log.empty()) log("final loss " + fmt(res.log.back().loss.total));
}

struct IndexArgs {
  Common common;
  std::string checkpoint, data, out, kind = "image";
  bool fine_grid = false;
};

void cmd_index(const IndexArgs& a) {
  resolve_config(a.common);
  require_file(a.checkpoint, "--checkpoint");
  if (a.kind != "time") require_file(a.data, "--data");
  const Model model = load_checkpoint(a.checkpoint);
  Gallery g;
  if (a.kind == "image") {
    g = build_image_gallery(model, load_jsonl(a.data));
  } else if (a.kind == "location") {
    const auto cands = default_geo_candidates(load_jsonl(a.data), model.config().geo_nside);
    g = build_location_gallery(model, cands);
  } else {
    g = build_time_gallery(model, a.fine_grid);
  }
  save_gallery(g, a.out);
  log("wrote " + a.kind + " gallery with " + std::to_string(g.size()) + " rows to " + a.out);
}

struct QueryArgs {
  Common common;
  std::string checkpoint, gallery, task, input, out;
  int k = 10;
  bool with_time = false;
  bool no_rerank = false;
};

struct QueryInput {
  std::vector<std::vector<double>> feats;
  std::vector<std::optional<GeoCoord>> coords;
  std::vector<std::optional<TorusTime>> times;
};

QueryInput load_queries(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  if (doc.is_object()) doc = nlohmann::json::array({doc});
  QueryInput q;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& j = doc[i];
    try {
      q.feats.push_back(j.contains("feature") ? j["feature"].get<std::vector<double>>() : std::vector<double>{});
      q.coords.push_back(j.contains("lat") ? std::optional<GeoCoord>(GeoCoord(j["lat"].get<double>(), j["lon"].get<double>()))
                                           : std::nullopt);
      q.times.push_back(j.contains("timestamp") && !j["timestamp"].is_null()
                            ? std::optional<TorusTime>(timestamp_to_torus(Timestamp::parse_iso(j["timestamp"].get<std::string>())))
                            : std::nullopt);
    } catch (const std::exception& e) {
      throw ConfigError(path + ": query " + std::to_string(i) + ": " + e.what());
    }
  }
  return q;
}

template <typename T>
std::vector<T> require_all(const std::vector<std::optional<T>>& v, const char* what) {
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i]) throw ConfigError("query " + std::to_string(i) + ": missing " + what);
    out.push_back(*v[i]);
  }
  return out;
}

ad::Tensor require_features(const QueryInput& q) {
  for (std::size_t i = 0; i < q.feats.size(); ++i)
    if (q.feats[i].empty()) throw ConfigError("query " + std::to_string(i) + ": missing feature");
  return stack_rows(q.feats);
}

void cmd_query(const QueryArgs& a) {
  RunConfig cfg = resolve_config(a.common);
  if (a.k <= 0) throw ConfigError("--k must be positive");
  cfg.retrieval.top_k = a.k;
  if (a.no_rerank) cfg.retrieval.rerank = false;
  require_file(a.checkpoint, "--checkpoint");
  require_file(a.input, "--input");
  if (!a.gallery.empty()) require_file(a.gallery, "--gallery");
  else if (a.task != "time") throw ConfigError("--gallery is required for task " + a.task);
  const Model model = load_checkpoint(a.checkpoint);
  const QueryInput q = load_queries(a.input);
  const Gallery g = a.gallery.empty() ? build_time_gallery(model, cfg.retrieval.fine_time_grid) : load_gallery(a.gallery);
  const auto k = static_cast<std::size_t>(a.k);

  nlohmann::json out = nlohmann::json::array();
  if (a.task == "geoloc") {
    std::vector<TorusTime> times;
    if (a.with_time) times = require_all(q.times, "timestamp");
    const auto preds = a.with_time ? task_geolocalize(model, require_features(q), g, cfg.retrieval,
                                                      std::span<const TorusTime>(times))
                                   : task_geolocalize(model, require_features(q), g, cfg.retrieval);
    for (const auto& p : preds) {
      out.push_back({{"lat", p.coord.lat()}, {"lon", p.coord.lon()}, {"result", query_result_to_json(p.result, g)}});
    }
  } else if (a.task == "time") {
    bool conditioned = !q.coords.empty() && std::all_of(q.coords.begin(), q.coords.end(), [](const auto& c) { return c.has_value(); });
    std::vector<GeoCoord> coords;
    if (conditioned) coords = require_all(q.coords, "location");
    const auto preds = conditioned ? task_time_predict(model, require_features(q), g, cfg.retrieval,
                                                       std::span<const GeoCoord>(coords))
                                   : task_time_predict(model, require_features(q), g, cfg.retrieval);
    for (const auto& p : preds) {
      const TimeBinId b = torus_to_bin(p.time);
      out.push_back({{"theta", p.time.theta()},
                     {"phi", p.time.phi()},
                     {"month", b.month + 1},
                     {"hour", b.hour},
                     {"result", query_result_to_json(p.result, g)}});
    }
  } else if (a.task == "geotime") {
    const auto times = require_all(q.times, "timestamp");
    for (const auto& r : task_geotime_retrieve(model, require_features(q), times, g, k)) {
      out.push_back(query_result_to_json(r, g));
    }
  } else if (a.task == "compose") {
    const auto coords = require_all(q.coords, "location");
    const auto times = require_all(q.times, "timestamp");
    for (const auto& r : task_compositional(model, coords, times, g, k)) out.push_back(query_result_to_json(r, g));
  } else {
    throw ConfigError("--task must be one of geoloc, time, geotime, compose");
  }
  const std::string text = out.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    atomic_write(a.out, text);
  }
}

struct EvalArgs {
  Common common;
  std::string checkpoint, test, train, report;
  bool no_rerank = false;
};

void cmd_eval(const EvalArgs& a) {
  RunConfig cfg = resolve_config(a.common);
  if (a.no_rerank) cfg.retrieval.rerank = false;
  require_file(a.checkpoint, "--checkpoint");
  require_file(a.test, "--test");
  if (!a.train.empty()) require_file(a.train, "--train");
  const Model model = load_checkpoint(a.checkpoint);
  const Dataset test = load_jsonl(a.test);
  const Dataset train = a.train.empty() ? Dataset{} : load_jsonl(a.train);
  const MetricsReport rep = evaluate_model(model, train, test, cfg.retrieval, cfg.evaluation);
  atomic_write(a.report, rep.to_json().dump(2) + "\n");
  const fs::path base = fs::path(a.report).replace_extension();
  atomic_write(base.string() + ".csv", rep.to_csv());
  atomic_write(base.string() + ".month_confusion.csv", rep.month_confusion_csv());
  atomic_write(base.string() + ".hour_confusion.csv", rep.hour_confusion_csv());
  log("queries " + std::to_string(rep.n_queries));
  log("ToY error " + fmt(rep.mean_toy_error_days) + " d, ToD error " + fmt(rep.mean_tod_error_hours) + " h");
  log("geolocation error " + fmt(rep.mean_geo_error_km) + " km");
  log("R@1 " + fmt(rep.recall_at_1) + ", R@5 " + fmt(rep.recall_at_5) + ", R@10 " + fmt(rep.recall_at_10) +
      " (random " + fmt(rep.random_recall_at_10) + ")");
}

struct DumpArgs {
  Common common;
  std::string checkpoint, data, out;
};

void cmd_dump(const DumpArgs& a) {
  resolve_config(a.common);
  require_file(a.checkpoint, "--checkpoint");
  require_file(a.data, "--data");
  const Model model = load_checkpoint(a.checkpoint);
  const Dataset data = load_jsonl(a.data);
  const std::size_t d = static_cast<std::size_t>(model.config().d);
  std::vector<std::vector<double>> feats;
  std::vector<GeoCoord> coords;
  for (const auto& r : data.records) {
    feats.push_back(r.feature);
    coords.push_back(r.coord);
  }
  const ad::Tensor v = model.embed_images(stack_rows(feats));
  const ad::Tensor l = model.embed_locations(coords);
  std::ostringstream os;
  os.precision(9);
  os << "row,camera_id,lat,lon,timestamp,kind";
  for (std::size_t k = 0; k < d; ++k) os << ",e" << k;
  os << "\n";
  auto emit = [&](std::size_t i, const char* kind, std::span<const double> e) {
    const Record& r = data.records[i];
    os << i << "," << r.camera_id << "," << r.coord.lat() << "," << r.coord.lon() << ","
       << (r.timestamp ? r.timestamp->to_iso() : "") << "," << kind;
    for (double x : e) os << "," << x;
    os << "\n";
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    emit(i, "image", v.row(i));
    emit(i, "location", l.row(i));
    if (data.records[i].timestamp) {
      const TorusTime t = data.records[i].torus();
      emit(i, "time", model.embed_times(std::span<const TorusTime>(&t, 1)).row(0));
    }
  }
  atomic_write(a.out, os.str());
  log("wrote embeddings for " + std::to_string(data.size()) + " records to " + a.out);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Geo-temporal embedding toolkit"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic webcam dataset");
  add_common(g, gen.common);
  g->add_option("--out", gen.out, "Output JSONL")->required();
  g->add_option("--probe-out", gen.probe_out, "Also write a labeled quality-probe set");
  g->add_option("--probe-size", gen.probe_size, "Probe examples");

  CurateArgs cur;
  auto* c = app.add_subcommand("curate", "Quality filtering and camera-disjoint split");
  add_common(c, cur.common);
  c->add_option("--in", cur.in, "Input JSONL")->required();
  c->add_option("--out-train", cur.out_train, "Train JSONL")->required();
  c->add_option("--out-test", cur.out_test, "Test JSONL")->required();
  c->add_option("--report", cur.report, "Report JSON");
  c->add_option("--probe", cur.probe, "Labeled probe JSONL (feature, label) used to score records");
  c->add_option("--t-high", cur.t_high, "High-quality threshold");
  c->add_option("--t-low", cur.t_low, "Low-quality threshold");
  c->add_option("--bin-size", cur.bin_size, "Geographic bin size in degrees");
  c->add_option("--min-frames", cur.min_frames, "Frames required of a test camera");
  c->add_option("--min-months", cur.min_months, "Distinct months required of a test camera");
  c->add_option("--budget", cur.budget, "Maximum test cameras");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  add_common(t, tr.common);
  t->add_option("--data", tr.data, "Training JSONL")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--resume", tr.resume, "Training state to resume from");

  IndexArgs ix;
  auto* i = app.add_subcommand("index", "Build a gallery");
  add_common(i, ix.common);
  i->add_option("--checkpoint", ix.checkpoint, "Model checkpoint")->required();
  i->add_option("--data", ix.data, "Records to index (image) or training records (location)");
  i->add_option("--out", ix.out, "Gallery path")->required();
  i->add_option("--kind", ix.kind, "image, location or time")->check(CLI::IsMember({"image", "location", "time"}));
  i->add_flag("--fine-grid", ix.fine_grid, "365x24 time grid");

  QueryArgs qa;
  auto* q = app.add_subcommand("query", "Run a retrieval task");
  add_common(q, qa.common);
  q->add_option("--checkpoint", qa.checkpoint, "Model checkpoint")->required();
  q->add_option("--gallery", qa.gallery, "Gallery path (optional for time)");
  q->add_option("--task", qa.task, "geoloc, time, geotime or compose")
      ->required()
      ->check(CLI::IsMember({"geoloc", "time", "geotime", "compose"}));
  q->add_option("--input", qa.input, "Query JSON (object or array)")->required();
  q->add_option("--k", qa.k, "Results per query");
  q->add_option("--out", qa.out, "Output JSON (default stdout)");
  q->add_flag("--with-time", qa.with_time, "Condition geolocalization on the query timestamp");
  q->add_flag("--no-rerank", qa.no_rerank, "Disable the classifier prior");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  e->add_option("--test", ev.test, "Test JSONL")->required();
  e->add_option("--train", ev.train, "Training JSONL (location candidates)");
  e->add_option("--report", ev.report, "Report JSON")->required();
  e->add_flag("--no-rerank", ev.no_rerank, "Disable the classifier prior");

  DumpArgs du;
  auto* dmp = app.add_subcommand("dump-embeddings", "Write image, location and time embeddings as CSV");
  add_common(dmp, du.common);
  dmp->add_option("--checkpoint", du.checkpoint, "Model checkpoint")->required();
  dmp->add_option("--data", du.data, "Records JSONL")->required();
  dmp->add_option("--out", du.out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitConfig;
  }

  try {
    if (*g) cmd_generate(gen);
    else if (*c) cmd_curate(cur);
    else if (*t) cmd_train(tr);
    else if (*i) cmd_index(ix);
    else if (*q) cmd_query(qa);
    else if (*e) cmd_eval(ev);
    else if (*dmp) cmd_dump(du);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const IoError& err) {
    std::cerr << "I/O error: " << err.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "I/O error: " << err.what() << "\n";
    return kExitIo;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& err) {
    std::cerr << "invalid input: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return kExitOk;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"tiger"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace tiger
