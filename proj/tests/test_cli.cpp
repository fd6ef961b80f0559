#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "test_util.hpp"
#include "tiger/checkpoint.hpp"
#include "tiger/cli.hpp"
#include "tiger/config.hpp"
#include "tiger/data.hpp"
#include "tiger/retrieval.hpp"

using namespace tiger;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  const char* env = std::getenv("TIGER_CLI_TMP");
  fs::path p = env ? fs::path(env) : test::temp_dir("cli");
  fs::create_directories(p);
  return p;
}

struct Captured {
  int code;
  std::string err;
};

Captured run(const std::vector<std::string>& args) {
  std::ostringstream err;
  auto* old = std::cerr.rdbuf(err.rdbuf());
  const int code = run_cli(args);
  std::cerr.rdbuf(old);
  return {code, err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

fs::path small_config(const fs::path& dir) {
  RunConfig c;
  c.data.n_cameras = 30;
  c.data.frames_per_camera = 40;
  c.data.feature_dim = 8;
  c.model.d = 16;
  c.model.n_freq = 4;
  c.model.img_feat_dim = 8;
  c.trainer.batch.batch_size = 16;
  c.trainer.batch.min_cells = 8;
  c.trainer.schedule.total_iters = 20;
  c.trainer.schedule.warmup_iters = 5;
  c.trainer.schedule.lr_max = 1e-3;
  c.trainer.checkpoint_every = 10;
  c.curation.min_frames = 5;
  c.curation.min_months = 3;
  c.curation.test_camera_budget = 5;
  c.evaluation.max_queries = 40;
  const fs::path p = dir / "small.json";
  std::ofstream(p) << run_config_to_json(c).dump(2);
  return p;
}

}  // namespace

TEST_CASE("generate with defaults is deterministic") {
  const fs::path dir = work_dir() / "gen";
  fs::create_directories(dir);
  REQUIRE(run({"generate", "--out", (dir / "a.jsonl").string()}).code == 0);
  REQUIRE(run({"generate", "--out", (dir / "b.jsonl").string()}).code == 0);
  CHECK(count_lines(dir / "a.jsonl") == 200u * 100u);
  CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
  REQUIRE(run({"generate", "--out", (dir / "c.jsonl").string(), "--seed", "99"}).code == 0);
  CHECK(slurp(dir / "a.jsonl") != slurp(dir / "c.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("configuration and I/O errors map to exit codes") {
  const fs::path dir = work_dir() / "errors";
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << R"({"model": {"d": "sixteen"}})";
  auto r = run({"generate", "--config", (dir / "bad.json").string(), "--out", (dir / "x.jsonl").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("model.d") != std::string::npos);

  std::ofstream(dir / "unknown.json") << R"({"trainer": {"schedule": {"warmup": 3}}})";
  r = run({"generate", "--config", (dir / "unknown.json").string(), "--out", (dir / "x.jsonl").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("trainer.schedule.warmup") != std::string::npos);

  CHECK(run({"generate"}).code == kExitConfig);
  CHECK(run({"frobnicate"}).code == kExitConfig);
  CHECK(run({"train", "--data", (dir / "missing.jsonl").string(), "--out", (dir / "m").string()}).code == kExitIo);
  CHECK(run({"generate", "--config", (dir / "missing.json").string(), "--out", (dir / "x.jsonl").string()}).code ==
        kExitIo);
  CHECK(run({"generate", "--out", (dir / "no_such_dir" / "x.jsonl").string()}).code == kExitIo);
  fs::remove_all(dir);
}

TEST_CASE("full pipeline: curate, train, index, query, eval, dump") {
  const fs::path dir = work_dir() / "pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = small_config(dir).string();
  const auto p = [&](const char* name) { return (dir / name).string(); };

  REQUIRE(run({"generate", "--config", cfg, "--out", p("all.jsonl"), "--probe-out", p("probe.jsonl"), "--probe-size",
               "200"})
              .code == 0);
  CHECK(count_lines(dir / "all.jsonl") == 1200);
  CHECK(count_lines(dir / "probe.jsonl") == 200);

  // Without quality scores or a probe, curation refuses.
  CHECK(run({"curate", "--config", cfg, "--in", p("all.jsonl"), "--out-train", p("tr.jsonl"), "--out-test",
             p("te.jsonl")})
            .code == kExitConfig);

  auto r = run({"curate", "--config", cfg, "--in", p("all.jsonl"), "--probe", p("probe.jsonl"), "--out-train",
                p("train.jsonl"), "--out-test", p("test.jsonl"), "--report", p("report.json")});
  REQUIRE(r.code == 0);
  CHECK(r.err.find("high:") != std::string::npos);
  CHECK(r.err.find("bins occupied") != std::string::npos);
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(report.contains("records_per_class"));
  CHECK(report.contains("records_per_bin"));
  CHECK(report["camera_disjoint"].get<bool>());
  CHECK(report["test_cameras"].size() == 5);

  // A threshold flag that no camera can satisfy empties the test split.
  r = run({"curate", "--config", cfg, "--in", p("all.jsonl"), "--probe", p("probe.jsonl"), "--out-train",
           p("train2.jsonl"), "--out-test", p("test2.jsonl"), "--report", p("report2.json"), "--min-frames", "1000"});
  REQUIRE(r.code == 0);
  CHECK(count_lines(dir / "test2.jsonl") == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "report2.json"))["note"] == "no eligible test cameras");
  CHECK(run({"curate", "--config", cfg, "--in", p("all.jsonl"), "--probe", p("probe.jsonl"), "--out-train",
             p("train3.jsonl"), "--out-test", p("test3.jsonl"), "--t-high", "0.3", "--t-low", "0.5"})
            .code == kExitConfig);

  REQUIRE(run({"train", "--config", cfg, "--data", p("train.jsonl"), "--out", p("run")}).code == 0);
  CHECK(fs::exists(dir / "run" / "model_final.ckpt"));
  CHECK(fs::exists(dir / "run" / "model_10.ckpt"));
  CHECK(fs::exists(dir / "run" / "config.json"));
  const std::string ckpt = p("run/model_final.ckpt");

  REQUIRE(run({"index", "--config", cfg, "--checkpoint", ckpt, "--data", p("test.jsonl"), "--out", p("img.gal")}).code ==
          0);
  REQUIRE(run({"index", "--checkpoint", ckpt, "--data", p("train.jsonl"), "--kind", "location", "--out",
               p("loc.gal")})
              .code == 0);
  REQUIRE(run({"index", "--checkpoint", ckpt, "--kind", "time", "--out", p("time.gal")}).code == 0);
  CHECK(load_gallery(p("time.gal")).size() == 288);

  const Dataset test = load_jsonl(p("test.jsonl"));
  REQUIRE(test.size() > 2);
  const Record& q0 = test.records[0];
  nlohmann::json qj = nlohmann::json::array();
  qj.push_back({{"feature", q0.feature}, {"lat", q0.coord.lat()}, {"lon", q0.coord.lon()},
                {"timestamp", q0.timestamp->to_iso()}});
  std::ofstream(dir / "q.json") << qj.dump();

  REQUIRE(run({"query", "--checkpoint", ckpt, "--gallery", p("img.gal"), "--task", "geotime", "--input", p("q.json"),
               "--k", "5", "--out", p("geotime.json")})
              .code == 0);
  const auto gt = nlohmann::json::parse(slurp(dir / "geotime.json"));
  REQUIRE(gt.size() == 1);
  const auto& hits = gt[0]["hits"];
  REQUIRE(hits.size() == 5);
  // Geo-time retrieval reports raw cosines against the fused query.
  const Model model = load_checkpoint(ckpt);
  const Gallery img = load_gallery(p("img.gal"));
  const TorusTime t0 = q0.torus();
  const ad::Tensor fq = model.embed_image_time(stack_rows(std::vector<std::vector<double>>{q0.feature}), std::span<const TorusTime>(&t0, 1));
  for (const auto& hit : hits) {
    const auto row = img.row(hit["row"].get<std::size_t>());
    double c = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) c += row[j] * fq(0, j);
    CHECK(hit["cosine"].get<double>() == doctest::Approx(c).epsilon(1e-5));
    CHECK(hit["score"].get<double>() == hit["cosine"].get<double>());
  }
  for (std::size_t i = 1; i < hits.size(); ++i) CHECK(hits[i - 1]["cosine"] >= hits[i]["cosine"]);

  REQUIRE(run({"query", "--checkpoint", ckpt, "--gallery", p("loc.gal"), "--task", "geoloc", "--input", p("q.json"),
               "--out", p("geoloc.json")})
              .code == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "geoloc.json"))[0].contains("lat"));
  REQUIRE(run({"query", "--checkpoint", ckpt, "--task", "time", "--input", p("q.json"), "--out", p("time.json")})
              .code == 0);
  const auto tj = nlohmann::json::parse(slurp(dir / "time.json"));
  CHECK(tj[0]["month"].get<int>() >= 1);
  CHECK(tj[0]["month"].get<int>() <= 12);
  REQUIRE(run({"query", "--checkpoint", ckpt, "--gallery", p("img.gal"), "--task", "compose", "--input", p("q.json"),
               "--out", p("compose.json")})
              .code == 0);
  CHECK(run({"query", "--checkpoint", ckpt, "--gallery", p("img.gal"), "--task", "bogus", "--input", p("q.json")})
            .code == kExitConfig);
  CHECK(run({"query", "--checkpoint", p("nope.ckpt"), "--gallery", p("img.gal"), "--task", "geotime", "--input",
             p("q.json")})
            .code == kExitIo);

  REQUIRE(run({"eval", "--config", cfg, "--checkpoint", ckpt, "--test", p("test.jsonl"), "--train", p("train.jsonl"),
               "--report", p("metrics.json")})
              .code == 0);
  const auto m = nlohmann::json::parse(slurp(dir / "metrics.json"));
  CHECK(m["n_queries"].get<int>() > 0);
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "metrics.month_confusion.csv"));
  CHECK(fs::exists(dir / "metrics.hour_confusion.csv"));

  // An untrained checkpoint scores near chance.
  RunConfig rc = load_run_config(cfg);
  save_checkpoint(dir / "untrained.ckpt", rc.model, init_params(rc.model, 3));
  REQUIRE(run({"eval", "--config", cfg, "--checkpoint", p("untrained.ckpt"), "--test", p("test.jsonl"), "--report",
               p("untrained.json")})
              .code == 0);
  const auto u = nlohmann::json::parse(slurp(dir / "untrained.json"));
  CHECK(u["mean_tod_error_hours"].get<double>() > 3.0);
  CHECK(u["mean_toy_error_days"].get<double>() > 45.0);

  REQUIRE(run({"dump-embeddings", "--checkpoint", ckpt, "--data", p("test.jsonl"), "--out", p("emb.csv")}).code == 0);
  CHECK(count_lines(dir / "emb.csv") == 1 + 3 * test.size());
  CHECK(slurp(dir / "emb.csv").rfind("row,camera_id,lat,lon,timestamp,kind,e0", 0) == 0);
  fs::remove_all(dir);
}
