#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "test_util.hpp"
#include "tiger/checkpoint.hpp"
#include "tiger/errors.hpp"
#include "tiger/evaluation.hpp"
#include "tiger/objectives.hpp"
#include "tiger/retrieval.hpp"
#include "tiger/trainer.hpp"

using namespace tiger;
using ad::Tensor;

namespace {

std::vector<GalleryMeta> plain_meta(std::size_t n, int classes = 0, std::mt19937_64* rng = nullptr) {
  std::vector<GalleryMeta> m(n);
  for (std::size_t i = 0; i < n; ++i) {
    m[i].id = "row" + std::to_string(i);
    if (classes > 0) m[i].bin = static_cast<int>((*rng)() % static_cast<std::uint64_t>(classes));
  }
  return m;
}

// Indices sorted by (score desc, index asc).
std::vector<std::size_t> full_sort(const std::vector<double>& s) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return idx;
}

std::vector<double> random_probs(std::size_t b, std::mt19937_64& rng, double sharp = 1.0) {
  std::normal_distribution<double> n(0, sharp);
  std::vector<double> p(b);
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(n(rng)));
  for (double& v : p) v /= z;
  return p;
}

std::vector<std::size_t> rows_of(const QueryResult& r) {
  std::vector<std::size_t> out;
  for (const Hit& h : r.hits) out.push_back(h.row);
  return out;
}

}  // namespace

TEST_CASE("gallery build: empty, norm violations, bins") {
  const Gallery empty = build_gallery(Tensor::matrix(0, 8), {});
  CHECK(empty.empty());
  CHECK(search(std::vector<double>(8, 0.0), empty, 5).hits.empty());
  CHECK_THROWS_AS(search(std::vector<double>(8, 0.0), empty, 0), ContractError);

  Tensor bad = Tensor::matrix(2, 2, {1.0, 0.0, 0.5, 0.5});
  try {
    build_gallery(bad, plain_meta(2));
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("row1") != std::string::npos);
  }
  std::vector<GalleryMeta> m = plain_meta(2);
  m[1].bin = 5;
  CHECK_THROWS_AS(build_gallery(Tensor::identity(2), m, 3), ContractError);
  CHECK_THROWS_AS(build_gallery(Tensor::identity(2), plain_meta(3)), DimensionError);
}

TEST_CASE("search basics: self match, duplicates, orthogonal query") {
  std::mt19937_64 rng(1);
  Tensor e = test::random_unit_rows(20, 8, rng);
  for (std::size_t k = 0; k < 8; ++k) e(7, k) = e(3, k);
  const Gallery g = build_gallery(e, plain_meta(20));
  const QueryResult r = search(g.row(11), g, 1);
  CHECK(r.hits[0].row == 11);
  CHECK(r.hits[0].cosine == doctest::Approx(1.0).epsilon(1e-6));
  const QueryResult dup = search(g.row(3), g, 2);
  CHECK(dup.hits[0].row == 3);
  CHECK(dup.hits[1].row == 7);
  CHECK(search(g.row(3), g, 100).hits.size() == 20);
  CHECK_THROWS_AS(search(std::vector<double>(7, 0.0), g, 3), DimensionError);

  Tensor axes = Tensor::matrix(5, 6);
  for (std::size_t i = 0; i < 5; ++i) axes(i, i) = 1.0;
  const Gallery ga = build_gallery(axes, plain_meta(5));
  std::vector<double> q(6, 0.0);
  q[5] = 1.0;
  const QueryResult o = search(q, ga, 5);
  CHECK(rows_of(o) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  for (const Hit& h : o.hits) CHECK(h.cosine == 0.0);
}

TEST_CASE("search agrees with a full-sort oracle on 1000 queries") {
  std::mt19937_64 rng(2);
  const Gallery g = build_gallery(test::random_unit_rows(300, 16, rng), plain_meta(300));
  const Tensor qs = test::random_unit_rows(1000, 16, rng);
  for (std::size_t i = 0; i < qs.rows(); ++i) {
    std::vector<double> s(g.size());
    for (std::size_t j = 0; j < g.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < 16; ++k) d += qs(i, k) * g.row(j)[k];
      s[j] = d;
    }
    auto oracle = full_sort(s);
    oracle.resize(10);
    CHECK(rows_of(search(qs.row(i), g, 10)) == oracle);
  }
  const auto sh = g.shards(4);
  CHECK(sh.size() == 4);
  CHECK(sh.front().first == 0);
  CHECK(sh.back().second == 300);
}

TEST_CASE("gallery round trip with 100000 rows is bit-exact") {
  std::mt19937_64 rng(3);
  const std::size_t n = 100000;
  std::vector<GalleryMeta> m = plain_meta(n, 288, &rng);
  m[5].coord = GeoCoord(12.5, -3.25);
  m[5].time = TorusTime(0.25, 0.5);
  m[5].timestamp = Timestamp{2023, 4, 1, 12, 0, 0};
  const Gallery g = build_gallery(test::random_unit_rows(n, 8, rng), m, 288);
  const auto dir = test::temp_dir("gallery");
  save_gallery(g, dir / "g.bin");
  const Gallery back = load_gallery(dir / "g.bin");
  CHECK(back == g);
  CHECK(back.classes() == 288);
  CHECK(back.meta(5) == g.meta(5));
  CHECK_THROWS_AS(load_gallery(dir / "missing.bin"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("entropy_beta") {
  CHECK(entropy_beta(std::vector<double>(288, 1.0 / 288.0), 2.0) == 0.0);
  std::vector<double> one(768, 0.0);
  one[12] = 1.0;
  CHECK(entropy_beta(one, 1.0) == 1.0);
  CHECK(entropy_beta(one, 2.0) == 2.0);
  const double b = entropy_beta(std::vector<double>{0.9, 0.1}, 1.0);
  CHECK(std::abs(b - 0.53100) < 1e-4);
  const double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  CHECK(b == doctest::Approx(1.0 - h / std::log(2.0)).epsilon(1e-14));
  CHECK(std::abs(h - 0.32508) < 1e-5);

  // Monotone in entropy and scale-equivariant in beta_max.
  double prev = 1.0;
  for (double p = 0.99; p >= 0.5; p -= 0.01) {
    const std::vector<double> q{p, 1.0 - p};
    const double v = entropy_beta(q, 1.0);
    CHECK(v <= prev + 1e-15);
    CHECK(entropy_beta(q, 3.0) == doctest::Approx(3.0 * v).epsilon(1e-14));
    prev = v;
  }
}

TEST_CASE("rerank reductions and the two-term oracle") {
  std::mt19937_64 rng(4);
  const RerankConfig cfg{0.07, 1.0};
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 5 + rng() % 60, b = 2 + rng() % 30;
    std::vector<double> sims(n);
    std::vector<int> bins(n);
    std::uniform_real_distribution<double> u(-1, 1);
    for (std::size_t i = 0; i < n; ++i) {
      sims[i] = u(rng);
      bins[i] = static_cast<int>(rng() % b);
    }
    const std::vector<double> uniform(b, 1.0 / static_cast<double>(b));
    double beta = -1.0;
    CHECK(full_sort(rerank(sims, uniform, bins, cfg, &beta)) == full_sort(sims));
    CHECK(beta == 0.0);

    const auto probs = random_probs(b, rng, 2.0);
    const auto scores = rerank(sims, probs, bins, cfg, &beta);
    const double h = entropy(probs);
    const double beta_oracle = std::clamp(1.0 - h / std::log(static_cast<double>(b)), 0.0, 1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double oracle = sims[i] / 0.07 + beta_oracle * std::log(std::max(probs[static_cast<std::size_t>(bins[i])], 1e-12));
      worst = std::max(worst, std::abs(oracle - scores[i]));
    }
    CHECK(worst < 1e-12);
  }

  // One-hot classifier on class 2: class-2 rows lead regardless of cosine.
  const std::vector<double> sims{0.9, 0.1, -0.5, 0.8, 0.2};
  const std::vector<int> bins{0, 2, 2, 1, 0};
  const std::vector<double> onehot{0.0, 0.0, 1.0};
  const auto order = full_sort(rerank(sims, onehot, bins, cfg));
  CHECK(order[0] == 1);
  CHECK(order[1] == 2);
  const auto s = rerank(sims, onehot, bins, cfg);
  CHECK(s[0] - s[1] == doctest::Approx((0.9 - 0.1) / 0.07 + std::log(1e-12)).epsilon(1e-12));

  CHECK_THROWS_AS(rerank(sims, onehot, std::vector<int>{0, 1, 2, 3, 0}, cfg), ContractError);
  CHECK_THROWS_AS(rerank(sims, onehot, std::vector<int>{0, 1}, cfg), DimensionError);
  CHECK(rerank(sims, {}, bins, cfg)[0] == doctest::Approx(0.9 / 0.07));
}

TEST_CASE("retrieval config JSON") {
  RetrievalConfig c;
  c.time.beta_max = 3.0;
  c.rerank = false;
  nlohmann::json j = c;
  const auto back = j.get<RetrievalConfig>();
  CHECK(back.time.beta_max == 3.0);
  CHECK_FALSE(back.rerank);
  j["geo"]["nope"] = 1;
  CHECK_THROWS_AS(j.get<RetrievalConfig>(), ConfigError);
  RetrievalConfig bad;
  bad.geo.psi = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

namespace {

ModelConfig task_model_cfg() {
  ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.n_freq = 4;
  c.img_feat_dim = 8;
  return c;
}

}  // namespace

TEST_CASE("task galleries and uniform-head reductions") {
  const ModelConfig cfg = task_model_cfg();
  ModelParams p = init_params(cfg, 5);
  p.geo_w2.fill(0.0);
  p.geo_b2.fill(0.0);
  p.timeh_w2.fill(0.0);
  p.timeh_b2.fill(0.0);
  const Model m(cfg, p);
  std::mt19937_64 rng(6);
  const Tensor feats = test::random_matrix(6, 8, rng);
  std::vector<GeoCoord> cands;
  for (int i = 0; i < 40; ++i) cands.push_back(cell_center({8, i * 19}));
  const Gallery lg = build_location_gallery(m, cands);
  CHECK(lg.size() == 40);
  CHECK(lg.classes() == 768);
  CHECK(lg.meta(3).bin == geo_to_cell(cands[3], 8).index);

  RetrievalConfig on, off;
  off.rerank = false;
  const auto a = task_geolocalize(m, feats, lg, on);
  const auto b = task_geolocalize(m, feats, lg, off);
  const Tensor v = m.embed_images(feats);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(rows_of(a[i].result) == rows_of(b[i].result));
    CHECK(a[i].result.beta == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(rows_of(a[i].result) == rows_of(search(v.row(i), lg, 10)));
    CHECK(a[i].coord == *lg.meta(a[i].result.hits[0].row).coord);
    CHECK(geoloc_error_km(a[i].coord, cands[0]) == haversine_km(a[i].coord, cands[0]));
  }

  const Gallery tg = build_time_gallery(m);
  CHECK(tg.size() == 288);
  CHECK(tg.classes() == 288);
  for (std::size_t i = 0; i < 288; ++i) CHECK(tg.meta(i).bin == torus_to_bin(*tg.meta(i).time).flat());
  const Gallery fine = build_time_gallery(m, true);
  CHECK(fine.size() == 365 * 24);
  const auto tp = task_time_predict(m, feats, tg, on);
  const auto tp_off = task_time_predict(m, feats, tg, off);
  for (std::size_t i = 0; i < 6; ++i) CHECK(rows_of(tp[i].result) == rows_of(tp_off[i].result));

  // Conditioning on location swaps the query, the gallery is untouched.
  const std::vector<GeoCoord> where(cands.begin(), cands.begin() + 6);
  const auto cond = task_time_predict(m, feats, tg, off, std::span<const GeoCoord>(where));
  const Tensor vl = m.embed_image_location(feats, where);
  for (std::size_t i = 0; i < 6; ++i) CHECK(rows_of(cond[i].result) == rows_of(search(vl.row(i), tg, 10)));

  // Month distribution from bin scores.
  const auto sims = similarities(v.row(0), tg);
  std::vector<double> month(12, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    const double e = std::exp(sims[i] / 0.07);
    month[static_cast<std::size_t>(tg.meta(i).bin % 12)] += e;
    z += e;
  }
  double total = 0.0;
  for (double x : month) total += x / z;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(task_geolocalize(m, feats, Gallery{}, on), ContractError);
}

TEST_CASE("geo-time and compositional tasks") {
  SyntheticWorldConfig wc;
  wc.n_cameras = 12;
  wc.frames_per_camera = 12;
  wc.feature_dim = 8;
  wc.seed = 21;
  const Dataset data = generate_synthetic(wc);
  ModelConfig mc = task_model_cfg();
  TrainerConfig tc;
  tc.batch.batch_size = 32;
  tc.schedule = {3e-3, 3e-6, 20, 400};
  tc.seed = 2;
  const Model m(mc, run_training(data, mc, tc).params);

  const Gallery ig = build_image_gallery(m, data);
  CHECK(ig.size() == data.size());
  CHECK(ig.meta(0).id == data.records[0].camera_id + "#0");

  std::vector<std::vector<double>> fv;
  std::vector<TorusTime> own;
  std::vector<GeoCoord> coords;
  for (const Record& r : data.records) {
    fv.push_back(r.feature);
    own.push_back(r.torus());
    coords.push_back(r.coord);
  }
  const Tensor feats = stack_rows(fv);
  const auto res = task_geotime_retrieve(m, feats, own, ig, 5);
  std::size_t same_cam = 0, total = 0;
  for (std::size_t i = 0; i < res.size(); ++i) {
    for (const Hit& h : res[i].hits) {
      same_cam += data.records[h.row].camera_id == data.records[i].camera_id;
      ++total;
    }
  }
  MESSAGE("same-camera share in top 5: " << static_cast<double>(same_cam) / static_cast<double>(total));
  CHECK(static_cast<double>(same_cam) / static_cast<double>(total) > 0.5);
  const Tensor vt = m.embed_image_time(feats, own);
  CHECK(rows_of(res[3]) == rows_of(search(vt.row(3), ig, 5)));

  // Flipping the season changes the compositional ranking.
  std::vector<TorusTime> flipped;
  for (const auto& t : own) flipped.emplace_back(t.theta() + 0.5, t.phi());
  const auto c1 = task_compositional(m, coords, own, ig, static_cast<std::size_t>(ig.size()));
  const auto c2 = task_compositional(m, coords, flipped, ig, static_cast<std::size_t>(ig.size()));
  std::size_t changed = 0;
  for (std::size_t i = 0; i < c1.size(); ++i) changed += rows_of(c1[i]) != rows_of(c2[i]);
  CHECK(changed > 0);

  const auto none = task_compositional(m, coords, own, Gallery{}, 5);
  REQUIRE(none.size() == coords.size());
  for (const auto& r : none) CHECK(r.hits.empty());

  const nlohmann::json j = query_result_to_json(res[0], ig);
  CHECK(j["hits"].size() == 5);
}
