#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "test_util.hpp"
#include "tiger/checkpoint.hpp"
#include "tiger/model.hpp"
#include "tiger/objectives.hpp"

using namespace tiger;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

ModelConfig cfg_small() {
  ModelConfig c;
  c.d = 16;
  c.heads = 4;
  c.n_freq = 6;
  c.img_feat_dim = 12;
  c.n_tokens_v = 2;
  c.n_tokens_l = 1;
  c.n_tokens_t = 3;
  return c;
}

double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

std::vector<GeoCoord> some_coords() { return {{10, 20}, {-45, 170}, {80, -100}, {0, 0}}; }
std::vector<TorusTime> some_times() { return {{0.1, 0.2}, {0.6, 0.9}, {0.33, 0.5}, {0.99, 0.01}}; }

}  // namespace

TEST_CASE("rff features") {
  const auto z = rff_features(0.0, 0.0, 10);
  REQUIRE(z.size() == 40);
  for (std::size_t i = 0; i < z.size(); i += 4) {
    CHECK(z[i] == 0.0);
    CHECK(z[i + 1] == 1.0);
    CHECK(z[i + 2] == 0.0);
    CHECK(z[i + 3] == 1.0);
  }
  const auto a = time_features({0.3, 0.7}, 10);
  const auto b = time_features({0.3 + 1.0 - 1e-17, 0.7}, 10);
  const auto r1 = rff_features(2 * kPi * 0.3, 2 * kPi * 0.7, 10);
  const auto r2 = rff_features(2 * kPi * 1.3, 2 * kPi * 0.7, 10);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
    CHECK(r1[i] == doctest::Approx(r2[i]).scale(1.0).epsilon(1e-9));
  }
  CHECK(location_features({0, 0}, 10).size() == 40);
  const auto f = rff_features(0.5, -0.25, 3);
  CHECK(f[4] == doctest::Approx(std::sin(1.0)));
  CHECK(f[7] == doctest::Approx(std::cos(-0.5)));
}

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.d = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.n_geo_classes = 100;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  nlohmann::json j = cfg_small();
  CHECK(j.get<ModelConfig>().d == 16);
  j["bogus"] = 1;
  CHECK_THROWS_AS(j.get<ModelConfig>(), ConfigError);
}

TEST_CASE("encoders: determinism, layer-norm contract, antipodes") {
  const ModelConfig cfg = cfg_small();
  const Model m(cfg, init_params(cfg, 3));
  const auto coords = some_coords();
  const auto times = some_times();
  const Tensor l1 = m.location_tokens(coords), l2 = m.location_tokens(coords);
  CHECK(l1 == l2);
  CHECK(l1.rows() == coords.size() * 1);
  const Tensor t1 = m.time_tokens(times);
  CHECK(t1.rows() == times.size() * 3);
  // Gains are 1 and biases 0 at init, so tokens are the pre-affine LN output.
  for (const Tensor* t : {&l1, &t1}) {
    for (std::size_t i = 0; i < t->rows(); ++i) {
      double mean = 0.0, var = 0.0;
      for (double v : t->row(i)) mean += v;
      mean /= static_cast<double>(cfg.d);
      for (double v : t->row(i)) var += (v - mean) * (v - mean);
      var /= static_cast<double>(cfg.d);
      CHECK(std::abs(mean) < 1e-12);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
  const std::vector<GeoCoord> anti{{30, 40}, {-30, -140}};
  const Tensor la = m.location_tokens(anti);
  CHECK(test::max_abs_diff(Tensor::matrix(1, 16, std::vector<double>(la.row(0).begin(), la.row(0).end())),
                           Tensor::matrix(1, 16, std::vector<double>(la.row(1).begin(), la.row(1).end()))) > 1e-3);
}

TEST_CASE("image adapter") {
  const ModelConfig cfg = cfg_small();
  ModelParams p = init_params(cfg, 4);
  std::mt19937_64 rng(5);
  for (double& v : p.img_ln_b.values()) v = std::normal_distribution<double>(0, 1)(rng);
  const Model m(cfg, p);
  const Tensor zero = m.image_tokens(Tensor::matrix(1, 12, 0.0));
  for (std::size_t i = 0; i < zero.rows(); ++i)
    for (std::size_t j = 0; j < zero.cols(); ++j) CHECK(zero(i, j) == doctest::Approx(p.img_ln_b(0, j)));

  const Tensor f = test::random_matrix(3, 12, rng);
  Tensor f5 = f;
  for (double& v : f5.values()) v *= 5.0;
  CHECK(test::max_abs_diff(m.image_tokens(f), m.image_tokens(f5)) < 1e-4);
  CHECK_THROWS_AS(m.image_tokens(Tensor::matrix(1, 11)), DimensionError);

  const auto dir = test::temp_dir("model_ckpt");
  save_checkpoint(dir / "m.ckpt", cfg, p);
  const Model loaded = load_checkpoint(dir / "m.ckpt");
  ModelParams rounded = p;
  rounded.visit([](const char*, Tensor& t) { t = round_to_float(t); });
  CHECK(loaded.image_tokens(f) == Model(cfg, rounded).image_tokens(f));
  const Model again = load_checkpoint(dir / "m.ckpt");
  CHECK(again.image_tokens(f) == loaded.image_tokens(f));
  std::filesystem::remove_all(dir);
}

TEST_CASE("fusion outputs are unit vectors and averaging behaves") {
  const ModelConfig cfg = cfg_small();
  const Model m(cfg, init_params(cfg, 6));
  std::mt19937_64 rng(7);
  const Tensor f = test::random_matrix(4, 12, rng);
  const auto coords = some_coords();
  const auto times = some_times();
  for (const Tensor& e : {m.embed_images(f), m.embed_locations(coords), m.embed_times(times),
                          m.embed_image_location(f, coords), m.embed_image_time(f, times),
                          m.embed_location_time(coords, times)}) {
    REQUIRE(e.rows() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(row_norm(e.row(i)) == doctest::Approx(1.0).epsilon(1e-6));
  }

  Tape tape;
  const Tensor u = test::random_unit_rows(1, 8, rng);
  CHECK(test::max_abs_diff(fuse_average(tape.constant(u), tape.constant(u)).value(), u) < 1e-15);
  Tensor e1 = Tensor::matrix(1, 4, {1, 0, 0, 0}), e2 = Tensor::matrix(1, 4, {0, 1, 0, 0});
  const Tensor fused = fuse_average(tape.constant(e1), tape.constant(e2)).value();
  CHECK(fused(0, 0) == doctest::Approx(std::cos(kPi / 4)));
  CHECK(fused(0, 1) == doctest::Approx(std::cos(kPi / 4)));
  Tensor neg = e1;
  neg(0, 0) = -1.0;
  CHECK_THROWS_AS(fuse_average(tape.constant(e1), tape.constant(neg)), DegenerateFusionError);
}

TEST_CASE("classification heads") {
  const ModelConfig cfg = cfg_small();
  const Model m(cfg, init_params(cfg, 8));
  std::mt19937_64 rng(9);
  const Tensor v = m.embed_images(test::random_matrix(3, 12, rng));
  const Tensor g = m.classify_geo(v), t = m.classify_time(v);
  CHECK(g.cols() == 768);
  CHECK(t.cols() == 288);
  for (const Tensor* p : {&g, &t}) {
    for (std::size_t i = 0; i < p->rows(); ++i) {
      double s = 0.0;
      for (double x : p->row(i)) s += x;
      CHECK(std::abs(s - 1.0) < 1e-9);
      const double h = entropy(p->row(i));
      CHECK(h >= 0.0);
      CHECK(h <= std::log(static_cast<double>(p->cols())) + 1e-12);
    }
  }
}

TEST_CASE("no hidden state: embeddings do not depend on call order") {
  const ModelConfig cfg = cfg_small();
  const Model m(cfg, init_params(cfg, 10));
  std::mt19937_64 rng(11);
  const Tensor f = test::random_matrix(4, 12, rng);
  const Tensor before = m.embed_images(f);
  (void)m.embed_location_time(some_coords(), some_times());
  (void)m.embed_image_time(f, some_times());
  (void)m.embed_locations(some_coords());
  CHECK(m.embed_images(f) == before);

  // Per-sample results do not depend on the batch they are computed in.
  const Tensor single = m.embed_images(Tensor::matrix(1, 12, std::vector<double>(f.row(2).begin(), f.row(2).end())));
  for (std::size_t j = 0; j < 16; ++j) CHECK(single(0, j) == doctest::Approx(before(2, j)).epsilon(1e-13));
}

TEST_CASE("bimodal pooling uses each modality's own token segment") {
  const ModelConfig cfg = cfg_small();
  const ModelParams p = init_params(cfg, 12);
  std::mt19937_64 rng(13);
  const Tensor feats = test::random_matrix(2, 12, rng);
  const auto times = std::vector<TorusTime>{{0.2, 0.4}, {0.7, 0.1}};
  Tape tape;
  Forward f(tape, cfg, p, false);
  const std::size_t nv = 2, nt = 3, g = nv + nt;
  Var x = ad::concat_groups(f.adapt_images(feats), nv, f.encode_times(times), nt);
  Var out = f.block(x, g);
  const Tensor v0 = f.pool_project(out, g, 0, nv, Modality::kImage).value();
  const Tensor t0 = f.pool_project(out, g, nv, nt, Modality::kTime).value();

  // Overwrite the time rows of the block output.
  Tensor zeroed = out.value();
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t r = nv; r < g; ++r)
      for (double& v : zeroed.row(s * g + r)) v = std::normal_distribution<double>(0, 1)(rng);
  Var z = tape.constant(zeroed);
  CHECK(f.pool_project(z, g, 0, nv, Modality::kImage).value() == v0);
  CHECK(test::max_abs_diff(f.pool_project(z, g, nv, nt, Modality::kTime).value(), t0) > 1e-3);

  const BimodalEmbedding e = f.fuse(f.adapt_images(feats), Modality::kImage, f.encode_times(times), Modality::kTime);
  CHECK(e.first.value() == v0);
  CHECK(e.second.value() == t0);
  const Model m(cfg, p);
  CHECK(test::max_abs_diff(m.embed_image_time(feats, times), e.fused.value()) < 1e-14);
}

TEST_CASE("parameter names and checkpoint validation") {
  const ModelConfig cfg = cfg_small();
  const ModelParams p = init_params(cfg, 14);
  const auto named = to_named(p);
  CHECK(named.size() == 46);
  CHECK(parameter_count(p) > 0);
  CHECK(all_finite(p));
  CHECK_NOTHROW(from_named(named, cfg));
  auto missing = named;
  missing.pop_back();
  CHECK_THROWS_AS(from_named(missing, cfg), IoError);
  auto bad = named;
  bad[0].tensor = Tensor::matrix(1, 1);
  CHECK_THROWS_AS(from_named(bad, cfg), IoError);
  CHECK(init_params(cfg, 14).wq == p.wq);
  CHECK_FALSE(init_params(cfg, 15).wq == p.wq);
}
