#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "miseg/network.hpp"
#include "miseg/transforms.hpp"

using namespace miseg;
using namespace miseg::net;

namespace {

SegNetConfig small_cfg() {
  SegNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.classes = 3;
  cfg.clusters = 4;
  cfg.heads_per_site = 2;
  cfg.local_sites = {"dec1", "dec0"};
  return cfg;
}

NDArray random_input(Rng& rng, int n, int extent) {
  NDArray x(Shape{n, 1, extent, extent});
  for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.0, 1.0);
  return x;
}

}  // namespace

TEST_CASE("init is deterministic given the seed") {
  SegNetConfig cfg = small_cfg();
  Rng r1(5), r2(5);
  NetworkParams a = init_params(r1, cfg);
  NetworkParams b = init_params(r2, cfg);
  REQUIRE(a.arrays.size() == b.arrays.size());
  for (const auto& [name, arr] : a.arrays) {
    const NDArray& other = b.arrays.at(name);
    for (int64_t i = 0; i < arr.size(); ++i) CHECK(arr[i] == other[i]);
  }
}

TEST_CASE("weight scale tracks fan-in") {
  SegNetConfig cfg;
  cfg.depth = 3;
  cfg.base_channels = 8;
  Rng rng(7);
  NetworkParams p = init_params(rng, cfg);
  // Largest layer: bottleneck conv2 is [64,64,3,3], fan-in 576.
  const NDArray& w = p.arrays.at("bottleneck/conv2/w");
  const int fan_in = w.shape()[1] * w.shape()[2] * w.shape()[3];
  double sq = 0.0;
  for (int64_t i = 0; i < w.size(); ++i) sq += w[i] * w[i];
  const double stddev = std::sqrt(sq / static_cast<double>(w.size()));
  const double expected = 1.0 / std::sqrt(static_cast<double>(fan_in));
  CHECK(stddev > 0.8 * expected);
  CHECK(stddev < 1.2 * expected);
}

TEST_CASE("forward shape contract at depth 3") {
  SegNetConfig cfg;
  cfg.depth = 3;
  cfg.base_channels = 8;
  cfg.classes = 3;
  Rng rng(11);
  NetworkParams p = init_params(rng, cfg);
  NDArray x = random_input(rng, 2, 32);
  ForwardResult out = forward(bind(nullptr, p), cfg, constant(x));
  CHECK(out.probs.shape() == Shape{2, 3, 32, 32});
  CHECK(out.embeddings.at("bottleneck").shape() == Shape{2, 64, 4, 4});
  // Decoder block b has extent H / 2^b.
  CHECK(out.embeddings.at("dec2").shape() == Shape{2, 32, 8, 8});
  CHECK(out.embeddings.at("dec1").shape() == Shape{2, 16, 16, 16});
  CHECK(out.embeddings.at("dec0").shape() == Shape{2, 8, 32, 32});
}

TEST_CASE("probabilities are simplex points at every pixel") {
  SegNetConfig cfg = small_cfg();
  Rng rng(13);
  NetworkParams p = init_params(rng, cfg);
  NDArray x = random_input(rng, 2, 8);
  ForwardResult out = forward(bind(nullptr, p), cfg, constant(x));
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        double total = 0.0;
        for (int c = 0; c < cfg.classes; ++c) {
          const double v = out.probs.value.at({n, c, i, j});
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::fabs(total - 1.0) <= 1e-9);
      }
}

TEST_CASE("indivisible extent is rejected") {
  SegNetConfig cfg = small_cfg();
  Rng rng(17);
  NetworkParams p = init_params(rng, cfg);
  NDArray x = random_input(rng, 1, 6);  // 6 is not divisible by 4
  CHECK_THROWS_AS(forward(bind(nullptr, p), cfg, constant(x)), std::invalid_argument);
}

TEST_CASE("forward is deterministic") {
  SegNetConfig cfg = small_cfg();
  Rng rng(19);
  NetworkParams p = init_params(rng, cfg);
  NDArray x = random_input(rng, 1, 8);
  ForwardResult a = forward(bind(nullptr, p), cfg, constant(x));
  ForwardResult b = forward(bind(nullptr, p), cfg, constant(x));
  for (int64_t i = 0; i < a.probs.size(); ++i) CHECK(a.probs.value[i] == b.probs.value[i]);
}

TEST_CASE("projector heads") {
  SegNetConfig cfg = small_cfg();
  Rng rng(23);
  NetworkParams p = init_params(rng, cfg);
  NDArray x = random_input(rng, 2, 8);
  BoundParams bound = bind(nullptr, p);
  ForwardResult out = forward(bound, cfg, constant(x));

  SUBCASE("global head maps [N,C',h,w] to [N,K]") {
    ProjectorHead head{"bottleneck", HeadKind::global, 0};
    auto a = project(bound, cfg, head, "bottleneck", out.embeddings.at("bottleneck"));
    CHECK(a.probs.shape() == Shape{2, cfg.clusters});
  }

  SUBCASE("local head preserves the spatial extent") {
    ProjectorHead head{"dec0", HeadKind::local, 1};
    auto a = project(bound, cfg, head, "dec0", out.embeddings.at("dec0"));
    CHECK(a.probs.shape() == Shape{2, cfg.clusters, 8, 8});
  }

  SUBCASE("zero weights give the uniform assignment") {
    NetworkParams zeroed = p;
    zeroed.arrays.at("proj/bottleneck/0/w") = NDArray(Shape{cfg.base_channels << cfg.depth, cfg.clusters});
    BoundParams zb = bind(nullptr, zeroed);
    ForwardResult o = forward(zb, cfg, constant(x));
    ProjectorHead head{"bottleneck", HeadKind::global, 0};
    auto a = project(zb, cfg, head, "bottleneck", o.embeddings.at("bottleneck"));
    for (int64_t i = 0; i < a.probs.size(); ++i)
      CHECK(a.probs.value[i] == doctest::Approx(1.0 / cfg.clusters).epsilon(1e-12));
  }

  SUBCASE("site mismatch is rejected") {
    ProjectorHead head{"dec0", HeadKind::local, 0};
    CHECK_THROWS_AS(project(bound, cfg, head, "dec1", out.embeddings.at("dec1")),
                    std::invalid_argument);
  }

  SUBCASE("local head commutes with hflip of the embedding") {
    ProjectorHead head{"dec0", HeadKind::local, 0};
    const DiffArray& emb = out.embeddings.at("dec0");
    auto flipped_then_projected =
        project(bound, cfg, head, "dec0", transforms::apply(transforms::TransformSpec::hflip(), emb));
    auto projected_then_flipped = transforms::apply(transforms::TransformSpec::hflip(),
                                                    project(bound, cfg, head, "dec0", emb).probs);
    for (int64_t i = 0; i < projected_then_flipped.size(); ++i)
      CHECK(flipped_then_projected.probs.value[i] == projected_then_flipped.value[i]);
  }
}

TEST_CASE("EMA updates") {
  SegNetConfig cfg = small_cfg();
  Rng rng(29);
  NetworkParams student = init_params(rng, cfg);
  Rng rng2(31);
  NetworkParams teacher = init_params(rng2, cfg);

  SUBCASE("decay 0 copies the student") {
    NetworkParams t = teacher;
    ema_update(t, student, 0.0);
    for (const auto& [name, arr] : t.arrays) {
      const NDArray& s = student.arrays.at(name);
      for (int64_t i = 0; i < arr.size(); ++i) CHECK(arr[i] == s[i]);
    }
  }

  SUBCASE("decay 1-1e-16 leaves the teacher unchanged to machine precision") {
    NetworkParams t = teacher;
    ema_update(t, student, 1.0 - 1e-16);
    for (const auto& [name, arr] : t.arrays) {
      const NDArray& orig = teacher.arrays.at(name);
      for (int64_t i = 0; i < arr.size(); ++i) CHECK(arr[i] == doctest::Approx(orig[i]).epsilon(1e-15));
    }
  }

  SUBCASE("repeated updates converge geometrically to a constant student") {
    NetworkParams t = teacher;
    const double decay = 0.9;
    const int steps = 200;
    for (int i = 0; i < steps; ++i) ema_update(t, student, decay);
    // Closed form: teacher_n = d^n * teacher_0 + (1 - d^n) * student.
    const double dn = std::pow(decay, steps);
    const std::string name = "enc0/conv1/w";
    const NDArray& got = t.arrays.at(name);
    const NDArray& t0 = teacher.arrays.at(name);
    const NDArray& s = student.arrays.at(name);
    for (int64_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(dn * t0[i] + (1.0 - dn) * s[i]).epsilon(1e-9));
  }

  SUBCASE("shape mismatch is rejected") {
    SegNetConfig other = cfg;
    other.base_channels = 8;
    Rng r(1);
    NetworkParams bigger = init_params(r, other);
    CHECK_THROWS_AS(ema_update(bigger, student, 0.5), std::invalid_argument);
  }
}

TEST_CASE("checkpoint round trip") {
  SegNetConfig cfg = small_cfg();
  Rng rng(37);
  NetworkParams p = init_params(rng, cfg);
  const std::string path = "test_ckpt_roundtrip.bin";
  save_checkpoint(path, p, R"({"epoch":3})");

  std::string meta;
  NetworkParams loaded = load_checkpoint(path, &meta);
  CHECK(meta.find("\"epoch\":3") != std::string::npos);
  REQUIRE(loaded.arrays.size() == p.arrays.size());
  for (const auto& [name, arr] : p.arrays) {
    const NDArray& other = loaded.arrays.at(name);
    REQUIRE(other.shape() == arr.shape());
    for (int64_t i = 0; i < arr.size(); ++i) CHECK(arr[i] == other[i]);
  }
  std::remove(path.c_str());
}
