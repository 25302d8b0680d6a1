#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "miseg/gradcheck.hpp"
#include "miseg/infomax.hpp"
#include "miseg/rng.hpp"

using namespace miseg;
using namespace miseg::infomax;

namespace {

// Test-local direct-summation oracle over the KL form, skipping zero terms.
double mi_naive(const NDArray& P) {
  const int k = P.shape()[0];
  std::vector<double> row(k, 0.0), col(k, 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      row[i] += P.at({i, j});
      col[j] += P.at({i, j});
    }
  double mi = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double v = P.at({i, j});
      if (v > 0.0) mi += v * std::log(v / (row[i] * col[j]));
    }
  return mi;
}

NDArray random_joint(Rng& rng, int k, double spikiness = 1.0) {
  NDArray p(Shape{k, k});
  double total = 0.0;
  for (int64_t i = 0; i < p.size(); ++i) {
    p[i] = std::pow(rng.uniform(1e-4, 1.0), spikiness);
    total += p[i];
  }
  for (int64_t i = 0; i < p.size(); ++i) p[i] /= total;
  return p;
}

NDArray row_stochastic(Rng& rng, int n, int k) {
  NDArray a(Shape{n, k});
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      a.at({i, j}) = rng.uniform(0.05, 1.0);
      total += a.at({i, j});
    }
    for (int j = 0; j < k; ++j) a.at({i, j}) /= total;
  }
  return a;
}

// Per-pixel softmax-like assignment [N,K,h,w].
NDArray random_pixel_assignment(Rng& rng, int n, int k, int h, int w) {
  NDArray a(Shape{n, k, h, w});
  for (int s = 0; s < n; ++s)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double total = 0.0;
        for (int c = 0; c < k; ++c) {
          a.at({s, c, i, j}) = rng.uniform(0.05, 1.0);
          total += a.at({s, c, i, j});
        }
        for (int c = 0; c < k; ++c) a.at({s, c, i, j}) /= total;
      }
  return a;
}

std::vector<std::vector<int>> permutations(int k) {
  std::vector<int> base(k);
  std::iota(base.begin(), base.end(), 0);
  std::vector<std::vector<int>> out;
  do {
    out.push_back(base);
  } while (std::next_permutation(base.begin(), base.end()));
  return out;
}

}  // namespace

TEST_CASE("estimate_joint on one-hot assignments") {
  SUBCASE("same one-hot") {
    NDArray e1(Shape{1, 2}, {1.0, 0.0});
    auto joint = estimate_joint(make_assignment(constant(e1)), make_assignment(constant(e1)));
    CHECK(joint.P.value[0] == 1.0);
    CHECK(joint.P.value[1] == 0.0);
    CHECK(joint.P.value[2] == 0.0);
    CHECK(joint.P.value[3] == 0.0);
  }
  SUBCASE("different one-hots, symmetrized") {
    NDArray e1(Shape{1, 2}, {1.0, 0.0});
    NDArray e2(Shape{1, 2}, {0.0, 1.0});
    auto joint = estimate_joint(make_assignment(constant(e1)), make_assignment(constant(e2)), true);
    CHECK(joint.P.value[0] == 0.0);
    CHECK(joint.P.value[1] == 0.5);
    CHECK(joint.P.value[2] == 0.5);
    CHECK(joint.P.value[3] == 0.0);
  }
  SUBCASE("batch averaging") {
    NDArray rows(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto joint = estimate_joint(make_assignment(constant(rows)), make_assignment(constant(rows)));
    CHECK(joint.P.value[0] == 0.5);
    CHECK(joint.P.value[1] == 0.0);
    CHECK(joint.P.value[2] == 0.0);
    CHECK(joint.P.value[3] == 0.5);
  }
  SUBCASE("rejections") {
    NDArray a(Shape{2, 2}, {1, 0, 0, 1});
    NDArray b(Shape{2, 3}, {1, 0, 0, 0, 0, 1});
    CHECK_THROWS_AS(estimate_joint(make_assignment(constant(a)), make_assignment(constant(b))),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_assignment(constant(NDArray(Shape{0, 2}))), std::invalid_argument);
  }
  SUBCASE("joint sums to one for stochastic inputs") {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
      NDArray a = row_stochastic(rng, 7, 4);
      NDArray b = row_stochastic(rng, 7, 4);
      auto joint = estimate_joint(make_assignment(constant(a)), make_assignment(constant(b)));
      double total = 0.0;
      for (int64_t i = 0; i < joint.P.size(); ++i) {
        total += joint.P.value[i];
        CHECK(joint.P.value[i] >= 0.0);
      }
      CHECK(std::fabs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("mutual information of reference joints") {
  SUBCASE("perfect correlation gives log K") {
    NDArray p(Shape{2, 2}, {0.5, 0.0, 0.0, 0.5});
    const double mi = mutual_information(JointDistribution{constant(p)}).scalar_value();
    CHECK(mi == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("independence gives zero") {
    NDArray p(Shape{2, 2}, {0.25, 0.25, 0.25, 0.25});
    const double mi = mutual_information(JointDistribution{constant(p)}).scalar_value();
    CHECK(std::fabs(mi) <= 1e-12);
  }
  SUBCASE("mixed joint matches the entropy-decomposition oracle") {
    NDArray p(Shape{2, 2}, {0.4, 0.1, 0.1, 0.4});
    const double mi = mutual_information(JointDistribution{constant(p)}).scalar_value();
    CHECK(mi == doctest::Approx(0.192745).epsilon(1e-4));
    CHECK(mi == doctest::Approx(mi_by_entropy(p)).epsilon(1e-12));
    CHECK(mi == doctest::Approx(mi_naive(p)).epsilon(1e-12));
  }
  SUBCASE("invalid joints are rejected") {
    NDArray neg(Shape{2, 2}, {0.7, -0.2, 0.3, 0.2});
    CHECK_THROWS_AS(mutual_information(JointDistribution{constant(neg)}), std::invalid_argument);
    NDArray off(Shape{2, 2}, {0.5, 0.5, 0.5, 0.5});
    CHECK_THROWS_AS(mutual_information(JointDistribution{constant(off)}), std::invalid_argument);
  }
}

TEST_CASE("KL form and entropy decomposition agree on 1000 random joints") {
  Rng rng(17);
  for (int t = 0; t < 1000; ++t) {
    const int k = 2 + static_cast<int>(rng.uniform_int(19));  // K in {2..20}
    NDArray p = random_joint(rng, k, rng.uniform() < 0.5 ? 1.0 : 3.0);
    const double kl = mutual_information(JointDistribution{constant(p)}).scalar_value();
    const double ent = mi_by_entropy(p);
    CHECK(std::fabs(kl - ent) < 1e-10);
  }
}

TEST_CASE("MI bounds and invariances") {
  Rng rng(19);
  SUBCASE("nonnegative and bounded by marginal entropies") {
    for (int t = 0; t < 1000; ++t) {
      const int k = 2 + static_cast<int>(rng.uniform_int(7));
      NDArray p = random_joint(rng, k, rng.uniform() < 0.5 ? 1.0 : 4.0);
      const double mi = mutual_information(JointDistribution{constant(p)}).scalar_value();
      double h_row = 0.0, h_col = 0.0;
      std::vector<double> row(k, 0.0), col(k, 0.0);
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          row[i] += p.at({i, j});
          col[j] += p.at({i, j});
        }
      for (int i = 0; i < k; ++i) {
        if (row[i] > 0) h_row -= row[i] * std::log(row[i]);
        if (col[i] > 0) h_col -= col[i] * std::log(col[i]);
      }
      CHECK(mi >= -1e-9);
      CHECK(mi <= std::min(h_row, h_col) + 1e-9);
      CHECK(mi <= std::log(static_cast<double>(k)) + 1e-9);
    }
  }
  SUBCASE("transpose invariance") {
    for (int t = 0; t < 200; ++t) {
      const int k = 2 + static_cast<int>(rng.uniform_int(5));
      NDArray p = random_joint(rng, k);
      NDArray pt = transpose_values(p, {1, 0});
      const double a = mutual_information(JointDistribution{constant(p)}).scalar_value();
      const double b = mutual_information(JointDistribution{constant(pt)}).scalar_value();
      CHECK(std::fabs(a - b) <= 1e-9);
    }
  }
  SUBCASE("exhaustive row/column permutation invariance for K <= 4") {
    for (int k = 2; k <= 4; ++k) {
      NDArray p = random_joint(rng, k);
      const double base = mutual_information(JointDistribution{constant(p)}).scalar_value();
      for (const auto& rperm : permutations(k)) {
        for (const auto& cperm : permutations(k)) {
          NDArray q(Shape{k, k});
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) q.at({rperm[i], cperm[j]}) = p.at({i, j});
          const double permuted = mutual_information(JointDistribution{constant(q)}).scalar_value();
          CHECK(std::fabs(permuted - base) <= 1e-9);
        }
      }
    }
  }
}

TEST_CASE("cluster merging never increases MI") {
  // Brute-force data-processing check: deterministic merges of each side.
  Rng rng(23);
  for (int t = 0; t < 200; ++t) {
    const int k = 2 + static_cast<int>(rng.uniform_int(5));  // K in {2..6}
    const int k_small = std::max<int>(1, 1 + static_cast<int>(rng.uniform_int(k - 1)));
    NDArray p = random_joint(rng, k, rng.uniform() < 0.5 ? 1.0 : 3.0);
    std::vector<int> g1(k), g2(k);
    for (int i = 0; i < k; ++i) {
      g1[i] = static_cast<int>(rng.uniform_int(k_small));
      g2[i] = static_cast<int>(rng.uniform_int(k_small));
    }
    NDArray merged(Shape{k_small, k_small});
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) merged.at({g1[i], g2[j]}) += p.at({i, j});
    CHECK(mi_by_entropy(merged) <= mi_by_entropy(p) + 1e-12);
  }
}

TEST_CASE("global MI loss") {
  SUBCASE("single head, balanced identical one-hots") {
    NDArray rows(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto a = make_assignment(constant(rows));
    const double loss = global_mi_loss({{a, a}}).scalar_value();
    CHECK(loss == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("independent uniform assignments give zero") {
    NDArray uniform(Shape{4, 2}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    auto a = make_assignment(constant(uniform));
    CHECK(std::fabs(global_mi_loss({{a, a}}).scalar_value()) <= 1e-9);
  }
  SUBCASE("two heads average") {
    NDArray diag(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
    NDArray uniform(Shape{2, 2}, {0.5, 0.5, 0.5, 0.5});
    auto strong = make_assignment(constant(diag));
    auto weak = make_assignment(constant(uniform));
    const double loss = global_mi_loss({{strong, strong}, {weak, weak}}).scalar_value();
    CHECK(loss == doctest::Approx(-0.346574).epsilon(1e-5));
  }
  SUBCASE("empty head list rejected") {
    CHECK_THROWS_AS(global_mi_loss({}), std::invalid_argument);
  }
}

TEST_CASE("local joint") {
  SUBCASE("zero offset, all pixels one-hot class 0") {
    NDArray f(Shape{1, 2, 2, 2});
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) f.at({0, 0, i, j}) = 1.0;
    auto a = make_assignment(constant(f));
    auto joint = local_joint(a, a, {0, 0});
    CHECK(joint.P.value[0] == 1.0);
    CHECK(joint.P.value[1] == 0.0);
    CHECK(joint.P.value[2] == 0.0);
    CHECK(joint.P.value[3] == 0.0);
  }
  SUBCASE("offset beyond a 1x1 map is rejected") {
    NDArray f(Shape{1, 2, 1, 1});
    f.at({0, 0, 0, 0}) = 1.0;
    auto a = make_assignment(constant(f));
    CHECK_THROWS_AS(local_joint(a, a, {0, 1}), std::invalid_argument);
  }
  SUBCASE("checkerboard one-hots at offset (0,1)") {
    // Enumerated by hand: the two valid position pairs are (class0,class1)
    // and (class1,class0), each with weight 1/2.
    NDArray f(Shape{1, 2, 2, 2});
    f.at({0, 0, 0, 0}) = 1.0;
    f.at({0, 1, 0, 1}) = 1.0;
    f.at({0, 1, 1, 0}) = 1.0;
    f.at({0, 0, 1, 1}) = 1.0;
    auto a = make_assignment(constant(f));
    auto joint = local_joint(a, a, {0, 1});
    CHECK(joint.P.value.at({0, 0}) == 0.0);
    CHECK(joint.P.value.at({0, 1}) == 0.5);
    CHECK(joint.P.value.at({1, 0}) == 0.5);
    CHECK(joint.P.value.at({1, 1}) == 0.0);
  }
  SUBCASE("joint is normalized at boundary-clipped offsets") {
    Rng rng(29);
    NDArray f = random_pixel_assignment(rng, 2, 3, 4, 5);
    auto a = make_assignment(constant(f));
    for (auto offset : std::vector<std::pair<int, int>>{{1, 1}, {-2, 0}, {0, -3}, {3, 4}}) {
      auto joint = local_joint(a, a, offset);
      double total = 0.0;
      for (int64_t i = 0; i < joint.P.size(); ++i) total += joint.P.value[i];
      CHECK(std::fabs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("local MI loss") {
  Rng rng(31);
  SUBCASE("zero-offset local loss equals global loss on flattened pixels") {
    NDArray f = random_pixel_assignment(rng, 3, 4, 5, 6);
    auto a = make_assignment(constant(f));
    LocalBlock block{a, a, DisplacementSet::make(0, {{0, 0}})};
    const double local = local_mi_loss({block}).scalar_value();

    DiffArray flat = reshape(transpose(constant(f), {0, 2, 3, 1}), {3 * 5 * 6, 4});
    auto fa = make_assignment(flat);
    const double global = global_mi_loss({{fa, fa}}).scalar_value();
    CHECK(std::fabs(local - global) < 1e-10);
  }
  SUBCASE("uniform assignments give zero loss") {
    NDArray f = NDArray::full(Shape{2, 4, 3, 3}, 0.25);
    auto a = make_assignment(constant(f));
    LocalBlock block{a, a, DisplacementSet::grid(1)};
    CHECK(std::fabs(local_mi_loss({block}).scalar_value()) <= 1e-9);
  }
  SUBCASE("two blocks average") {
    NDArray one_hot(Shape{2, 2, 1, 1});
    one_hot.at({0, 0, 0, 0}) = 1.0;
    one_hot.at({1, 1, 0, 0}) = 1.0;
    NDArray uniform = NDArray::full(Shape{2, 2, 1, 1}, 0.5);
    auto strong = make_assignment(constant(one_hot));
    auto weak = make_assignment(constant(uniform));
    LocalBlock b1{strong, strong, DisplacementSet::make(0, {{0, 0}})};
    LocalBlock b2{weak, weak, DisplacementSet::make(0, {{0, 0}})};
    CHECK(local_mi_loss({b1, b2}).scalar_value() == doctest::Approx(-0.346574).epsilon(1e-5));
  }
  SUBCASE("empty block list rejected") {
    CHECK_THROWS_AS(local_mi_loss({}), std::invalid_argument);
  }
}

TEST_CASE("consistency loss") {
  Rng rng(37);
  SUBCASE("identical outputs give zero") {
    NDArray f = random_pixel_assignment(rng, 2, 3, 4, 4);
    CHECK(consistency_loss(constant(f), constant(f)).scalar_value() == 0.0);
  }
  SUBCASE("orthogonal one-hots on a single pixel give 2") {
    NDArray a(Shape{1, 2, 1, 1}, {1.0, 0.0});
    NDArray b(Shape{1, 2, 1, 1}, {0.0, 1.0});
    CHECK(consistency_loss(constant(a), constant(b)).scalar_value() == doctest::Approx(2.0));
  }
  SUBCASE("random pair matches the naive loop") {
    NDArray a = random_pixel_assignment(rng, 2, 3, 5, 4);
    NDArray b = random_pixel_assignment(rng, 2, 3, 5, 4);
    double expected = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
          double d2 = 0.0;
          for (int c = 0; c < 3; ++c) {
            const double d = a.at({n, c, i, j}) - b.at({n, c, i, j});
            d2 += d * d;
          }
          expected += d2;
        }
    expected /= 2 * 5 * 4;
    CHECK(consistency_loss(constant(a), constant(b)).scalar_value() ==
          doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("shape mismatch rejected") {
    NDArray a(Shape{1, 2, 2, 2});
    NDArray b(Shape{1, 2, 2, 3});
    CHECK_THROWS_AS(consistency_loss(constant(a), constant(b)), std::invalid_argument);
  }
}

TEST_CASE("entropy minimization loss") {
  Rng rng(41);
  SUBCASE("one-hot everywhere gives zero") {
    NDArray f(Shape{2, 3, 2, 2});
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) f.at({n, 0, i, j}) = 1.0;
    CHECK(std::fabs(entropy_min_loss(constant(f)).scalar_value()) <= 1e-9);
  }
  SUBCASE("uniform over four classes gives log 4") {
    NDArray f = NDArray::full(Shape{1, 4, 2, 2}, 0.25);
    CHECK(entropy_min_loss(constant(f)).scalar_value() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("mixed map matches the naive loop") {
    NDArray f = random_pixel_assignment(rng, 2, 4, 3, 3);
    double expected = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int c = 0; c < 4; ++c) {
            const double v = f.at({n, c, i, j});
            expected -= v * std::log(v);
          }
    expected /= 2 * 3 * 3;
    CHECK(entropy_min_loss(constant(f)).scalar_value() ==
          doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("MI through estimate_joint is differentiable") {
  Rng rng(43);
  NDArray a = row_stochastic(rng, 8, 3);
  const double err = grad_check(
      [](Tape&, const std::vector<DiffArray>& p) {
        auto assignment = make_assignment(p[0]);
        return scale(mutual_information(estimate_joint(assignment, assignment)), -1.0);
      },
      {a}, 1e-5);
  CHECK(err < 1e-4);

  // Two independent sides.
  NDArray b = row_stochastic(rng, 8, 3);
  const double err2 = grad_check(
      [](Tape&, const std::vector<DiffArray>& p) {
        return scale(mutual_information(estimate_joint(make_assignment(p[0]), make_assignment(p[1]))),
                     -1.0);
      },
      {a, b}, 1e-5);
  CHECK(err2 < 1e-4);
}

TEST_CASE("local MI loss is differentiable") {
  Rng rng(47);
  NDArray f = random_pixel_assignment(rng, 2, 3, 3, 3);
  const double err = grad_check(
      [](Tape&, const std::vector<DiffArray>& p) {
        auto a = make_assignment(p[0]);
        return local_mi_loss({LocalBlock{a, a, DisplacementSet::grid(1)}});
      },
      {f}, 1e-5);
  CHECK(err < 1e-4);
}
