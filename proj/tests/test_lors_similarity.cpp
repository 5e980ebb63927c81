#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "lors/lors_similarity.hpp"
#include "test_support.hpp"

using namespace lors;
using lors::testing::rel_err;

namespace {

LorsParams random_lors(std::size_t n, std::size_t r, Rng& rng) {
  LorsParams p{Tensor::normal(n, 1, rng), Tensor::normal(n, r, rng), Tensor::normal(n, r, rng), rng.uniform(0.1, 3.0),
               r};
  p.validate();
  return p;
}

// Exhaustive search for the largest N' <= pairs with (pairs - N') * pair_size >= N' (2r + 1).
std::uint64_t budget_by_search(std::uint64_t pairs, std::uint64_t pair_size, std::uint64_t r) {
  for (std::uint64_t n = pairs; n > 0; --n) {
    if ((pairs - n) * pair_size >= n * (2 * r + 1)) return n;
  }
  return 0;
}

}  // namespace

TEST_CASE("initial similarity is the identity", "[lors]") {
  for (std::uint64_t seed : {0ULL, 1ULL, 77ULL}) {
    for (std::size_t n : {1, 3, 12}) {
      for (std::size_t r = 1; r <= n; r += 2) {
        const auto p = init_lors(n, r, 1.0, seed);
        CHECK(compose(p) == Tensor::identity(n));
        CHECK(Similarity(p).compose() == Tensor::identity(n));
      }
    }
  }
  CHECK(init_lors(5, 2, 1.0, 3).left == init_lors(5, 2, 1.0, 3).left);
  CHECK(init_lors(5, 2, 1.0, 3).left != init_lors(5, 2, 1.0, 4).left);
  CHECK(init_lors(3, 1, 1.0, 0).learnable_count() == 9);
  CHECK_THROWS_AS(init_lors(3, 4, 1.0, 0), ConfigError);
  CHECK_THROWS_AS(init_lors(3, 0, 1.0, 0), ConfigError);
  CHECK_THROWS_AS(init_lors(3, 1, 0.0, 0), ConfigError);
}

TEST_CASE("compose example", "[lors]") {
  const LorsParams p{Tensor::ones(2, 1), Tensor::column_vector({1, 2}), Tensor::column_vector({3, 4}), 0.5, 1};
  CHECK(compose(p) == Tensor::from_rows({{2.5, 2.0}, {3.0, 5.0}}));
  const std::vector<std::size_t> rows{1}, cols{0, 1};
  CHECK(compose(p, rows, cols) == Tensor::from_rows({{3.0, 5.0}}));
  const std::vector<std::size_t> bad{2};
  CHECK_THROWS_AS(compose(p, bad, cols), ShapeError);
  CHECK_THROWS_AS(compose(p, rows, bad), ShapeError);
}

TEST_CASE("compose matches per-entry evaluation", "[lors]") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(10);
    const std::size_t r = 1 + rng.index(n);
    const auto p = random_lors(n, r, rng);
    const auto rows = rng.sample_without_replacement(n, 1 + rng.index(n));
    const auto cols = rng.sample_without_replacement(n, 1 + rng.index(n));
    const Tensor s = compose(p, rows, cols);
    for (std::size_t a = 0; a < rows.size(); ++a) {
      for (std::size_t b = 0; b < cols.size(); ++b) {
        double naive = rows[a] == cols[b] ? p.omega(rows[a], 0) : 0.0;
        for (std::size_t k = 0; k < r; ++k) naive += p.alpha / r * p.left(rows[a], k) * p.right(cols[b], k);
        CHECK(std::abs(s(a, b) - naive) <= 1e-12);
      }
    }
  }
}

TEST_CASE("compose is linear in each factor", "[lors]") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.index(8);
    const std::size_t r = 1 + rng.index(n);
    const auto p = random_lors(n, r, rng);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    auto check_factor = [&](Tensor LorsParams::*field) {
      LorsParams p1 = p, p2 = p, mix = p, zero = p;
      p1.*field = Tensor::normal((p.*field).rows(), (p.*field).cols(), rng);
      p2.*field = Tensor::normal((p.*field).rows(), (p.*field).cols(), rng);
      mix.*field = lors::testing::axpy(Tensor((p.*field).rows(), (p.*field).cols()), a, p1.*field);
      mix.*field = lors::testing::axpy(mix.*field, b, p2.*field);
      zero.*field = Tensor((p.*field).rows(), (p.*field).cols());
      // compose(a x1 + b x2) - compose(0) = a (compose(x1) - compose(0)) + b (compose(x2) - compose(0))
      const Tensor s0 = compose(zero), s1 = compose(p1), s2 = compose(p2), sm = compose(mix);
      double worst = 0.0;
      for (std::size_t k = 0; k < sm.size(); ++k) {
        worst = std::max(worst, std::abs((sm[k] - s0[k]) - a * (s1[k] - s0[k]) - b * (s2[k] - s0[k])));
      }
      CHECK(worst <= 1e-12);
    };
    check_factor(&LorsParams::omega);
    check_factor(&LorsParams::left);
    check_factor(&LorsParams::right);
  }
}

TEST_CASE("graph compose gradients match finite differences", "[lors][fd]") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(6);
    const std::size_t r = 1 + rng.index(n);
    const auto p = random_lors(n, r, rng);
    const auto rows = rng.sample_without_replacement(n, 1 + rng.index(n));
    const auto cols = rng.sample_without_replacement(n, 1 + rng.index(n));
    const Tensor probe = Tensor::normal(rows.size(), cols.size(), rng);

    Graph g;
    Var omega = g.input("omega", p.omega);
    Var left = g.input("left", p.left);
    Var right = g.input("right", p.right);
    Var s = compose(g, omega, left, right, p.alpha, r, rows, cols);
    CHECK(rel_err(g.value(s), compose(p, rows, cols)) <= 1e-14);
    // a nonlinear scalar of the composed block
    Var f = g.sum(g.mul(g.tanh(s), g.constant(probe)));
    g.backward(f);

    const std::pair<std::string, const Tensor*> fields[] = {
        {"omega", &p.omega}, {"left", &p.left}, {"right", &p.right}};
    const auto grads = g.input_gradients();
    for (const auto& [name, value] : fields) {
      const Tensor d = Tensor::normal(value->rows(), value->cols(), rng);
      const double analytic = lors::testing::inner(grads.at(name), d);
      const double numeric = lors::testing::directional_fd(
          [&](const Tensor& t) { return lors::testing::replay(g, name, t, f); }, *value, d);
      g.forward({{name, *value}});
      CHECK(rel_err(analytic, numeric) <= lors::testing::kFdTolerance);
    }
  }
}

TEST_CASE("residual rank is bounded by r", "[lors]") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 3 + rng.index(10);
    const std::size_t r = 1 + rng.index(n);
    const auto p = random_lors(n, r, rng);
    const Tensor s = compose(p);
    Eigen::MatrixXd residual(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) residual(i, j) = s(i, j) - (i == j ? p.omega(i, 0) : 0.0);
    }
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(residual).singularValues();
    for (Eigen::Index k = static_cast<Eigen::Index>(r); k < sv.size(); ++k) CHECK(sv(k) <= 1e-9 * sv(0));
  }
}

TEST_CASE("parameter counts", "[lors]") {
  CHECK(param_count(499, 150) == 150199);
  CHECK(param_count(100, 10) == 2100);
  CHECK(param_count(1, 1) == 3);
}

TEST_CASE("pair budget reduction", "[lors]") {
  CHECK(pair_budget_reduction(500, 3 * 224 * 224, 768, 150) == 499);
  CHECK(pair_budget_reduction(100, 32, 32, 1) == budget_by_search(100, 64, 1));
  CHECK_THROWS_AS(pair_budget_reduction(2, 4, 4, 1000), ConfigError);
  CHECK_THROWS_AS(pair_budget_reduction(0, 4, 4, 1), ConfigError);

  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::uint64_t pairs = 1 + rng.index(600);
    const std::uint64_t dx = 1 + rng.index(300), dy = 1 + rng.index(300);
    const std::uint64_t r = 1 + rng.index(40);
    const std::uint64_t expected = budget_by_search(pairs, dx + dy, r);
    if (expected == 0 || expected < r) {
      CHECK_THROWS_AS(pair_budget_reduction(pairs, dx, dy, r), ConfigError);
    } else {
      CHECK(pair_budget_reduction(pairs, dx, dy, r) == expected);
    }
  }
}

TEST_CASE("similarity variants", "[lors]") {
  const Similarity id(IdentitySim{3});
  CHECK(id.kind() == Similarity::Kind::Identity);
  CHECK(id.compose() == Tensor::identity(3));
  const Similarity full(FullSimParams{Tensor::from_rows({{1, 2}, {3, 4}})});
  const std::vector<std::size_t> rows{1, 0}, cols{1};
  CHECK(full.compose(rows, cols) == Tensor::from_rows({{4}, {2}}));
  CHECK(to_string(full.kind()) == "full");
  CHECK_THROWS_AS(full.compose(std::vector<std::size_t>{2}, cols), ShapeError);
}
