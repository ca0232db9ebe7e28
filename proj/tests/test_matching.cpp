#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nerdd/errors.hpp"
#include "nerdd/matching.hpp"
#include "oracles.hpp"

using namespace nerdd;

namespace {

CostMatrix random_cost(std::mt19937_64& rng, int r, int c, bool integral) {
  CostMatrix m(r, c);
  std::uniform_real_distribution<double> u(0, 10);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = integral ? std::floor(u(rng)) : u(rng);
  return m;
}

double assignment_cost(const CostMatrix& c, const Assignment& a) {
  double s = 0;
  for (auto [i, j] : a.pairs) s += c(i, j);
  return s;
}

DetectionSet confident(const std::vector<CenterBox>& boxes, int queries, double eps) {
  DetectionSet d{Eigen::MatrixXd(queries, 2), Eigen::MatrixXd(queries, 4)};
  for (int i = 0; i < queries; ++i) {
    const bool real = i < static_cast<int>(boxes.size());
    d.probs(i, 0) = real ? 1 - eps : eps;
    d.probs(i, 1) = real ? eps : 1 - eps;
    const CenterBox b = real ? boxes[static_cast<std::size_t>(i)] : CenterBox{0.5, 0.5, 0.1, 0.1};
    d.boxes.row(i) << b.cx, b.cy, b.w, b.h;
  }
  return d;
}

DetectionSet random_detections(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> p(0.05, 0.95), c(0.2, 0.8), s(0.05, 0.3);
  DetectionSet d{Eigen::MatrixXd(n, 2), Eigen::MatrixXd(n, 4)};
  for (int i = 0; i < n; ++i) {
    d.probs(i, 0) = p(rng);
    d.probs(i, 1) = 1 - d.probs(i, 0);
    d.boxes.row(i) << c(rng), c(rng), s(rng), s(rng);
  }
  return d;
}

std::vector<CenterBox> random_gt(std::mt19937_64& rng, int m) {
  std::uniform_real_distribution<double> c(0.25, 0.75), s(0.05, 0.3);
  std::vector<CenterBox> g;
  for (int j = 0; j < m; ++j) g.push_back({c(rng), c(rng), s(rng), s(rng)});
  return g;
}

}  // namespace

TEST_CASE("hungarian worked examples") {
  CostMatrix id = CostMatrix::Ones(4, 4) - CostMatrix::Identity(4, 4);
  auto a = hungarian(id);
  CHECK(a.cost == 0);
  CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}, {3, 3}});

  CostMatrix two(2, 2);
  two << 1, 2, 2, 1;
  auto b = hungarian(two);
  CHECK(b.cost == 2);
  CHECK(b.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});

  CHECK(hungarian(CostMatrix(0, 0)).pairs.empty());
  CHECK(hungarian(CostMatrix(3, 0)).pairs.empty());
}

TEST_CASE("hungarian equals exhaustive search up to 7x7") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 400; ++trial) {
    const int r = 1 + static_cast<int>(rng() % 7), c = 1 + static_cast<int>(rng() % 7);
    auto m = random_cost(rng, r, c, trial % 2 == 0);
    auto a = hungarian(m);
    REQUIRE(a.pairs.size() == static_cast<std::size_t>(std::min(r, c)));
    CHECK(a.cost == doctest::Approx(oracle::min_assignment_cost(m)).epsilon(1e-12));
    CHECK(assignment_cost(m, a) == doctest::Approx(a.cost).epsilon(1e-12));
    std::vector<int> rows, cols;
    for (auto [i, j] : a.pairs) {
      rows.push_back(i);
      cols.push_back(j);
    }
    CHECK(std::is_sorted(rows.begin(), rows.end()));
    CHECK(std::adjacent_find(rows.begin(), rows.end()) == rows.end());
    std::sort(cols.begin(), cols.end());
    CHECK(std::adjacent_find(cols.begin(), cols.end()) == cols.end());
  }
}

TEST_CASE("ties resolve to the lexicographically smallest pair list") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 300; ++trial) {
    const int r = 1 + static_cast<int>(rng() % 5), c = 1 + static_cast<int>(rng() % 5);
    CostMatrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(rng() % 3);
    auto h = hungarian(m);
    auto b = brute_force_assignment(m);
    REQUIRE(h.pairs == b.pairs);
  }
}

TEST_CASE("adding a constant to a row or column keeps the optimal assignment") {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 5);
    auto m = random_cost(rng, n, n, false);
    auto base = hungarian(m);
    auto shifted = m;
    const int row = static_cast<int>(rng() % static_cast<unsigned>(n));
    shifted.row(row).array() += 3.25;
    auto a = hungarian(shifted);
    CHECK(a.pairs == base.pairs);
    CHECK(a.cost == doctest::Approx(base.cost + 3.25));
    auto col_shifted = m;
    col_shifted.col(row).array() -= 1.5;
    CHECK(hungarian(col_shifted).pairs == base.pairs);
  }
}

TEST_CASE("hungarian rejects NaN") {
  CostMatrix m = CostMatrix::Zero(2, 2);
  m(1, 0) = NAN;
  CHECK_THROWS_AS(hungarian(m), NumericError);
}

TEST_CASE("match cost entries") {
  std::vector<CenterBox> gt{{0.5, 0.5, 0.2, 0.2}};
  SUBCASE("exact box with certain drone costs -1") {
    auto d = confident(gt, 1, 0.0);
    auto c = match_cost(d, gt);
    CHECK(c(0, 0) == doctest::Approx(-1.0));
  }
  SUBCASE("zero drone probability and a disjoint box is positive") {
    DetectionSet d{Eigen::MatrixXd(1, 2), Eigen::MatrixXd(1, 4)};
    d.probs << 0.0, 1.0;
    d.boxes << 0.1, 0.1, 0.1, 0.1;
    std::vector<CenterBox> far{{0.9, 0.9, 0.1, 0.1}};
    CHECK(match_cost(d, far)(0, 0) > 0);
  }
  SUBCASE("no ground truth gives an empty matrix") {
    auto d = confident(gt, 3, 0.1);
    auto c = match_cost(d, std::vector<CenterBox>{});
    CHECK(c.rows() == 3);
    CHECK(c.cols() == 0);
  }
  SUBCASE("unnormalized ground truth") {
    auto d = confident(gt, 1, 0.1);
    std::vector<CenterBox> bad{{1.5, 0.5, 0.2, 0.2}};
    CHECK_THROWS_AS(match_cost(d, bad), InputError);
  }
}

TEST_CASE("set loss limits and comparisons") {
  std::vector<CenterBox> gt{{0.3, 0.3, 0.2, 0.2}, {0.7, 0.6, 0.1, 0.3}};
  SUBCASE("perfect predictions approach zero and beat a swapped assignment") {
    double prev = INFINITY;
    for (double eps : {1e-2, 1e-4, 1e-8}) {
      auto d = confident(gt, 5, eps);
      Assignment right{{{0, 0}, {1, 1}}, 0};
      Assignment swapped{{{0, 1}, {1, 0}}, 0};
      const double good = set_loss(d, gt, right).value;
      CHECK(good < set_loss(d, gt, swapped).value);
      CHECK(good < prev);
      prev = good;
    }
    CHECK(prev < 1e-6);
  }
  SUBCASE("empty scene with confident no-object queries") {
    auto d = confident({}, 5, 1e-9);
    CHECK(set_loss(d, std::vector<CenterBox>{}, Assignment{}).value < 1e-8);
  }
  SUBCASE("contract violations") {
    auto d = confident(gt, 3, 0.1);
    CHECK_THROWS_AS(set_loss(d, gt, Assignment{{{0, 0}}, 0}), ContractError);
    CHECK_THROWS_AS(set_loss(d, gt, Assignment{{{0, 0}, {0, 1}}, 0}), ContractError);
    CHECK_THROWS_AS(set_loss(d, gt, Assignment{{{0, 0}, {7, 1}}, 0}), ContractError);
  }
}

TEST_CASE("matched assignment has the lowest total matching cost") {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 100; ++trial) {
    const int nq = 3 + static_cast<int>(rng() % 3);
    const int m = 1 + static_cast<int>(rng() % 3);
    auto d = random_detections(rng, nq);
    auto gt = random_gt(rng, m);
    const CostMatrix cost = match_cost(d, gt);
    Assignment best;
    matched_set_loss(d, gt, {}, &best);
    REQUIRE(best.pairs.size() == static_cast<std::size_t>(m));
    const double chosen = assignment_cost(cost, best);
    std::vector<int> perm(static_cast<std::size_t>(nq));
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double other = 0;
      for (int j = 0; j < m; ++j) other += cost(perm[static_cast<std::size_t>(j)], j);
      REQUIRE(chosen <= other + 1e-12);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST_CASE("set loss is covariant under query permutation") {
  std::mt19937_64 rng(35);
  for (int trial = 0; trial < 50; ++trial) {
    auto d = random_detections(rng, 5);
    auto gt = random_gt(rng, 2);
    Assignment a;
    matched_set_loss(d, gt, {}, &a);
    std::vector<int> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    DetectionSet p{d.probs, d.boxes};
    for (int i = 0; i < 5; ++i) {
      p.probs.row(perm[static_cast<std::size_t>(i)]) = d.probs.row(i);
      p.boxes.row(perm[static_cast<std::size_t>(i)]) = d.boxes.row(i);
    }
    Assignment pa;
    for (auto [i, j] : a.pairs) pa.pairs.push_back({perm[static_cast<std::size_t>(i)], j});
    std::sort(pa.pairs.begin(), pa.pairs.end());
    CHECK(set_loss(p, gt, pa).value == doctest::Approx(set_loss(d, gt, a).value).epsilon(1e-12));
  }
}

TEST_CASE("set loss gradients against central differences") {
  std::mt19937_64 rng(36);
  for (int trial = 0; trial < 20; ++trial) {
    auto d = random_detections(rng, 5);
    auto gt = random_gt(rng, 2);
    Assignment a;
    auto base = matched_set_loss(d, gt, {}, &a);
    const double h = 1e-6;
    auto check = [&](Eigen::MatrixXd DetectionSet::*field, const Eigen::MatrixXd& analytic) {
      for (Eigen::Index k = 0; k < analytic.size(); ++k) {
        DetectionSet plus = d, minus = d;
        (plus.*field).data()[k] += h;
        (minus.*field).data()[k] -= h;
        const double num = (set_loss(plus, gt, a).value - set_loss(minus, gt, a).value) / (2 * h);
        const double an = analytic.data()[k];
        const double rel = std::abs(an - num) / std::max({std::abs(an), std::abs(num), 1e-6});
        CHECK(rel < 1e-4);
      }
    };
    check(&DetectionSet::probs, base.d_probs);
    check(&DetectionSet::boxes, base.d_boxes);
  }
}
