#include <gtest/gtest.h>

#include <set>

#include "testing.hpp"

using namespace tide;

namespace {

void expect_valid(const MatchAssignment& m, std::size_t n_pred, std::size_t n_tgt) {
  ASSERT_EQ(m.pairs.size(), n_tgt);
  std::set<std::size_t> preds, tgts;
  for (auto [p, t] : m.pairs) {
    EXPECT_LT(p, n_pred);
    EXPECT_LT(t, n_tgt);
    preds.insert(p);
    tgts.insert(t);
  }
  EXPECT_EQ(preds.size(), n_tgt);
  EXPECT_EQ(tgts.size(), n_tgt);
  EXPECT_EQ(m.unmatched.size(), n_pred - n_tgt);
  for (std::size_t u : m.unmatched) EXPECT_FALSE(preds.count(u));
}

double assigned_cost(const MatchAssignment& m, const std::vector<double>& cost, std::size_t n_tgt) {
  double c = 0;
  for (auto [p, t] : m.pairs) c += cost[p * n_tgt + t];
  return c;
}

}  // namespace

TEST(Hungarian, ThreeByThreeHandCase) {
  const std::vector<double> cost{4, 1, 3, 2, 0, 5, 3, 2, 2};
  const auto m = hungarian(cost, 3, 3);
  std::set<std::pair<std::size_t, std::size_t>> pairs(m.pairs.begin(), m.pairs.end());
  EXPECT_EQ(pairs, (std::set<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 0}, {2, 2}}));
  EXPECT_DOUBLE_EQ(m.total_cost, 5.0);
  EXPECT_DOUBLE_EQ(tide::testing::brute_force_assignment_cost(cost, 3, 3), 5.0);
}

TEST(Hungarian, SingleEntry) {
  const auto m = hungarian({-2.5}, 1, 1);
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.pairs[0], (std::pair<std::size_t, std::size_t>{0, 0}));
  EXPECT_TRUE(m.unmatched.empty());
}

TEST(Hungarian, NoTargetsLeavesEveryPredictionUnmatched) {
  const auto m = hungarian({}, 4, 0);
  EXPECT_TRUE(m.pairs.empty());
  EXPECT_EQ(m.unmatched.size(), 4u);
}

TEST(Hungarian, MatchesExhaustiveSearch) {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n_tgt = 1 + rng.below(6);
    const std::size_t n_pred = n_tgt + rng.below(7 - n_tgt);
    std::vector<double> cost(n_pred * n_tgt);
    // mix continuous costs with heavily tied integer costs
    const bool ties = trial % 3 == 0;
    for (auto& c : cost) c = ties ? static_cast<double>(rng.below(3)) : rng.uniform(-5, 5);
    const auto m = hungarian(cost, n_pred, n_tgt);
    expect_valid(m, n_pred, n_tgt);
    const double best = tide::testing::brute_force_assignment_cost(cost, n_pred, n_tgt);
    EXPECT_NEAR(assigned_cost(m, cost, n_tgt), best, 1e-9) << "trial " << trial;
    EXPECT_NEAR(m.total_cost, best, 1e-9) << "trial " << trial;
  }
}

TEST(Hungarian, PairsSortedByTarget) {
  Rng rng(2);
  std::vector<double> cost(30);
  for (auto& c : cost) c = rng.uniform();
  const auto m = hungarian(cost, 6, 5);
  for (std::size_t i = 0; i < m.pairs.size(); ++i) EXPECT_EQ(m.pairs[i].second, i);
}

TEST(Hungarian, Deterministic) {
  const std::vector<double> cost(12, 1.0);
  const auto a = hungarian(cost, 4, 3), b = hungarian(cost, 4, 3);
  EXPECT_EQ(a.pairs, b.pairs);
  EXPECT_EQ(a.unmatched, b.unmatched);
}

TEST(Hungarian, Errors) {
  EXPECT_THROW(hungarian({1.0, std::nan("")}, 2, 1), NumericError);
  EXPECT_THROW(hungarian({1.0, std::numeric_limits<double>::infinity()}, 2, 1), NumericError);
  EXPECT_THROW(hungarian({1.0, 2.0}, 1, 2), DimError);
  EXPECT_THROW(hungarian({1.0, 2.0, 3.0}, 2, 2), DimError);
}
