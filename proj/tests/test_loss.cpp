#include <gtest/gtest.h>

#include <cmath>

#include "testing.hpp"

using namespace tide;
using tide::testing::random_tensor;

namespace {

LayerPrediction prediction(const Tensor& logits, const Tensor& boxes) {
  LayerPrediction p;
  p.log_probs = log_softmax(logits, -1);
  std::vector<double> pr(p.log_probs.size());
  for (std::size_t i = 0; i < pr.size(); ++i) pr[i] = std::exp(p.log_probs[i]);
  p.probs = Tensor(p.log_probs.shape(), std::move(pr));
  p.boxes = boxes;
  return p;
}

// Logits whose softmax row is exactly `probs` (up to rounding).
Tensor logits_for(const std::vector<double>& probs, std::size_t m) {
  std::vector<double> v(probs.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(probs[i]);
  return Tensor({probs.size() / m, m}, std::move(v));
}

Target target(std::size_t pos, double cx, double cy, double w, double h) {
  return {pos, BoundingBox::center_norm(cx, cy, w, h)};
}

}  // namespace

TEST(MatchCost, PerfectPredictionCostsMinusLambdaClass) {
  const Tensor probs({1, 3}, {0.0, 1.0, 0.0});
  const Tensor boxes({1, 4}, {0.4, 0.5, 0.2, 0.3});
  LossWeights w;
  const Tensor c = match_cost(probs, boxes, {target(1, 0.4, 0.5, 0.2, 0.3)}, w);
  EXPECT_NEAR(c[0], -w.cls, 1e-15);
}

TEST(MatchCost, IdenticalPredictionsGiveIdenticalRows) {
  Rng rng(1);
  const Tensor probs({2, 3}, {0.2, 0.5, 0.3, 0.2, 0.5, 0.3});
  const Tensor boxes({2, 4}, {0.4, 0.5, 0.2, 0.3, 0.4, 0.5, 0.2, 0.3});
  const Tensor c = match_cost(probs, boxes, {target(0, 0.3, 0.3, 0.1, 0.2), target(1, 0.6, 0.6, 0.3, 0.3)}, {});
  EXPECT_EQ(c[0], c[2]);
  EXPECT_EQ(c[1], c[3]);
}

TEST(MatchCost, L1Arithmetic) {
  const Tensor probs({1, 2}, {0.5, 0.5});
  const Tensor boxes({1, 4}, {0.5, 0.5, 0.3, 0.3});
  LossWeights w;
  w.cls = 0;
  w.l1 = 1;
  w.giou = 0;
  const Tensor c = match_cost(probs, boxes, {target(0, 0.6, 0.6, 0.4, 0.4)}, w);
  EXPECT_NEAR(c[0], 0.4, 1e-12);
}

TEST(MatchCost, Errors) {
  const Tensor probs({1, 2}, {0.5, 0.5});
  const Tensor boxes({1, 4}, {0.5, 0.5, 0.3, 0.3});
  EXPECT_THROW(match_cost(probs, boxes, {target(2, 0.5, 0.5, 0.1, 0.1)}, {}), DataError);
  EXPECT_THROW(match_cost(probs, boxes, {target(1, 0.5, 0.5, 0.1, 0.1)}, {}, 1), DataError);
  EXPECT_THROW(match_cost(probs, boxes, {}, {}), DataError);
  EXPECT_THROW(hungarian(Tensor({3}, {1, 2, 3})), DimError);
}

TEST(TotalLoss, PerfectBoxesLeaveOnlyClassTerm) {
  const Tensor logits = logits_for({0.7, 0.3}, 2);
  const Tensor boxes({1, 4}, {0.4, 0.5, 0.2, 0.3});
  const Tensor loss = total_loss({prediction(logits, boxes)}, {target(0, 0.4, 0.5, 0.2, 0.3)}, 1, {});
  EXPECT_NEAR(loss.item(), -std::log(0.7), 1e-12);
}

TEST(TotalLoss, UnmatchedQueriesPayNullCrossEntropy) {
  const Tensor logits = logits_for({0.7, 0.1, 0.2, 0.25, 0.15, 0.6}, 3);
  const Tensor boxes({2, 4}, {0.4, 0.5, 0.2, 0.3, 0.9, 0.9, 0.1, 0.1});
  LossWeights w;
  w.no_object = 0.25;
  const Tensor loss = total_loss({prediction(logits, boxes)}, {target(0, 0.4, 0.5, 0.2, 0.3)}, 2, w);
  EXPECT_NEAR(loss.item(), -std::log(0.7) - 0.25 * std::log(0.6), 1e-12);
}

TEST(TotalLoss, NoTargetsIsPureNullCrossEntropy) {
  const Tensor logits = logits_for({0.7, 0.3, 0.2, 0.8, 0.5, 0.5}, 2);
  Rng rng(2);
  const Tensor boxes = random_tensor({3, 4}, rng, 0.1, 0.9, false);
  const Tensor loss = total_loss({prediction(logits, boxes)}, {}, 1, {});
  EXPECT_NEAR(loss.item(), -(std::log(0.3) + std::log(0.8) + std::log(0.5)), 1e-12);
}

TEST(TotalLoss, DoublingL1WeightDoublesPureL1Loss) {
  Rng rng(3);
  const Tensor logits = random_tensor({4, 3}, rng, -1, 1, false);
  const Tensor boxes = random_tensor({4, 4}, rng, 0.2, 0.8, false);
  const std::vector<Target> t{target(0, 0.3, 0.3, 0.2, 0.2), target(1, 0.7, 0.6, 0.3, 0.2)};
  LossWeights w;
  w.cls = 0;
  w.giou = 0;
  w.l1 = 1;
  const double a = total_loss({prediction(logits, boxes)}, t, 2, w).item();
  w.l1 = 2;
  const double b = total_loss({prediction(logits, boxes)}, t, 2, w).item();
  EXPECT_GT(a, 0.0);
  EXPECT_NEAR(b, 2 * a, 1e-12);
}

TEST(TotalLoss, InvariantToTargetOrder) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({6, 4}, rng, -2, 2, false);
    const Tensor boxes = random_tensor({6, 4}, rng, 0.2, 0.8, false);
    std::vector<Target> t;
    for (int j = 0; j < 3; ++j)
      t.push_back(target(rng.below(3), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4),
                         rng.uniform(0.1, 0.4)));
    std::vector<Target> r{t[2], t[0], t[1]};
    const double a = total_loss({prediction(logits, boxes)}, t, 3, {}).item();
    const double b = total_loss({prediction(logits, boxes)}, r, 3, {}).item();
    EXPECT_NEAR(a, b, 1e-12);
  }
}

TEST(TotalLoss, DuplicateSupportRowsAreInterchangeable) {
  // columns 0 and 1 belong to duplicated support rows, so equal probabilities
  const Tensor logits({3, 4}, {0.3, 0.3, -1.0, 0.2, 1.5, 1.5, 0.1, -0.4, -0.2, -0.2, 0.9, 0.0});
  Rng rng(5);
  const Tensor boxes = random_tensor({3, 4}, rng, 0.2, 0.8, false);
  LossWeights w;
  w.l1 = 0;
  w.giou = 0;
  const double a = total_loss({prediction(logits, boxes)}, {target(0, 0.5, 0.5, 0.2, 0.2)}, 3, w).item();
  const double b = total_loss({prediction(logits, boxes)}, {target(1, 0.5, 0.5, 0.2, 0.2)}, 3, w).item();
  EXPECT_EQ(a, b);
}

TEST(TotalLoss, AuxiliaryLayersAreAveraged) {
  Rng rng(6);
  std::vector<LayerPrediction> layers;
  for (int l = 0; l < 3; ++l)
    layers.push_back(prediction(random_tensor({4, 3}, rng, -1, 1, false), random_tensor({4, 4}, rng, 0.2, 0.8, false)));
  const std::vector<Target> t{target(0, 0.4, 0.4, 0.2, 0.3)};
  LossWeights w;
  double mean = 0;
  for (const auto& p : layers) mean += layer_loss(p, t, 2, w).loss.item() / 3.0;
  EXPECT_NEAR(total_loss(layers, t, 2, w).item(), mean, 1e-12);
  w.aux_loss = false;
  EXPECT_NEAR(total_loss(layers, t, 2, w).item(), layer_loss(layers[2], t, 2, w).loss.item(), 1e-15);
}

TEST(TotalLoss, EveryTargetMatchedOnce) {
  Rng rng(7);
  const Tensor logits = random_tensor({5, 3}, rng, -1, 1, false);
  const Tensor boxes = random_tensor({5, 4}, rng, 0.2, 0.8, false);
  const std::vector<Target> t{target(0, 0.3, 0.3, 0.2, 0.2), target(1, 0.6, 0.6, 0.2, 0.2), target(0, 0.5, 0.2, 0.1, 0.1)};
  std::vector<MatchAssignment> as;
  total_loss({prediction(logits, boxes)}, t, 2, {}, &as);
  ASSERT_EQ(as.size(), 1u);
  EXPECT_EQ(as[0].pairs.size(), 3u);
  EXPECT_EQ(as[0].unmatched.size(), 2u);
}

TEST(TotalLoss, MoreTargetsThanQueriesRaises) {
  Rng rng(8);
  const Tensor logits = random_tensor({1, 3}, rng, -1, 1, false);
  const Tensor boxes = random_tensor({1, 4}, rng, 0.2, 0.8, false);
  EXPECT_THROW(total_loss({prediction(logits, boxes)}, {target(0, 0.3, 0.3, 0.2, 0.2), target(1, 0.6, 0.6, 0.2, 0.2)},
                          2, {}),
               DataError);
}

TEST(TotalLoss, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  Tensor logits = random_tensor({5, 4}, rng, -1, 1), raw = random_tensor({5, 4}, rng, -1, 1);
  const std::vector<Target> t{target(0, 0.3, 0.35, 0.2, 0.25), target(2, 0.6, 0.55, 0.3, 0.2)};
  LossWeights w;
  w.no_object = 0.3;
  auto f = [&] {
    const Tensor boxes = sigmoid(raw);
    return total_loss({prediction(logits, boxes), prediction(scale(logits, 0.5), boxes)}, t, 3, w);
  };
  EXPECT_LT(tide::testing::gradient_error(f, {logits, raw}), 1e-3);
  EXPECT_TRUE(std::isfinite(f().item()));
}
