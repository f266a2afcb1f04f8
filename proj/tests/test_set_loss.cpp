#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "txt/set_loss.hpp"

using namespace txt;
using testing_util::random_tensor;
using testing_util::values;

namespace {

DetectionSet make_set(Tensor logits, Tensor boxes, ClassLossKind kind) {
  DetectionSet d;
  d.class_logits = std::move(logits);
  d.boxes = std::move(boxes);
  d.confidence = detection_confidence(d.class_logits, kind);
  d.features = Tensor({d.boxes.dim(0), 2});
  d.loss = kind;
  return d;
}

double bce(double p, int t) { return t ? -std::log(p) : -std::log(1.0 - p); }

}  // namespace

TEST(Hungarian, IdentityFavouringCost) {
  CostMatrix c = CostMatrix::Ones(4, 4) - CostMatrix::Identity(4, 4);
  const MatchAssignment m = hungarian_match(c);
  ASSERT_EQ(m.pairs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(m.pairs[i], std::make_pair(i, i));
  EXPECT_EQ(m.total_cost, 0.0);
}

TEST(Hungarian, MatchesExhaustiveMinimumOnRectangularInstances) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    CostMatrix c(3, 5);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(-2, 5);
    const MatchAssignment m = hungarian_match(c);
    EXPECT_EQ(m.total_cost, oracle::brute_force_assignment(c)) << "seed " << seed;
    std::vector<bool> used(5, false);
    for (const auto& [g, q] : m.pairs) {
      EXPECT_FALSE(used[q]);
      used[q] = true;
    }
  }
}

TEST(Hungarian, ConstantShiftKeepsAssignment) {
  Rng rng(7);
  CostMatrix c(3, 4);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(0, 1);
  const MatchAssignment a = hungarian_match(c);
  const MatchAssignment b = hungarian_match((c.array() + 2.5).matrix());
  EXPECT_EQ(a.pairs, b.pairs);
  EXPECT_NEAR(b.total_cost, a.total_cost + 3 * 2.5, 1e-12);
}

TEST(Hungarian, Contracts) {
  EXPECT_THROW(hungarian_match(CostMatrix::Zero(3, 2)), ContractError);
  CostMatrix c = CostMatrix::Zero(2, 2);
  c(0, 1) = std::nan("");
  EXPECT_THROW(hungarian_match(c), ContractError);
  EXPECT_TRUE(hungarian_match(CostMatrix::Zero(0, 4)).pairs.empty());
}

TEST(Giou, ReferenceValues) {
  EXPECT_DOUBLE_EQ(giou(Box(0, 0, 1, 1), Box(0, 0, 1, 1)), 1.0);
  EXPECT_DOUBLE_EQ(giou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)), 0.0);
  EXPECT_NEAR(giou(Box(0, 0, 1, 1), Box(2, 0, 3, 1)), -1.0 / 3.0, 1e-15);
  EXPECT_NEAR(box_iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)), 1.0 / 7.0, 1e-15);
  EXPECT_THROW(giou(Box(0, 0, 0, 1), Box(0, 0, 1, 1)), ContractError);
}

TEST(Giou, TensorFormAgreesAndDifferentiates) {
  Rng rng(8);
  Tensor a = random_tensor({5, 4}, rng, 0.2, 0.6), b = random_tensor({5, 4}, rng, 0.2, 0.6);
  const Tensor g = pairwise_giou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
  for (std::size_t i = 0; i < 5; ++i) {
    const Eigen::Vector4d ea(a.at(i, 0), a.at(i, 1), a.at(i, 2), a.at(i, 3));
    const Eigen::Vector4d eb(b.at(i, 0), b.at(i, 1), b.at(i, 2), b.at(i, 3));
    EXPECT_NEAR(g[i], giou(cxcywh_to_xyxy(ea), cxcywh_to_xyxy(eb)), 1e-14);
  }
  EXPECT_LT(oracle::gradient_error([&] { return sum(pairwise_giou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))); }, {a, b}),
            1e-6);
}

TEST(FocalLoss, ReducesToHalfBceAtGammaZero) {
  for (int i = 1; i < 1000; ++i) {
    const double p = i / 1000.0;
    for (int t : {0, 1}) EXPECT_NEAR(focal_loss(p, t, 0.5, 0.0), 0.5 * bce(p, t), 1e-12);
  }
}

TEST(FocalLoss, ConfidentCorrectVanishes) { EXPECT_LT(focal_loss(1.0 - 1e-9, 1, 0.25, 2.0), 1e-20); }

TEST(FocalLoss, ReferenceValue) {
  EXPECT_NEAR(focal_loss(0.5, 1, 0.25, 2.0), 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(0.5, 1, 0.25, 2.0), 0.04332, 5e-6);
}

TEST(FocalLoss, SigmoidFormMatchesScalarFormAndDifferentiates) {
  Rng rng(9);
  Tensor logits = random_tensor({4, 3}, rng, -4, 4);
  Tensor targets({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 0});
  double expect = 0.0;
  for (std::size_t i = 0; i < 12; ++i)
    expect += focal_loss(1.0 / (1.0 + std::exp(-logits[i])), static_cast<int>(targets[i]), 0.25, 2.0);
  EXPECT_NEAR(sigmoid_focal_loss(logits, targets, 0.25, 2.0).item(), expect, 1e-12);
  EXPECT_LT(oracle::gradient_error([&] { return sigmoid_focal_loss(logits, targets, 0.25, 2.0); }, {logits}), 1e-6);
}

TEST(MatchingCost, CrossEntropyEntriesByHand) {
  const DetectionSet d = make_set(Tensor({2, 3}, {0.0, 1.0, -1.0, 2.0, 0.0, 0.5}),
                                  Tensor({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.3, 0.6, 0.2, 0.4}),
                                  ClassLossKind::kCrossEntropy);
  GroundTruth gt{{{0.45, 0.5, 0.2, 0.3}}, {1}};
  const CostWeights w;
  const CostMatrix c = matching_cost(d, gt, w);
  ASSERT_EQ(c.rows(), 1);
  ASSERT_EQ(c.cols(), 2);
  for (std::size_t q = 0; q < 2; ++q) {
    double z = 0.0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(d.class_logits.at(q, k));
    const double p = std::exp(d.class_logits.at(q, 1)) / z;
    double l1 = 0.0;
    for (std::size_t k = 0; k < 4; ++k) l1 += std::abs(d.boxes.at(q, k) - gt.boxes[0][k]);
    const Eigen::Vector4d pb(d.boxes.at(q, 0), d.boxes.at(q, 1), d.boxes.at(q, 2), d.boxes.at(q, 3));
    const Eigen::Vector4d gb(gt.boxes[0][0], gt.boxes[0][1], gt.boxes[0][2], gt.boxes[0][3]);
    const double expect = -p + 5.0 * l1 + 2.0 * (1.0 - giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb)));
    EXPECT_NEAR(c(0, static_cast<Eigen::Index>(q)), expect, 1e-14);
  }
}

TEST(DetectionLoss, PerfectPredictionHasNoLoss) {
  const DetectionSet d = make_set(Tensor({2, 3}, {-40.0, 40.0, -40.0, -40.0, -40.0, 40.0}),
                                  Tensor({2, 4}, {0.4, 0.5, 0.2, 0.3, 0.7, 0.7, 0.1, 0.1}),
                                  ClassLossKind::kCrossEntropy);
  GroundTruth gt{{{0.4, 0.5, 0.2, 0.3}}, {1}};
  const DetectionLoss loss = detection_loss(d, gt, CostWeights{});
  EXPECT_NEAR(loss.l1.item(), 0.0, 1e-15);
  EXPECT_NEAR(loss.giou.item(), 0.0, 1e-15);
  EXPECT_LT(loss.classification.item(), 1e-30);
  EXPECT_EQ(loss.match.pairs.front().second, 0u);
}

TEST(DetectionLoss, EmptyGroundTruthIsPureNoObjectTerm) {
  Rng rng(10);
  const Tensor logits = random_tensor({3, 3}, rng, -1, 1, false);
  const DetectionSet d = make_set(logits, random_tensor({3, 4}, rng, 0.2, 0.6, false), ClassLossKind::kCrossEntropy);
  const DetectionLoss loss = detection_loss(d, GroundTruth{}, CostWeights{});
  EXPECT_EQ(loss.l1.item(), 0.0);
  EXPECT_EQ(loss.giou.item(), 0.0);
  double expect = 0.0;
  for (std::size_t q = 0; q < 3; ++q) {
    double z = 0.0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(logits.at(q, k));
    expect += -std::log(std::exp(logits.at(q, 2)) / z) / 3.0;
  }
  EXPECT_NEAR(loss.total.item(), expect, 1e-14);

  CostWeights focal;
  focal.kind = ClassLossKind::kFocal;
  const DetectionSet f = make_set(slice(logits, 1, 0, 2), d.boxes, ClassLossKind::kFocal);
  double focal_expect = 0.0;
  for (std::size_t i = 0; i < 6; ++i) focal_expect += focal_loss(1.0 / (1.0 + std::exp(-f.class_logits[i])), 0, 0.25, 2.0);
  EXPECT_NEAR(detection_loss(f, GroundTruth{}, focal).total.item(), focal_expect, 1e-12);
}

TEST(DetectionLoss, BoxGradientWithAssignmentHeldFixed) {
  Rng rng(11);
  Tensor raw = random_tensor({2, 4}, rng, -1, 1);
  Tensor logits = random_tensor({2, 2}, rng, -1, 1);
  GroundTruth gt{{{0.45, 0.55, 0.3, 0.25}}, {0}};
  auto build = [&] { return make_set(logits, sigmoid(raw), ClassLossKind::kCrossEntropy); };
  MatchAssignment fixed;
  {
    NoGradGuard guard;
    fixed = hungarian_match(matching_cost(build(), gt, CostWeights{}));
  }
  EXPECT_LT(oracle::gradient_error([&] { return detection_loss(build(), gt, CostWeights{}, &fixed).total; },
                                   {raw, logits}),
            1e-4);
}

TEST(DetectionLoss, RejectsMismatchedLossKind) {
  const DetectionSet d = make_set(Tensor({1, 2}), Tensor({1, 4}, 0.5), ClassLossKind::kCrossEntropy);
  CostWeights w;
  w.kind = ClassLossKind::kFocal;
  EXPECT_THROW(detection_loss(d, GroundTruth{}, w), ConfigError);
}
