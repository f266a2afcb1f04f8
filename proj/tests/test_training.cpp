#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "txt/experiment.hpp"
#include "txt/training.hpp"

using namespace txt;
using testing_util::random_tensor;
using testing_util::values;

namespace {

Dataset tiny_dataset(std::size_t scenes, std::uint64_t seed) {
  DatasetSpec spec = desk_dataset_spec();
  spec.scenes = scenes;
  return generate_synthetic_dataset(spec, seed);
}

double grad_norm(const NamedTensors& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    if (t.has_grad())
      for (double g : t.grad()) sq += g * g;
  return std::sqrt(sq);
}

std::vector<std::vector<double>> snapshot(const NamedTensors& params) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : params) out.push_back(values(t));
  return out;
}

VqaTrainConfig quick_vqa(VqaMode mode) {
  VqaTrainConfig c = desk_vqa_training(mode);
  c.epochs = 2;
  c.frozen_epochs = mode == VqaMode::kFrozen ? 2 : 1;
  c.warmup_steps = 2;
  return c;
}

}  // namespace

TEST(LinearSchedule, WarmupThenLinearDecay) {
  const LinearSchedule s{10, 110};
  for (std::size_t step = 1; step <= 10; ++step) EXPECT_DOUBLE_EQ(s.factor(step), step / 10.0);
  EXPECT_DOUBLE_EQ(s.factor(60), 0.5);
  EXPECT_DOUBLE_EQ(s.factor(110), 0.0);
  EXPECT_DOUBLE_EQ(s.factor(500), 0.0);
  EXPECT_DOUBLE_EQ((LinearSchedule{0, 4}.factor(1)), 0.75);
}

TEST(AdamW, FirstStepMatchesClosedForm) {
  Rng rng(1);
  Tensor p = random_tensor({3, 2}, rng, -1, 1);
  const Tensor c = random_tensor({3, 2}, rng, -2, 2, false);
  const std::vector<double> before = values(p);
  AdamW opt({{"p", {p}, 0.01, 0.1}});
  sum(p * c).backward();
  opt.step(0.5);
  // Bias-corrected first moments equal g and second moments g², so the step is sign(g) up to eps.
  for (std::size_t i = 0; i < 6; ++i) {
    const double g = c[i];
    const double expect = before[i] - 0.005 * (g / (std::abs(g) + 1e-8) + 0.1 * before[i]);
    EXPECT_NEAR(p[i], expect, 1e-15);
  }
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ZeroLearningRateLeavesParametersBitIdentical) {
  Rng rng(2);
  Tensor p = random_tensor({4, 4}, rng, -1, 1);
  const std::vector<double> before = values(p);
  AdamW opt({{"p", {p}, 0.0, 0.3}});
  for (int k = 0; k < 5; ++k) {
    opt.zero_grad();
    sum(p * p).backward();
    opt.step(1.0);
  }
  EXPECT_EQ(values(p), before);
}

TEST(ClipGradNorm, ScalesOnlyWhenAboveLimit) {
  Tensor a({2}, {0.0, 0.0}), b({1}, {0.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  sum(a * Tensor({2}, {3.0, 0.0}) + Tensor({2}, {0.0, 0.0})).backward();
  sum(b * Tensor({1}, {4.0})).backward();
  EXPECT_DOUBLE_EQ(clip_grad_norm({a, b}, 10.0), 5.0);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm({a, b}, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
}

TEST(VqaConfig, JsonRoundTripAndValidation) {
  const VqaTrainConfig c = desk_vqa_training(VqaMode::kGated);
  EXPECT_EQ(VqaTrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(VqaTrainConfig::from_json({{"epochs", 2}, {"frozen_epochs", 3}}), ConfigError);
  EXPECT_THROW(VqaTrainConfig::from_json({{"gate_threshold", 1.0}}), ConfigError);
  EXPECT_THROW(VqaTrainConfig::from_json({{"mode", "joint"}}), ConfigError);
  const DetectorTrainConfig d = desk_detector_training();
  EXPECT_EQ(DetectorTrainConfig::from_json(d.to_json()).to_json(), d.to_json());
}

TEST(GatedMode, ClassLayerReceivesGradientOnFirstStep) {
  const Dataset data = tiny_dataset(4, 3);
  const Detector det(desk_detector_config(), 4);
  const LanguageModel lm(desk_language_model_config(det.config().feature_width(ContextMode::kNone)), 5);
  for (VqaMode mode : {VqaMode::kGated, VqaMode::kEndToEnd}) {
    for (auto [name, t] : det.parameters()) t.zero_grad();
    const ObjectInputs in = object_inputs(detect(data.image(0), det, ContextMode::kNone), mode, 0.5);
    bce_answer_loss(lm.forward(data.question(0), in.features, in.boxes), data.answer_target(0)).backward();
    if (mode == VqaMode::kGated) {
      EXPECT_GT(grad_norm(det.class_head_parameters()), 0.0);
    } else {
      EXPECT_EQ(grad_norm(det.class_head_parameters()), 0.0);
    }
    EXPECT_GT(grad_norm(det.body_parameters()), 0.0);
  }
}

TEST(TrainVqa, ZeroLearningRatesFreezeEverything) {
  const Dataset data = tiny_dataset(10, 6);
  Detector det(desk_detector_config(), 7);
  LanguageModel lm(desk_language_model_config(det.config().feature_width(ContextMode::kNone)), 8);
  const auto det_before = snapshot(det.parameters());
  const auto lm_before = snapshot(lm.parameters());
  VqaTrainConfig cfg = quick_vqa(VqaMode::kEndToEnd);
  cfg.lm_lr = cfg.detector_lr = cfg.backbone_lr = 0.0;
  const VqaResult r = train_vqa(det, lm, data, cfg, 1);
  EXPECT_EQ(snapshot(det.parameters()), det_before);
  EXPECT_EQ(snapshot(lm.parameters()), lm_before);
  EXPECT_EQ(r.epoch_accuracy.size(), 2u);
  EXPECT_EQ(r.epoch_accuracy[0], r.epoch_accuracy[1]);
}

TEST(TrainVqa, FrozenModeNeverTouchesDetector) {
  const Dataset data = tiny_dataset(10, 9);
  Detector det(desk_detector_config(), 10);
  LanguageModel lm(desk_language_model_config(det.config().feature_width(ContextMode::kNone)), 11);
  const auto det_before = snapshot(det.parameters());
  const auto lm_before = snapshot(lm.parameters());
  train_vqa(det, lm, data, quick_vqa(VqaMode::kFrozen), 2);
  EXPECT_EQ(snapshot(det.parameters()), det_before);
  EXPECT_NE(snapshot(lm.parameters()), lm_before);
}

TEST(TrainVqa, DeterministicMetricsForSameSeed) {
  const Dataset data = tiny_dataset(10, 12);
  auto run = [&] {
    Detector det(desk_detector_config(), 13);
    LanguageModel lm(desk_language_model_config(det.config().feature_width(ContextMode::kNone)), 14);
    std::string log;
    train_vqa(det, lm, data, quick_vqa(VqaMode::kEndToEnd), 3, [&](const nlohmann::json& j) { log += j.dump() + "\n"; });
    return log;
  };
  const std::string a = run();
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, run());
}

TEST(TrainVqa, RejectsWidthMismatchAndDivergence) {
  const Dataset data = tiny_dataset(10, 15);
  Detector det(desk_detector_config(), 16);
  LanguageModel wrong(desk_language_model_config(det.config().feature_width(ContextMode::kNone) + 1), 17);
  EXPECT_THROW(train_vqa(det, wrong, data, quick_vqa(VqaMode::kFrozen), 4), ConfigError);
  LanguageModel lm(desk_language_model_config(det.config().feature_width(ContextMode::kNone)), 18);
  for (double& v : lm.parameters().back().second.mutable_data()) v = std::nan("");
  EXPECT_THROW(train_vqa(det, lm, data, quick_vqa(VqaMode::kFrozen), 4), TrainingDivergence);
}

TEST(TrainDetector, DeterministicAndLossDecreasesOnTinySet) {
  const Dataset data = tiny_dataset(20, 19);
  DetectorTrainConfig cfg = desk_detector_training();
  cfg.epochs = 6;
  cfg.warmup_steps = 2;
  auto run = [&](std::vector<double>& epoch_losses) {
    Detector det(desk_detector_config(), 20);
    std::string log;
    train_detector(det, data, cfg, [&](const nlohmann::json& j) {
      log += j.dump() + "\n";
      if (j.contains("train_loss")) epoch_losses.push_back(j.at("train_loss").get<double>());
    });
    return log;
  };
  std::vector<double> first, second;
  const std::string a = run(first);
  EXPECT_EQ(a, run(second));
  ASSERT_EQ(first.size(), 6u);
  EXPECT_LT(first.back(), first.front());
}
