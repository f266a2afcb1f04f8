#pragma once

// Optimizer, learning-rate schedule and the detector / VQA training loops.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "txt/fusion.hpp"
#include "txt/set_loss.hpp"
#include "txt/synthetic.hpp"

namespace txt {

/// Linear warmup to 1 over `warmup` steps, then linear decay to 0 at `total`.
/// Steps count from 1.
struct LinearSchedule {
  std::size_t warmup = 0;
  std::size_t total = 1;

  double factor(std::size_t step) const;
};

struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// One update with every group's lr scaled by `lr_factor`.
  void step(double lr_factor);
  void zero_grad();
  const std::vector<ParamGroup>& groups() const { return groups_; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<std::vector<double>>> m_;
  std::vector<std::vector<std::vector<double>>> v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

/// Raised when a training loss stops being finite.
class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using MetricSink = std::function<void(const nlohmann::json&)>;

struct DetectorTrainConfig {
  std::size_t epochs = 10;
  double lr = 1e-3;
  double backbone_lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t warmup_steps = 20;
  std::size_t accumulation = 4;
  double clip_norm = 1.0;
  /// Adds the set loss of every intermediate decoder layer.
  bool aux_loss = false;
  CostWeights loss{};

  nlohmann::json to_json() const;
  static DetectorTrainConfig from_json(const nlohmann::json& j);
};

/// Trains on the training split; returns the mean loss of the last epoch.
double train_detector(Detector& model, const Dataset& data, const DetectorTrainConfig& cfg,
                      const MetricSink& sink = {});

enum class VqaMode { kFrozen, kEndToEnd, kGated };

std::string to_string(VqaMode mode);
VqaMode parse_vqa_mode(std::string_view text);

struct VqaTrainConfig {
  VqaMode mode = VqaMode::kFrozen;
  std::size_t epochs = 8;
  /// Leading epochs on fixed detector features in end-to-end and gated modes.
  std::size_t frozen_epochs = 4;
  double lm_lr = 1e-3;
  double detector_lr = 1e-4;
  double backbone_lr = 1e-4;
  double class_lr_factor = 10.0;
  double weight_decay = 1e-4;
  std::size_t warmup_steps = 20;
  std::size_t accumulation = 4;
  double clip_norm = 1.0;
  double gate_threshold = 0.5;
  ContextMode context = ContextMode::kNone;

  nlohmann::json to_json() const;
  static VqaTrainConfig from_json(const nlohmann::json& j);
};

struct VqaResult {
  double accuracy = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_accuracy;
};

/// Objects handed to the language model for one image under `mode`.
struct ObjectInputs {
  Tensor features;
  Tensor boxes;
};
ObjectInputs object_inputs(const DetectionSet& det, VqaMode mode, double gate_threshold);

/// Fraction of scenes [begin, end) whose arg-max answer is correct.
double vqa_accuracy(const Detector& detector, const LanguageModel& lm, const Dataset& data, std::size_t begin,
                    std::size_t end, const VqaTrainConfig& cfg);

/// Trains the language model (and, outside frozen mode, the detector) on the
/// VQA loss. Evaluates on the held-out split after every epoch.
VqaResult train_vqa(Detector& detector, LanguageModel& lm, const Dataset& data, const VqaTrainConfig& cfg,
                    std::uint64_t seed, const MetricSink& sink = {});

}  // namespace txt
