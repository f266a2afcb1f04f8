#include "txt/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace txt {

double LinearSchedule::factor(std::size_t step) const {
  if (total == 0) throw ConfigError("schedule needs at least one step");
  if (step <= warmup) return warmup == 0 ? 1.0 : static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  return static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

AdamW::AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) {
    m_.emplace_back();
    v_.emplace_back();
    for (const auto& p : g.params) {
      if (!p.is_leaf()) throw ContractError("optimizer parameters must be leaves");
      m_.back().emplace_back(p.numel(), 0.0);
      v_.back().emplace_back(p.numel(), 0.0);
    }
  }
}

void AdamW::step(double lr_factor) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& g = groups_[gi];
    const double lr = g.lr * lr_factor;
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      Tensor& p = g.params[pi];
      if (!p.has_grad()) continue;
      auto grad = p.grad();
      auto data = p.mutable_data();
      auto& m = m_[gi][pi];
      auto& v = v_[gi][pi];
      for (std::size_t i = 0; i < data.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
        if (lr == 0.0) continue;
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + g.weight_decay * data[i];
        data[i] -= lr * update;
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

namespace {

std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

void check_finite(double loss, const char* what, std::size_t step, std::size_t example) {
  if (!std::isfinite(loss))
    throw TrainingDivergence(std::string(what) + " loss became " + std::to_string(loss) + " at step " +
                             std::to_string(step) + " (scene " + std::to_string(example) + ")");
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) j.at(key).get_to(dst);
}

}  // namespace

nlohmann::json DetectorTrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"lr", lr},
          {"backbone_lr", backbone_lr},
          {"weight_decay", weight_decay},
          {"warmup_steps", warmup_steps},
          {"accumulation", accumulation},
          {"clip_norm", clip_norm},
          {"aux_loss", aux_loss},
          {"loss",
           {{"class", loss.class_weight},
            {"l1", loss.l1},
            {"giou", loss.giou},
            {"alpha", loss.alpha},
            {"gamma", loss.gamma},
            {"no_object_weight", loss.no_object_weight}}}};
}

DetectorTrainConfig DetectorTrainConfig::from_json(const nlohmann::json& j) {
  DetectorTrainConfig c;
  try {
    read_field(j, "epochs", c.epochs);
    read_field(j, "lr", c.lr);
    read_field(j, "backbone_lr", c.backbone_lr);
    read_field(j, "weight_decay", c.weight_decay);
    read_field(j, "warmup_steps", c.warmup_steps);
    read_field(j, "accumulation", c.accumulation);
    read_field(j, "clip_norm", c.clip_norm);
    read_field(j, "aux_loss", c.aux_loss);
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      read_field(l, "class", c.loss.class_weight);
      read_field(l, "l1", c.loss.l1);
      read_field(l, "giou", c.loss.giou);
      read_field(l, "alpha", c.loss.alpha);
      read_field(l, "gamma", c.loss.gamma);
      read_field(l, "no_object_weight", c.loss.no_object_weight);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("detector training config: ") + e.what());
  }
  if (c.epochs == 0 || c.accumulation == 0) throw ConfigError("epochs and accumulation must be positive");
  c.loss.validate();
  return c;
}

double train_detector(Detector& model, const Dataset& data, const DetectorTrainConfig& cfg, const MetricSink& sink) {
  CostWeights weights = cfg.loss;
  weights.kind = model.config().loss;
  weights.validate();
  if (cfg.accumulation == 0 || cfg.epochs == 0) throw ConfigError("epochs and accumulation must be positive");
  const std::size_t n = data.train_size();
  const std::size_t per_epoch = (n + cfg.accumulation - 1) / cfg.accumulation;
  const LinearSchedule schedule{cfg.warmup_steps, per_epoch * cfg.epochs};
  std::vector<Tensor> body = tensors_of(model.body_parameters());
  for (auto& t : tensors_of(model.class_head_parameters())) body.push_back(t);
  const std::vector<Tensor> backbone = tensors_of(model.backbone_parameters());
  AdamW opt({{"detector", body, cfg.lr, cfg.weight_decay}, {"backbone", backbone, cfg.backbone_lr, cfg.weight_decay}});
  std::vector<Tensor> all = body;
  all.insert(all.end(), backbone.begin(), backbone.end());

  Rng rng = Rng(data.seed).fork(0xde7ec7);
  double epoch_loss = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, rng);
    epoch_loss = 0.0;
    opt.zero_grad();
    double step_loss = 0.0;
    std::size_t in_step = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = order[k];
      const DetectorOutput out = model.forward(data.image(idx));
      const GroundTruth gt = data.ground_truth(idx);
      Tensor loss = detection_loss(out.detections, gt, weights).total;
      if (cfg.aux_loss) {
        for (std::size_t l = 0; l + 1 < out.layer_outputs.size(); ++l) {
          DetectionSet aux{out.layer_outputs[l], model.weights().class_head(out.layer_outputs[l]), out.layer_boxes[l],
                           Tensor(), model.config().loss};
          loss = loss + detection_loss(aux, gt, weights).total;
        }
      }
      check_finite(loss.item(), "detection", opt.steps() + 1, idx);
      const std::size_t remaining = std::min(cfg.accumulation, n - (k - in_step));
      (loss * (1.0 / static_cast<double>(remaining))).backward();
      step_loss += loss.item();
      epoch_loss += loss.item();
      if (++in_step == remaining) {
        clip_grad_norm(all, cfg.clip_norm);
        const double f = schedule.factor(opt.steps() + 1);
        opt.step(f);
        opt.zero_grad();
        if (sink)
          sink({{"phase", "detector"}, {"step", opt.steps()}, {"loss", step_loss / in_step}, {"lr", cfg.lr * f}});
        step_loss = 0.0;
        in_step = 0;
      }
    }
    epoch_loss /= static_cast<double>(n);
    if (sink) sink({{"phase", "detector"}, {"epoch", epoch + 1}, {"train_loss", epoch_loss}});
  }
  return epoch_loss;
}

std::string to_string(VqaMode mode) {
  switch (mode) {
    case VqaMode::kFrozen: return "frozen";
    case VqaMode::kEndToEnd: return "e2e";
    case VqaMode::kGated: return "gated";
  }
  return "frozen";
}

VqaMode parse_vqa_mode(std::string_view text) {
  for (auto m : {VqaMode::kFrozen, VqaMode::kEndToEnd, VqaMode::kGated})
    if (text == to_string(m)) return m;
  throw ConfigError("unknown vqa mode '" + std::string(text) + "' (frozen, e2e, gated)");
}

nlohmann::json VqaTrainConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"epochs", epochs},
          {"frozen_epochs", frozen_epochs},
          {"lm_lr", lm_lr},
          {"detector_lr", detector_lr},
          {"backbone_lr", backbone_lr},
          {"class_lr_factor", class_lr_factor},
          {"weight_decay", weight_decay},
          {"warmup_steps", warmup_steps},
          {"accumulation", accumulation},
          {"clip_norm", clip_norm},
          {"gate_threshold", gate_threshold},
          {"context", to_string(context)}};
}

VqaTrainConfig VqaTrainConfig::from_json(const nlohmann::json& j) {
  VqaTrainConfig c;
  try {
    if (j.contains("mode")) c.mode = parse_vqa_mode(j.at("mode").get<std::string>());
    read_field(j, "epochs", c.epochs);
    read_field(j, "frozen_epochs", c.frozen_epochs);
    read_field(j, "lm_lr", c.lm_lr);
    read_field(j, "detector_lr", c.detector_lr);
    read_field(j, "backbone_lr", c.backbone_lr);
    read_field(j, "class_lr_factor", c.class_lr_factor);
    read_field(j, "weight_decay", c.weight_decay);
    read_field(j, "warmup_steps", c.warmup_steps);
    read_field(j, "accumulation", c.accumulation);
    read_field(j, "clip_norm", c.clip_norm);
    read_field(j, "gate_threshold", c.gate_threshold);
    if (j.contains("context")) c.context = parse_context_mode(j.at("context").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("vqa training config: ") + e.what());
  }
  if (c.epochs == 0 || c.accumulation == 0) throw ConfigError("epochs and accumulation must be positive");
  if (c.frozen_epochs > c.epochs) throw ConfigError("frozen_epochs exceeds epochs");
  if (!(c.gate_threshold > 0.0 && c.gate_threshold < 1.0)) throw ConfigError("gate_threshold must lie in (0, 1)");
  return c;
}

ObjectInputs object_inputs(const DetectionSet& det, VqaMode mode, double gate_threshold) {
  if (mode == VqaMode::kGated) {
    GatedObjects g = threshold_mask_gating(det, gate_threshold);
    return {g.features, g.boxes};
  }
  return {det.features, det.boxes};
}

namespace {

ObjectInputs detached_inputs(const Detector& detector, const Dataset& data, std::size_t idx,
                             const VqaTrainConfig& cfg) {
  NoGradGuard guard;
  ObjectInputs in = object_inputs(detect(data.image(idx), detector, cfg.context), cfg.mode, cfg.gate_threshold);
  return {in.features.detach(), in.boxes.detach()};
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double accuracy_from(const LanguageModel& lm, const Dataset& data, std::size_t begin,
                     const std::vector<ObjectInputs>& inputs) {
  NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor logits = lm.forward(data.question(begin + i), inputs[i].features, inputs[i].boxes);
    correct += argmax(logits.data()) == data.scenes[begin + i].question.answer;
  }
  return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

}  // namespace

double vqa_accuracy(const Detector& detector, const LanguageModel& lm, const Dataset& data, std::size_t begin,
                    std::size_t end, const VqaTrainConfig& cfg) {
  if (begin >= end || end > data.scenes.size()) throw ContractError("empty or invalid evaluation range");
  std::vector<ObjectInputs> inputs;
  for (std::size_t i = begin; i < end; ++i) inputs.push_back(detached_inputs(detector, data, i, cfg));
  return accuracy_from(lm, data, begin, inputs);
}

VqaResult train_vqa(Detector& detector, LanguageModel& lm, const Dataset& data, const VqaTrainConfig& cfg,
                    std::uint64_t seed, const MetricSink& sink) {
  if (cfg.epochs == 0 || cfg.accumulation == 0) throw ConfigError("epochs and accumulation must be positive");
  const std::size_t want = detector.config().feature_width(cfg.context);
  if (lm.config().object_feature_dim != want)
    throw ConfigError("language model expects object features of width " +
                      std::to_string(lm.config().object_feature_dim) + ", detector provides " + std::to_string(want));
  const std::size_t n = data.train_size(), total = data.scenes.size();
  if (n == 0 || n >= total) throw ConfigError("dataset needs both a training and an evaluation split");
  const std::size_t frozen_epochs = cfg.mode == VqaMode::kFrozen ? cfg.epochs : cfg.frozen_epochs;
  const std::size_t per_epoch = (n + cfg.accumulation - 1) / cfg.accumulation;
  const LinearSchedule schedule{cfg.warmup_steps, per_epoch * cfg.epochs};

  const std::vector<Tensor> lm_params = tensors_of(lm.parameters());
  AdamW lm_opt({{"language_model", lm_params, cfg.lm_lr, cfg.weight_decay}});
  const std::vector<Tensor> body = tensors_of(detector.body_parameters());
  const std::vector<Tensor> backbone = tensors_of(detector.backbone_parameters());
  const std::vector<Tensor> cls = tensors_of(detector.class_head_parameters());
  const double class_lr = cfg.detector_lr * (cfg.mode == VqaMode::kGated ? cfg.class_lr_factor : 1.0);
  AdamW det_opt({{"detector", body, cfg.detector_lr, cfg.weight_decay},
                 {"backbone", backbone, cfg.backbone_lr, cfg.weight_decay},
                 {"class_layer", cls, class_lr, cfg.weight_decay}});
  std::vector<Tensor> det_params = body;
  det_params.insert(det_params.end(), backbone.begin(), backbone.end());
  det_params.insert(det_params.end(), cls.begin(), cls.end());

  std::vector<ObjectInputs> train_cache, eval_cache;
  auto fill_cache = [&](std::size_t begin, std::size_t end, std::vector<ObjectInputs>& cache) {
    cache.clear();
    for (std::size_t i = begin; i < end; ++i) cache.push_back(detached_inputs(detector, data, i, cfg));
  };

  Rng rng = Rng(seed).fork(0x7a9);
  VqaResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool frozen = epoch < frozen_epochs;
    if (frozen && train_cache.empty()) fill_cache(0, n, train_cache);
    const auto order = shuffled(n, rng);
    lm_opt.zero_grad();
    det_opt.zero_grad();
    double epoch_loss = 0.0, step_loss = 0.0;
    std::size_t in_step = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = order[k];
      ObjectInputs in;
      if (frozen) {
        in = train_cache[idx];
      } else {
        in = object_inputs(detect(data.image(idx), detector, cfg.context), cfg.mode, cfg.gate_threshold);
      }
      const Tensor logits = lm.forward(data.question(idx), in.features, in.boxes);
      const Tensor loss = bce_answer_loss(logits, data.answer_target(idx));
      check_finite(loss.item(), "vqa", step + 1, idx);
      const std::size_t remaining = std::min(cfg.accumulation, n - (k - in_step));
      (loss * (1.0 / static_cast<double>(remaining))).backward();
      step_loss += loss.item();
      epoch_loss += loss.item();
      if (++in_step == remaining) {
        ++step;
        const double f = schedule.factor(step);
        clip_grad_norm(lm_params, cfg.clip_norm);
        lm_opt.step(f);
        if (!frozen) {
          clip_grad_norm(det_params, cfg.clip_norm);
          det_opt.step(f);
        }
        lm_opt.zero_grad();
        det_opt.zero_grad();
        if (sink)
          sink({{"phase", to_string(cfg.mode)}, {"step", step}, {"loss", step_loss / in_step}, {"lr", cfg.lm_lr * f}});
        step_loss = 0.0;
        in_step = 0;
      }
    }
    result.final_loss = epoch_loss / static_cast<double>(n);
    if (frozen) {
      if (eval_cache.empty()) fill_cache(n, total, eval_cache);
    } else {
      fill_cache(n, total, eval_cache);
    }
    const double acc = accuracy_from(lm, data, n, eval_cache);
    result.epoch_accuracy.push_back(acc);
    if (sink)
      sink({{"phase", to_string(cfg.mode)}, {"epoch", epoch + 1}, {"train_loss", result.final_loss}, {"accuracy", acc}});
  }
  result.accuracy = result.epoch_accuracy.back();
  return result;
}

}  // namespace txt
