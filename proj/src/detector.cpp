#include "txt/detector.hpp"

#include <cmath>

namespace txt {

std::string to_string(DetectorKind kind) { return kind == DetectorKind::kDetr ? "detr" : "deformable"; }

std::string to_string(ContextMode mode) {
  switch (mode) {
    case ContextMode::kNone: return "none";
    case ContextMode::kBackbone: return "backbone";
    case ContextMode::kProjectedBackbone: return "projected_backbone";
    case ContextMode::kEncoder: return "encoder";
  }
  return "none";
}

std::string to_string(ClassLossKind kind) { return kind == ClassLossKind::kFocal ? "focal" : "cross_entropy"; }

ContextMode parse_context_mode(std::string_view text) {
  for (auto m : {ContextMode::kNone, ContextMode::kBackbone, ContextMode::kProjectedBackbone, ContextMode::kEncoder})
    if (text == to_string(m)) return m;
  throw ConfigError("unknown context mode '" + std::string(text) + "'");
}

namespace {

DetectorKind parse_kind(std::string_view text) {
  if (text == "detr") return DetectorKind::kDetr;
  if (text == "deformable") return DetectorKind::kDeformable;
  throw ConfigError("unknown detector kind '" + std::string(text) + "'");
}

ClassLossKind parse_loss(std::string_view text) {
  if (text == "focal") return ClassLossKind::kFocal;
  if (text == "cross_entropy") return ClassLossKind::kCrossEntropy;
  throw ConfigError("unknown class loss '" + std::string(text) + "'");
}

std::size_t stage_of_stride(int stride) {
  switch (stride) {
    case 4: return 0;
    case 8: return 1;
    case 16: return 2;
    case 32: return 3;
    default: throw ConfigError("no backbone stage at stride " + std::to_string(stride));
  }
}

}  // namespace

std::string EncoderVariant::name() const {
  switch (kind) {
    case Kind::kMultiScale: return "multi";
    case Kind::kSingleScale: return "single";
    case Kind::kQueryStride: return "stride-" + std::to_string(stride);
  }
  return "multi";
}

EncoderVariant EncoderVariant::parse(std::string_view text) {
  if (text == "multi") return multi_scale();
  if (text == "single") return single_scale();
  if (text.starts_with("stride-")) {
    const std::string digits(text.substr(7));
    int s = 0;
    try {
      s = std::stoi(digits);
    } catch (const std::exception&) {
      throw ConfigError("bad encoder variant '" + std::string(text) + "'");
    }
    bool known = false;
    for (int k : DetectorConfig::kStrides) known = known || k == s;
    if (!known) throw ConfigError("query stride " + digits + " is not one of 8, 16, 32, 64");
    return query_stride(s);
  }
  throw ConfigError("bad encoder variant '" + std::string(text) + "'");
}

DetectorConfig DetectorConfig::detr() {
  DetectorConfig c;
  c.kind = DetectorKind::kDetr;
  c.attention.ffn_dim = 2048;
  c.encoder = EncoderVariant::single_scale();
  c.box_refinement = false;
  return c;
}

DetectorConfig DetectorConfig::deformable() {
  DetectorConfig c;
  c.num_queries = 300;
  c.loss = ClassLossKind::kFocal;
  return c;
}

std::size_t DetectorConfig::context_width(ContextMode mode) const {
  switch (mode) {
    case ContextMode::kNone: return 0;
    case ContextMode::kBackbone: return backbone_widths[3];
    case ContextMode::kProjectedBackbone:
    case ContextMode::kEncoder: return attention.model_dim;
  }
  return 0;
}

std::size_t DetectorConfig::encoder_levels() const {
  if (kind == DetectorKind::kDetr || encoder.kind == EncoderVariant::Kind::kSingleScale) return 1;
  return kStrides.size();
}

std::size_t DetectorConfig::decoder_levels() const {
  return encoder.kind == EncoderVariant::Kind::kMultiScale && kind == DetectorKind::kDeformable ? kStrides.size() : 1;
}

void DetectorConfig::validate() const {
  attention.validate();
  for (auto w : backbone_widths)
    if (w == 0) throw ConfigError("backbone widths must be positive");
  if (encoder_layers == 0 || decoder_layers == 0) throw ConfigError("encoder and decoder need at least one layer");
  if (num_queries == 0) throw ConfigError("num_queries must be positive");
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (kind == DetectorKind::kDetr) {
    if (box_refinement) throw ConfigError("box refinement needs the deformable decoder");
    if (encoder.kind != EncoderVariant::Kind::kSingleScale) throw ConfigError("detr encoder is single-scale");
  }
  if (kind == DetectorKind::kDeformable && encoder.kind != EncoderVariant::Kind::kSingleScale &&
      attention.num_scales != kStrides.size())
    throw ConfigError("multi-scale encoders need num_scales = 4");
}

nlohmann::json DetectorConfig::to_json() const {
  nlohmann::json j;
  j["kind"] = to_string(kind);
  j["backbone_widths"] = backbone_widths;
  j["strides"] = kStrides;
  j["model_dim"] = attention.model_dim;
  j["heads"] = attention.heads;
  j["ffn_dim"] = attention.ffn_dim;
  j["sampling_points"] = attention.sampling_points;
  j["num_scales"] = attention.num_scales;
  j["encoder_layers"] = encoder_layers;
  j["decoder_layers"] = decoder_layers;
  j["num_queries"] = num_queries;
  j["num_classes"] = num_classes;
  j["encoder"] = encoder.name();
  j["box_refinement"] = box_refinement;
  j["loss"] = to_string(loss);
  j["context"] = to_string(context);
  return j;
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("detector config must be an object");
  DetectorConfig c = j.contains("kind") && j.at("kind") == "detr" ? detr() : DetectorConfig{};
  try {
    if (j.contains("kind")) c.kind = parse_kind(j.at("kind").get<std::string>());
    if (j.contains("backbone_widths")) c.backbone_widths = j.at("backbone_widths").get<std::array<std::size_t, 4>>();
    if (j.contains("strides") && j.at("strides").get<std::array<int, 4>>() != kStrides)
      throw ConfigError("strides are fixed at 8, 16, 32, 64");
    auto read = [&](const char* key, std::size_t& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::size_t>();
    };
    read("model_dim", c.attention.model_dim);
    read("heads", c.attention.heads);
    read("ffn_dim", c.attention.ffn_dim);
    read("sampling_points", c.attention.sampling_points);
    read("num_scales", c.attention.num_scales);
    read("encoder_layers", c.encoder_layers);
    read("decoder_layers", c.decoder_layers);
    read("num_queries", c.num_queries);
    read("num_classes", c.num_classes);
    if (j.contains("encoder")) c.encoder = EncoderVariant::parse(j.at("encoder").get<std::string>());
    if (j.contains("box_refinement")) c.box_refinement = j.at("box_refinement").get<bool>();
    if (j.contains("loss")) c.loss = parse_loss(j.at("loss").get<std::string>());
    if (j.contains("context")) c.context = parse_context_mode(j.at("context").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("detector config: ") + e.what());
  }
  c.validate();
  return c;
}

Conv2d Conv2d::kaiming(std::size_t k, std::size_t in, std::size_t out, std::size_t stride, std::size_t padding,
                       Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(k * k * in));
  return {uniform_parameter({k, k, in, out}, bound, rng), constant_parameter({out}, 0.0), stride, padding};
}

void Conv2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

void BackboneWeights::collect(const std::string& prefix, NamedTensors& out) const {
  for (std::size_t i = 0; i < stages.size(); ++i) stages[i].collect(prefix + ".stages." + std::to_string(i), out);
  for (std::size_t i = 0; i < input_proj.size(); ++i)
    input_proj[i].collect(prefix + ".input_proj." + std::to_string(i), out);
  if (extra) extra->collect(prefix + ".extra", out);
  for (std::size_t i = 0; i < level_embeddings.size(); ++i)
    out.emplace_back(prefix + ".level_embeddings." + std::to_string(i), level_embeddings[i]);
}

BackboneOutput backbone_stub(const Tensor& image, const BackboneWeights& w) {
  if (image.rank() != 3) throw DimensionError("image must be [H, W, C], got " + to_string(image.shape()));
  if (image.dim(0) % 64 != 0 || image.dim(1) % 64 != 0 || image.dim(0) == 0 || image.dim(1) == 0)
    throw DimensionError("image extents must be positive multiples of 64, got " + to_string(image.shape()));
  std::array<Tensor, 4> stage;
  Tensor x = image;
  for (std::size_t i = 0; i < 4; ++i) {
    x = relu(w.stages[i](x));
    stage[i] = x;
  }
  BackboneOutput out;
  out.stage32 = stage[3];
  for (std::size_t i = 0; i < w.input_proj.size(); ++i) {
    const Tensor& src = stage[stage_of_stride(w.proj_strides[i])];
    const std::size_t h = src.dim(0), wd = src.dim(1);
    Tensor flat = w.input_proj[i](reshape(src, {h * wd, src.dim(2)}));
    out.maps.maps.push_back(reshape(flat, {h, wd, flat.dim(1)}));
    out.maps.strides.push_back(w.proj_strides[i]);
  }
  if (w.extra) {
    out.maps.maps.push_back((*w.extra)(stage[3]));
    out.maps.strides.push_back(64);
  }
  out.maps.level_embeddings = w.level_embeddings;
  out.maps.validate();
  return out;
}

BoxHead BoxHead::xavier(std::size_t width, Rng& rng) {
  return {Linear::xavier(width, width, rng), Linear::xavier(width, width, rng), Linear::xavier(width, 4, rng)};
}

void BoxHead::collect(const std::string& prefix, NamedTensors& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
  fc3.collect(prefix + ".fc3", out);
}

Tensor bbox_head(const Tensor& decoder_output, const BoxHead& head) { return sigmoid(head.raw(decoder_output)); }

Tensor refine_step(const Tensor& layer_output, const Tensor& reference, const BoxHead& head) {
  if (reference.rank() != 2 || reference.dim(1) != 4 || reference.dim(0) != layer_output.dim(0))
    throw DimensionError("reference must be [Q, 4], got " + to_string(reference.shape()));
  return sigmoid(head.raw(layer_output) + inverse_sigmoid(reference));
}

std::vector<Tensor> iterative_box_refinement(const std::vector<Tensor>& layer_outputs,
                                             const Tensor& initial_reference, const std::vector<BoxHead>& heads) {
  if (heads.size() != layer_outputs.size())
    throw ConfigError("refinement needs one box head per decoder layer");
  std::vector<Tensor> boxes;
  Tensor ref = initial_reference;
  for (std::size_t l = 0; l < layer_outputs.size(); ++l) {
    boxes.push_back(refine_step(layer_outputs[l], ref, heads[l]));
    ref = boxes.back().detach();
  }
  return boxes;
}

Tensor detection_confidence(const Tensor& class_logits, ClassLossKind loss) {
  if (class_logits.rank() != 2) throw DimensionError("class logits must be [Q, C]");
  if (loss == ClassLossKind::kFocal) return max(sigmoid(class_logits), 1);
  if (class_logits.dim(1) < 2) throw DimensionError("cross-entropy logits need a no-object column");
  return max(slice(softmax(class_logits, 1), 1, 0, class_logits.dim(1) - 1), 1);
}

DetectionSet DetectionSet::select(const std::vector<std::size_t>& rows) const {
  return {gather_rows(features, rows), gather_rows(class_logits, rows), gather_rows(boxes, rows),
          gather_rows(confidence, rows), loss};
}

Detector::Detector(DetectorConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const auto& a = config_.attention;
  const std::size_t d = a.model_dim;
  auto& bb = weights_.backbone;
  const auto& widths = config_.backbone_widths;
  bb.stages[0] = Conv2d::kaiming(4, 3, widths[0], 4, 0, rng);
  for (std::size_t i = 1; i < 4; ++i) bb.stages[i] = Conv2d::kaiming(3, widths[i - 1], widths[i], 2, 1, rng);

  if (config_.encoder_levels() == 1) {
    bb.proj_strides = {32};
  } else {
    bb.proj_strides = {8, 16, 32};
    Conv2d extra = Conv2d::kaiming(3, widths[3], d, 2, 1, rng);
    bb.extra = extra;
  }
  for (int s : bb.proj_strides) bb.input_proj.push_back(Linear::xavier(widths[stage_of_stride(s)], d, rng));

  if (config_.kind == DetectorKind::kDetr) {
    for (std::size_t i = 0; i < config_.encoder_layers; ++i)
      weights_.detr_encoder.push_back(EncoderLayerWeights::xavier(a, rng));
    weights_.detr_encoder_norm = LayerNormWeights(d);
    for (std::size_t i = 0; i < config_.decoder_layers; ++i)
      weights_.detr_decoder.push_back(DecoderLayerWeights::xavier(a, rng));
  } else {
    for (std::size_t l = 0; l < config_.encoder_levels(); ++l)
      bb.level_embeddings.push_back(uniform_parameter({d}, 0.1, rng));
    const int qs = config_.encoder.kind == EncoderVariant::Kind::kQueryStride ? config_.encoder.stride : kAllScales;
    weights_.deformable_encoder =
        ScalableEncoderWeights::init(a, config_.encoder_layers, qs, config_.encoder_levels(), rng);
    for (std::size_t i = 0; i < config_.decoder_layers; ++i)
      weights_.deformable_decoder.push_back(DeformableDecoderLayerWeights::init(a, config_.decoder_levels(), rng));
    weights_.reference_head = Linear::xavier(d, 4, rng);
  }
  weights_.decoder_norm = LayerNormWeights(d);
  weights_.query_content = uniform_parameter({config_.num_queries, d}, 1.0, rng);
  weights_.query_pos = uniform_parameter({config_.num_queries, d}, 1.0, rng);
  weights_.class_head = Linear::xavier(d, config_.class_outputs(), rng);
  if (config_.loss == ClassLossKind::kFocal) {
    // Prior probability 0.01 for every class at initialization.
    const double prior = -std::log((1.0 - 0.01) / 0.01);
    for (double& b : weights_.class_head.bias.mutable_data()) b = prior;
  }
  const std::size_t heads = config_.box_refinement ? config_.decoder_layers : 1;
  for (std::size_t i = 0; i < heads; ++i) weights_.box_heads.push_back(BoxHead::xavier(d, rng));
}

DetectorOutput Detector::forward(const Tensor& image) const {
  const auto& w = weights_;
  const std::size_t heads = config_.attention.heads;
  DetectorOutput out;
  BackboneOutput bb = backbone_stub(image, w.backbone);
  out.backbone_stage32 = bb.stage32;
  const std::size_t l32 = bb.maps.level_of_stride(32);
  out.projected_stage32 = bb.maps.maps[l32];

  Tensor x = w.query_content;
  if (config_.kind == DetectorKind::kDetr) {
    const Tensor& map = bb.maps.maps[l32];
    const std::size_t h = map.dim(0), wd = map.dim(1);
    Tensor pos = sine_position_encoding(h, wd, map.dim(2));
    Tensor mem = reshape(map, {h * wd, map.dim(2)});
    for (const auto& layer : w.detr_encoder) mem = transformer_encoder_layer(mem, pos, layer, heads);
    out.memory = {w.detr_encoder_norm(mem), pos, LevelLayout::single(h, wd), {32}};
    for (const auto& layer : w.detr_decoder) {
      x = transformer_decoder_layer(x, w.query_pos, out.memory.tokens, out.memory.pos, layer, heads);
      out.layer_outputs.push_back(w.decoder_norm(x));
      out.layer_boxes.push_back(bbox_head(out.layer_outputs.back(), w.box_heads.front()));
    }
  } else {
    out.memory = scalable_encoder(bb.maps, w.deformable_encoder.query_stride, w.deformable_encoder);
    const Tensor initial = sigmoid(w.reference_head(w.query_pos));
    Tensor ref = initial;
    for (std::size_t l = 0; l < w.deformable_decoder.size(); ++l) {
      x = deformable_decoder_layer(x, w.query_pos, slice(ref, 1, 0, 2), out.memory.tokens, out.memory.layout,
                                   w.deformable_decoder[l], heads);
      out.layer_outputs.push_back(w.decoder_norm(x));
      if (config_.box_refinement) {
        out.layer_boxes.push_back(refine_step(out.layer_outputs.back(), ref, w.box_heads[l]));
        ref = out.layer_boxes.back().detach();
      } else {
        out.layer_boxes.push_back(refine_step(out.layer_outputs.back(), initial, w.box_heads.front()));
      }
    }
  }
  const Tensor& features = out.layer_outputs.back();
  out.detections.features = features;
  out.detections.class_logits = w.class_head(features);
  out.detections.boxes = out.layer_boxes.back();
  out.detections.confidence = detection_confidence(out.detections.class_logits, config_.loss);
  out.detections.loss = config_.loss;
  return out;
}

NamedTensors Detector::backbone_parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < 4; ++i)
    weights_.backbone.stages[i].collect("backbone.stages." + std::to_string(i), out);
  return out;
}

NamedTensors Detector::class_head_parameters() const {
  NamedTensors out;
  weights_.class_head.collect("class_head", out);
  return out;
}

NamedTensors Detector::body_parameters() const {
  const auto& w = weights_;
  NamedTensors out;
  for (std::size_t i = 0; i < w.backbone.input_proj.size(); ++i)
    w.backbone.input_proj[i].collect("backbone.input_proj." + std::to_string(i), out);
  if (w.backbone.extra) w.backbone.extra->collect("backbone.extra", out);
  for (std::size_t i = 0; i < w.backbone.level_embeddings.size(); ++i)
    out.emplace_back("backbone.level_embeddings." + std::to_string(i), w.backbone.level_embeddings[i]);
  if (config_.kind == DetectorKind::kDetr) {
    for (std::size_t i = 0; i < w.detr_encoder.size(); ++i)
      w.detr_encoder[i].collect("encoder.layers." + std::to_string(i), out);
    w.detr_encoder_norm.collect("encoder.final_norm", out);
    for (std::size_t i = 0; i < w.detr_decoder.size(); ++i)
      w.detr_decoder[i].collect("decoder.layers." + std::to_string(i), out);
  } else {
    w.deformable_encoder.collect("encoder", out);
    for (std::size_t i = 0; i < w.deformable_decoder.size(); ++i)
      w.deformable_decoder[i].collect("decoder.layers." + std::to_string(i), out);
    w.reference_head.collect("reference_head", out);
  }
  w.decoder_norm.collect("decoder.norm", out);
  out.emplace_back("query_content", w.query_content);
  out.emplace_back("query_pos", w.query_pos);
  for (std::size_t i = 0; i < w.box_heads.size(); ++i) w.box_heads[i].collect("box_heads." + std::to_string(i), out);
  return out;
}

NamedTensors Detector::parameters() const {
  NamedTensors out = backbone_parameters();
  for (auto& p : body_parameters()) out.push_back(std::move(p));
  for (auto& p : class_head_parameters()) out.push_back(std::move(p));
  return out;
}

ContextSources ContextSources::of(const DetectorOutput& out) {
  return {out.backbone_stage32, out.projected_stage32, out.memory.tokens};
}

DetectionSet append_global_context(const DetectionSet& det, const ContextSources& sources, ContextMode mode) {
  if (mode == ContextMode::kNone) return det;
  const Tensor* src = nullptr;
  switch (mode) {
    case ContextMode::kBackbone: src = &sources.backbone; break;
    case ContextMode::kProjectedBackbone: src = &sources.projected_backbone; break;
    case ContextMode::kEncoder: src = &sources.encoder; break;
    case ContextMode::kNone: break;
  }
  if (!src || !src->defined()) throw ConfigError("context source '" + to_string(mode) + "' is not available");
  const std::size_t channels = src->shape().back();
  Tensor pooled = mean(reshape(*src, {src->numel() / channels, channels}), 0);
  DetectionSet out = det;
  out.features = concat({det.features, broadcast_rows(pooled, det.size())}, 1);
  return out;
}

DetectionSet detect(const Tensor& image, const Detector& model, ContextMode mode) {
  const DetectorOutput out = model.forward(image);
  return append_global_context(out.detections, ContextSources::of(out), mode);
}

}  // namespace txt
