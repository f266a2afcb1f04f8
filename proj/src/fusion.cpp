#include "txt/fusion.hpp"

#include <algorithm>

#include "txt/set_loss.hpp"

namespace txt {

void LanguageModelConfig::validate() const {
  if (vocab_size == 0 || max_length == 0 || segments == 0) throw ConfigError("token tables must be non-empty");
  if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("lm width must be a positive multiple of heads");
  if (ffn_dim == 0 || layers == 0) throw ConfigError("lm needs a feed-forward width and at least one layer");
  if (answers == 0 || head_hidden == 0) throw ConfigError("answer head must be non-empty");
  if (object_feature_dim == 0) throw ConfigError("object_feature_dim must be positive");
}

nlohmann::json LanguageModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"max_length", max_length}, {"segments", segments},
          {"width", width},           {"heads", heads},           {"ffn_dim", ffn_dim},
          {"layers", layers},         {"answers", answers},       {"head_hidden", head_hidden},
          {"object_feature_dim", object_feature_dim}};
}

LanguageModelConfig LanguageModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("language model config must be an object");
  LanguageModelConfig c;
  try {
    for (auto [key, dst] : {std::pair{"vocab_size", &c.vocab_size}, std::pair{"max_length", &c.max_length},
                            std::pair{"segments", &c.segments}, std::pair{"width", &c.width},
                            std::pair{"heads", &c.heads}, std::pair{"ffn_dim", &c.ffn_dim},
                            std::pair{"layers", &c.layers}, std::pair{"answers", &c.answers},
                            std::pair{"head_hidden", &c.head_hidden},
                            std::pair{"object_feature_dim", &c.object_feature_dim}})
      if (j.contains(key)) *dst = j.at(key).get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("language model config: ") + e.what());
  }
  c.validate();
  return c;
}

TokenSequence TokenSequence::of(std::vector<std::size_t> ids, std::size_t segment) {
  TokenSequence s;
  s.positions.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) s.positions[i] = i;
  s.segments.assign(ids.size(), segment);
  s.ids = std::move(ids);
  return s;
}

Tensor position_features(const Tensor& boxes) {
  Tensor corners = clamp(cxcywh_to_xyxy(boxes), 0.0, 1.0);
  Tensor w = slice(corners, 1, 2, 3) - slice(corners, 1, 0, 1);
  Tensor h = slice(corners, 1, 3, 4) - slice(corners, 1, 1, 2);
  return concat({corners, w, h, w * h}, 1);
}

ObjectEmbeddingWeights ObjectEmbeddingWeights::xavier(std::size_t feature_dim, std::size_t width, Rng& rng) {
  return {Linear::xavier(feature_dim, width, rng), Linear::xavier(7, width, rng), LayerNormWeights(width)};
}

void ObjectEmbeddingWeights::collect(const std::string& prefix, NamedTensors& out) const {
  feature_fc.collect(prefix + ".feature_fc", out);
  position_fc.collect(prefix + ".position_fc", out);
  norm.collect(prefix + ".norm", out);
}

Tensor embed_objects(const Tensor& features, const Tensor& boxes, const ObjectEmbeddingWeights& w) {
  if (features.rank() != 2 || features.dim(1) != w.feature_fc.in_features())
    throw ConfigError("object features " + to_string(features.shape()) + " do not match the configured width " +
                      std::to_string(w.feature_fc.in_features()));
  if (boxes.rank() != 2 || boxes.dim(0) != features.dim(0) || boxes.dim(1) != 4)
    throw DimensionError("boxes must be [Q, 4] alongside the features");
  return w.norm(w.feature_fc(features) + w.position_fc(position_features(boxes)));
}

TokenEmbeddingWeights TokenEmbeddingWeights::init(const LanguageModelConfig& c, Rng& rng) {
  return {uniform_parameter({c.vocab_size, c.width}, 0.5, rng), uniform_parameter({c.max_length, c.width}, 0.5, rng),
          uniform_parameter({c.segments, c.width}, 0.5, rng)};
}

void TokenEmbeddingWeights::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".word", word);
  out.emplace_back(prefix + ".position", position);
  out.emplace_back(prefix + ".segment", segment);
}

Tensor embed_tokens(const TokenSequence& seq, const TokenEmbeddingWeights& w) {
  if (seq.positions.size() != seq.size() || seq.segments.size() != seq.size())
    throw ContractError("token sequence fields differ in length");
  if (seq.size() == 0) throw ContractError("empty token sequence");
  auto check = [](const std::vector<std::size_t>& ids, const Tensor& table, const char* what) {
    for (std::size_t id : ids)
      if (id >= table.dim(0))
        throw ContractError(std::string(what) + " id " + std::to_string(id) + " outside table of " +
                            std::to_string(table.dim(0)));
  };
  check(seq.ids, w.word, "token");
  check(seq.positions, w.position, "position");
  check(seq.segments, w.segment, "segment");
  return gather_rows(w.word, seq.ids) + gather_rows(w.position, seq.positions) +
         gather_rows(w.segment, seq.segments);
}

MultimodalSequence concat_modalities(const Tensor& text, const Tensor& objects,
                                     const std::vector<std::uint8_t>& object_mask) {
  if (text.rank() != 2 || objects.rank() != 2 || text.dim(1) != objects.dim(1))
    throw DimensionError("text " + to_string(text.shape()) + " and objects " + to_string(objects.shape()) +
                         " must share the model width");
  const std::size_t t = text.dim(0), q = objects.dim(0);
  if (!object_mask.empty() && object_mask.size() != q) throw DimensionError("object mask length mismatch");
  MultimodalSequence mm;
  mm.embeddings = q == 0 ? text : concat({text, objects}, 0);
  mm.modality.assign(t, Modality::kText);
  mm.modality.resize(t + q, Modality::kObject);
  mm.key_mask.assign(t + q, 0);
  for (std::size_t i = 0; i < object_mask.size(); ++i) mm.key_mask[t + i] = object_mask[i];
  mm.text_length = t;
  return mm;
}

LanguageModelWeights LanguageModelWeights::init(const LanguageModelConfig& c, Rng& rng) {
  c.validate();
  LanguageModelWeights w;
  w.tokens = TokenEmbeddingWeights::init(c, rng);
  w.objects = ObjectEmbeddingWeights::xavier(c.object_feature_dim, c.width, rng);
  const AttentionConfig ac{c.width, c.heads, c.ffn_dim, 1, 1};
  for (std::size_t i = 0; i < c.layers; ++i) w.layers.push_back(EncoderLayerWeights::xavier(ac, rng));
  w.final_norm = LayerNormWeights(c.width);
  w.head_fc1 = Linear::xavier(c.width, c.head_hidden, rng);
  w.head_fc2 = Linear::xavier(c.head_hidden, c.answers, rng);
  return w;
}

NamedTensors LanguageModelWeights::parameters() const {
  NamedTensors out;
  tokens.collect("lm.tokens", out);
  objects.collect("lm.objects", out);
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect("lm.layers." + std::to_string(i), out);
  final_norm.collect("lm.final_norm", out);
  head_fc1.collect("lm.head.fc1", out);
  head_fc2.collect("lm.head.fc2", out);
  return out;
}

Tensor fuse_and_encode(const MultimodalSequence& mm, const LanguageModelWeights& w, std::size_t heads) {
  const std::size_t n = mm.size();
  if (mm.embeddings.rank() != 2 || mm.embeddings.dim(0) != n || mm.key_mask.size() != n)
    throw ContractError("multimodal sequence fields are inconsistent");
  bool any_masked = false;
  for (auto m : mm.key_mask) any_masked = any_masked || m;
  AttentionMask mask;
  if (any_masked) {
    mask.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) mask.col(static_cast<Eigen::Index>(j)).setConstant(mm.key_mask[j] != 0);
  }
  Tensor x = mm.embeddings;
  for (const auto& layer : w.layers) x = transformer_encoder_layer(x, Tensor(), layer, heads, any_masked ? &mask : nullptr);
  return w.final_norm(x);
}

Tensor vqa_head(const Tensor& encoded, const Linear& fc1, const Linear& fc2) {
  if (encoded.rank() != 2 || encoded.dim(0) == 0) throw DimensionError("encoded sequence must be [N, D], N > 0");
  Tensor pooled = slice(encoded, 0, 0, 1);
  Tensor logits = fc2(relu(fc1(pooled)));
  return reshape(logits, {logits.dim(1)});
}

Tensor bce_answer_loss(const Tensor& logits, const Tensor& targets) {
  for (double t : targets.data())
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError("answer targets must lie in [0, 1]");
  return bce_with_logits(logits, targets);
}

GatedObjects threshold_mask_gating(const DetectionSet& det, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("gating threshold must lie in (0, 1)");
  GatedObjects g;
  auto conf = det.confidence.data();
  for (std::size_t i = 0; i < conf.size(); ++i)
    if (conf[i] > tau) g.kept.push_back(i);
  if (g.kept.empty()) {
    if (conf.empty()) throw ContractError("gating an empty detection set");
    g.kept.push_back(static_cast<std::size_t>(std::max_element(conf.begin(), conf.end()) - conf.begin()));
    g.fallback = true;
  }
  g.mask = gather_rows(det.confidence, g.kept);
  g.features = scale_rows(gather_rows(det.features, g.kept), g.mask);
  g.boxes = gather_rows(det.boxes, g.kept);
  return g;
}

LanguageModel::LanguageModel(LanguageModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  weights_ = LanguageModelWeights::init(config_, rng);
}

Tensor LanguageModel::forward(const TokenSequence& question, const Tensor& object_features, const Tensor& boxes) const {
  return forward(question, object_features, boxes, nullptr);
}

Tensor LanguageModel::forward(const TokenSequence& question, const Tensor& object_features, const Tensor& boxes,
                              Tensor* object_projection) const {
  Tensor text = embed_tokens(question, weights_.tokens);
  if (object_features.rank() != 2 || object_features.dim(1) != weights_.objects.feature_fc.in_features())
    throw ConfigError("object features " + to_string(object_features.shape()) + " do not match the configured width");
  Tensor projected = weights_.objects.feature_fc(object_features);
  if (object_projection) *object_projection = projected;
  Tensor objects = weights_.objects.norm(projected + weights_.objects.position_fc(position_features(boxes)));
  Tensor encoded = fuse_and_encode(concat_modalities(text, objects), weights_, config_.heads);
  return vqa_head(encoded, weights_.head_fc1, weights_.head_fc2);
}

}  // namespace txt
