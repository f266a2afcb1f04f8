#pragma once

// Language-side model: object and token embeddings, joint transformer
// encoding over text and objects, answer head and confidence gating.

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "txt/detector.hpp"

namespace txt {

struct LanguageModelConfig {
  std::size_t vocab_size = 32;
  std::size_t max_length = 16;
  std::size_t segments = 2;
  std::size_t width = 768;
  std::size_t heads = 12;
  std::size_t ffn_dim = 3072;
  std::size_t layers = 12;
  std::size_t answers = 3129;
  std::size_t head_hidden = 1536;
  std::size_t object_feature_dim = 256;

  void validate() const;
  nlohmann::json to_json() const;
  static LanguageModelConfig from_json(const nlohmann::json& j);
};

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> segments;

  /// Positions 0..n-1, all in `segment`.
  static TokenSequence of(std::vector<std::size_t> ids, std::size_t segment = 0);
  std::size_t size() const { return ids.size(); }
};

/// [Q, 7] layout feature (x1, y1, x2, y2, w, h, w*h) from (cx, cy, w, h),
/// corners clipped to [0, 1].
Tensor position_features(const Tensor& boxes);

struct ObjectEmbeddingWeights {
  Linear feature_fc;
  Linear position_fc;
  LayerNormWeights norm;

  static ObjectEmbeddingWeights xavier(std::size_t feature_dim, std::size_t width, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// LN(FC(features) + FC(position_features(boxes))).
Tensor embed_objects(const Tensor& features, const Tensor& boxes, const ObjectEmbeddingWeights& w);

struct TokenEmbeddingWeights {
  Tensor word;      // [V, D]
  Tensor position;  // [max_length, D]
  Tensor segment;   // [segments, D]

  static TokenEmbeddingWeights init(const LanguageModelConfig& config, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Sum of word, position and segment rows per token.
Tensor embed_tokens(const TokenSequence& seq, const TokenEmbeddingWeights& w);

enum class Modality : std::uint8_t { kText, kObject };

struct MultimodalSequence {
  Tensor embeddings;               // [T + Q, D]
  std::vector<Modality> modality;  // per row
  std::vector<std::uint8_t> key_mask;  // 1 = row may not be attended to
  std::size_t text_length = 0;

  std::size_t size() const { return modality.size(); }
};

/// Text rows first, then object rows. `object_mask` (optional) hides objects.
MultimodalSequence concat_modalities(const Tensor& text, const Tensor& objects,
                                     const std::vector<std::uint8_t>& object_mask = {});

struct LanguageModelWeights {
  TokenEmbeddingWeights tokens;
  ObjectEmbeddingWeights objects;
  std::vector<EncoderLayerWeights> layers;
  LayerNormWeights final_norm;
  Linear head_fc1;
  Linear head_fc2;

  static LanguageModelWeights init(const LanguageModelConfig& config, Rng& rng);
  NamedTensors parameters() const;
};

/// Pre-norm encoder stack over the joint sequence, then a final norm.
Tensor fuse_and_encode(const MultimodalSequence& mm, const LanguageModelWeights& w, std::size_t heads);

/// Two-layer MLP on the first row of `encoded`; returns [A] logits.
Tensor vqa_head(const Tensor& encoded, const Linear& fc1, const Linear& fc2);

/// Mean binary cross-entropy with logits over answers.
Tensor bce_answer_loss(const Tensor& logits, const Tensor& targets);

struct GatedObjects {
  Tensor features;  // rows of kept objects scaled by their mask value
  Tensor boxes;
  std::vector<std::size_t> kept;
  Tensor mask;  // [kept] multiplicative factors
  bool fallback = false;
};

/// Keeps objects with confidence > tau and multiplies their features by
/// conf * [conf > tau], so the loss reaches the class logits through the
/// confidence. With no survivor the most confident object is kept alone.
GatedObjects threshold_mask_gating(const DetectionSet& det, double tau);

class LanguageModel {
 public:
  LanguageModel(LanguageModelConfig config, std::uint64_t seed);

  const LanguageModelConfig& config() const { return config_; }
  LanguageModelWeights& weights() { return weights_; }
  const LanguageModelWeights& weights() const { return weights_; }

  /// Answer logits for a question over a set of objects.
  Tensor forward(const TokenSequence& question, const Tensor& object_features, const Tensor& boxes) const;
  /// Same, also returning the object-projection output for attribution.
  Tensor forward(const TokenSequence& question, const Tensor& object_features, const Tensor& boxes,
                 Tensor* object_projection) const;

  NamedTensors parameters() const { return weights_.parameters(); }

 private:
  LanguageModelConfig config_;
  LanguageModelWeights weights_;
};

}  // namespace txt
