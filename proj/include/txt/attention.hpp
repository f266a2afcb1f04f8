#pragma once

// Dense multi-head attention, multi-scale deformable attention, and the
// transformer layers and encoders built from them.

#include <Eigen/Core>
#include <array>
#include <string>
#include <vector>

#include "txt/nn.hpp"

namespace txt {

struct AttentionConfig {
  std::size_t model_dim = 256;
  std::size_t heads = 8;
  std::size_t ffn_dim = 1024;
  std::size_t sampling_points = 4;
  std::size_t num_scales = 4;

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;
};

/// true marks a (query, key) pair that may not attend.
using AttentionMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct MultiHeadAttentionWeights {
  Linear query;
  Linear key;
  Linear value;
  Linear output;

  static MultiHeadAttentionWeights xavier(std::size_t width, Rng& rng);
  static MultiHeadAttentionWeights identity(std::size_t width);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Scaled dot-product attention per head (scale 1/sqrt(width/heads)), heads
/// concatenated and projected. Every query row must keep one unmasked key.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const MultiHeadAttentionWeights& w, std::size_t heads,
                            const AttentionMask* mask = nullptr);

/// Feature maps [H_s, W_s, D] ordered by increasing stride.
struct FeatureMapSet {
  std::vector<Tensor> maps;
  std::vector<int> strides;
  std::vector<Tensor> level_embeddings;  // per-scale [D]; may be empty

  std::size_t levels() const { return maps.size(); }
  std::size_t channels() const { return maps.empty() ? 0 : maps.front().dim(2); }
  std::size_t level_of_stride(int stride) const;
  void validate() const;
};

/// Row layout of levels flattened into one [N, D] token matrix.
struct LevelLayout {
  std::vector<std::array<std::size_t, 2>> extents;  // (H, W) per level
  std::vector<std::size_t> starts;

  static LevelLayout of(const FeatureMapSet& maps);
  static LevelLayout single(std::size_t h, std::size_t w);
  std::size_t levels() const { return extents.size(); }
  std::size_t total() const;
};

/// Concatenates every map's H*W rows, level by level.
Tensor flatten_levels(const FeatureMapSet& maps);

/// Normalized cell centres ((j + 0.5) / W, (i + 0.5) / H) of an H x W map.
Tensor reference_grid(std::size_t h, std::size_t w);

/// Fixed 2-D sinusoidal encoding [H*W, D]: first D/2 channels encode y, the
/// rest x.
Tensor sine_position_encoding(std::size_t h, std::size_t w, std::size_t channels);

struct DeformableAttentionWeights {
  Linear value_proj;
  Linear sampling_offsets;   // -> heads * levels * points * 2, (x, y) pixels
  Linear attention_logits;   // -> heads * levels * points
  Linear output_proj;
  std::size_t heads = 1;
  std::size_t levels = 1;
  std::size_t points = 1;

  /// Zero offset/logit weights with offset biases fanned out around the
  /// reference point, one direction per head.
  static DeformableAttentionWeights init(std::size_t width, std::size_t heads, std::size_t levels,
                                         std::size_t points, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Core sampler. `value` holds the flattened levels [N, D]; `reference_points`
/// [Nq, 2] normalized; `offsets` [Nq, heads*L*K*2] in pixels of each level;
/// `weights` [Nq, heads*L*K] already normalized. Head h reads channels
/// [h*D/heads, (h+1)*D/heads). Location on level l: ref * (W_l, H_l) - 0.5 + offset.
Tensor deformable_sampling(const Tensor& value, const LevelLayout& layout, const Tensor& reference_points,
                           const Tensor& offsets, const Tensor& weights, std::size_t heads, std::size_t points);

/// Multi-scale deformable attention: value projection, learned offsets and
/// logits from the queries, softmax jointly over the L*K samples of a head,
/// weighted bilinear samples, output projection.
Tensor ms_deform_attn(const Tensor& queries, const Tensor& reference_points, const Tensor& value_input,
                      const LevelLayout& layout, const DeformableAttentionWeights& w);
Tensor ms_deform_attn(const Tensor& queries, const Tensor& reference_points, const FeatureMapSet& maps,
                      const DeformableAttentionWeights& w);

/// Normalized sampling weights [Nq, heads*L*K] as used by ms_deform_attn.
Tensor deformable_attention_weights(const Tensor& queries, const DeformableAttentionWeights& w);

// Pre-norm transformer layers: x + Attn(LN(x)), then x + FFN(LN(x)).

struct EncoderLayerWeights {
  LayerNormWeights norm1;
  MultiHeadAttentionWeights self_attn;
  LayerNormWeights norm2;
  FeedForward ffn;

  static EncoderLayerWeights xavier(const AttentionConfig& config, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// `pos` may be undefined (no positional term).
Tensor transformer_encoder_layer(const Tensor& x, const Tensor& pos, const EncoderLayerWeights& w,
                                 std::size_t heads, const AttentionMask* mask = nullptr);

struct DecoderLayerWeights {
  LayerNormWeights norm1;
  MultiHeadAttentionWeights self_attn;
  LayerNormWeights norm2;
  MultiHeadAttentionWeights cross_attn;
  LayerNormWeights norm3;
  FeedForward ffn;

  static DecoderLayerWeights xavier(const AttentionConfig& config, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

Tensor transformer_decoder_layer(const Tensor& queries, const Tensor& query_pos, const Tensor& memory,
                                 const Tensor& memory_pos, const DecoderLayerWeights& w, std::size_t heads);

struct DeformableEncoderLayerWeights {
  LayerNormWeights norm1;
  DeformableAttentionWeights attn;
  LayerNormWeights norm2;
  FeedForward ffn;

  static DeformableEncoderLayerWeights init(const AttentionConfig& config, std::size_t levels, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Queries [Nq, D] attend to `values` [N, D] laid out by `layout`. With
/// queries == values this is deformable self-attention.
Tensor deformable_encoder_layer(const Tensor& queries, const Tensor& query_pos, const Tensor& reference_points,
                                const Tensor& values, const LevelLayout& layout,
                                const DeformableEncoderLayerWeights& w);

struct DeformableDecoderLayerWeights {
  LayerNormWeights norm1;
  MultiHeadAttentionWeights self_attn;
  LayerNormWeights norm2;
  DeformableAttentionWeights cross_attn;
  LayerNormWeights norm3;
  FeedForward ffn;

  static DeformableDecoderLayerWeights init(const AttentionConfig& config, std::size_t levels, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

Tensor deformable_decoder_layer(const Tensor& queries, const Tensor& query_pos, const Tensor& reference_points,
                                const Tensor& memory, const LevelLayout& layout,
                                const DeformableDecoderLayerWeights& w, std::size_t heads);

/// Query stride meaning "every scale queries" (full multi-scale encoder).
inline constexpr int kAllScales = 0;

struct ScalableEncoderWeights {
  int query_stride = kAllScales;
  std::vector<DeformableEncoderLayerWeights> layers;
  LayerNormWeights final_norm;

  /// The first layer samples all `levels`; later layers sample `levels` in
  /// all-scales mode and a single level otherwise.
  static ScalableEncoderWeights init(const AttentionConfig& config, std::size_t num_layers, int query_stride,
                                     std::size_t levels, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct EncodedMemory {
  Tensor tokens;  // [N, D]
  Tensor pos;     // [N, D]
  LevelLayout layout;
  std::vector<int> strides;
};

/// Positional term of every token: sine encoding plus the level embedding.
Tensor level_positions(const FeatureMapSet& maps, std::size_t level);

/// Encodes `maps`. With a concrete query stride the first layer queries only
/// that scale against keys of every scale and the rest refine the resulting
/// single map; kAllScales runs multi-scale self-attention in every layer.
EncodedMemory scalable_encoder(const FeatureMapSet& maps, int query_stride, const ScalableEncoderWeights& w);

}  // namespace txt
