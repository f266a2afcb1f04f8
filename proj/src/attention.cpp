#include "txt/attention.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace txt {

void AttentionConfig::validate() const {
  if (heads == 0 || model_dim % heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (sampling_points == 0) throw ConfigError("sampling_points must be >= 1");
  if (num_scales == 0) throw ConfigError("num_scales must be >= 1");
  if (ffn_dim == 0) throw ConfigError("ffn_dim must be >= 1");
}

MultiHeadAttentionWeights MultiHeadAttentionWeights::xavier(std::size_t width, Rng& rng) {
  MultiHeadAttentionWeights w;
  w.query = Linear::xavier(width, width, rng);
  w.key = Linear::xavier(width, width, rng);
  w.value = Linear::xavier(width, width, rng);
  w.output = Linear::xavier(width, width, rng);
  return w;
}

MultiHeadAttentionWeights MultiHeadAttentionWeights::identity(std::size_t width) {
  return {Linear::identity(width), Linear::identity(width), Linear::identity(width), Linear::identity(width)};
}

void MultiHeadAttentionWeights::collect(const std::string& prefix, NamedTensors& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const MultiHeadAttentionWeights& w, std::size_t heads, const AttentionMask* mask) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2 || keys.dim(0) != values.dim(0)) {
    throw DimensionError("multi_head_attention: queries " + to_string(queries.shape()) + ", keys " +
                         to_string(keys.shape()) + ", values " + to_string(values.shape()));
  }
  const std::size_t nq = queries.dim(0), nk = keys.dim(0);
  const std::size_t width = w.query.out_features();
  if (heads == 0 || width % heads != 0) throw ConfigError("attention width not divisible by heads");
  std::vector<std::uint8_t> flat_mask;
  if (mask) {
    if (static_cast<std::size_t>(mask->rows()) != nq || static_cast<std::size_t>(mask->cols()) != nk) {
      throw DimensionError("attention mask must be " + std::to_string(nq) + "x" + std::to_string(nk));
    }
    flat_mask.resize(nq * nk);
    for (std::size_t i = 0; i < nq; ++i) {
      bool any_open = false;
      for (std::size_t j = 0; j < nk; ++j) {
        flat_mask[i * nk + j] = (*mask)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) ? 1 : 0;
        any_open |= !flat_mask[i * nk + j];
      }
      if (!any_open) throw ContractError("attention mask leaves query row " + std::to_string(i) + " without keys");
    }
  }
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = w.query(queries);
  Tensor k = w.key(keys);
  Tensor v = w.value(values);
  std::vector<Tensor> per_head;
  per_head.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice(q, 1, h * dh, (h + 1) * dh);
    Tensor kh = slice(k, 1, h * dh, (h + 1) * dh);
    Tensor vh = slice(v, 1, h * dh, (h + 1) * dh);
    Tensor scores = matmul(qh, transpose(kh)) * scale;
    if (mask) scores = masked_fill(scores, flat_mask, -std::numeric_limits<double>::infinity());
    per_head.push_back(matmul(softmax(scores, 1), vh));
  }
  Tensor merged = heads == 1 ? per_head.front() : concat(per_head, 1);
  return w.output(merged);
}

std::size_t FeatureMapSet::level_of_stride(int stride) const {
  for (std::size_t l = 0; l < strides.size(); ++l)
    if (strides[l] == stride) return l;
  throw ConfigError("stride " + std::to_string(stride) + " is not present in the feature map set");
}

void FeatureMapSet::validate() const {
  if (maps.empty()) throw ConfigError("empty feature map set");
  if (strides.size() != maps.size()) throw ConfigError("one stride per feature map required");
  const std::size_t d = channels();
  for (std::size_t l = 0; l < maps.size(); ++l) {
    if (maps[l].rank() != 3 || maps[l].dim(2) != d) {
      throw DimensionError("feature map " + std::to_string(l) + " has shape " + to_string(maps[l].shape()) +
                           ", expected [H,W," + std::to_string(d) + "]");
    }
    if (l > 0 && strides[l] <= strides[l - 1]) throw ConfigError("feature map strides must increase");
  }
  if (!level_embeddings.empty() && level_embeddings.size() != maps.size()) {
    throw ConfigError("level embeddings must match the number of maps");
  }
}

LevelLayout LevelLayout::of(const FeatureMapSet& maps) {
  LevelLayout layout;
  std::size_t start = 0;
  for (const auto& m : maps.maps) {
    layout.extents.push_back({m.dim(0), m.dim(1)});
    layout.starts.push_back(start);
    start += m.dim(0) * m.dim(1);
  }
  return layout;
}

LevelLayout LevelLayout::single(std::size_t h, std::size_t w) { return LevelLayout{{{h, w}}, {0}}; }

std::size_t LevelLayout::total() const {
  return extents.empty() ? 0 : starts.back() + extents.back()[0] * extents.back()[1];
}

Tensor flatten_levels(const FeatureMapSet& maps) {
  std::vector<Tensor> rows;
  for (const auto& m : maps.maps) rows.push_back(reshape(m, {m.dim(0) * m.dim(1), m.dim(2)}));
  return rows.size() == 1 ? rows.front() : concat(rows, 0);
}

Tensor reference_grid(std::size_t h, std::size_t w) {
  std::vector<double> v(h * w * 2);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      v[(i * w + j) * 2] = (static_cast<double>(j) + 0.5) / static_cast<double>(w);
      v[(i * w + j) * 2 + 1] = (static_cast<double>(i) + 0.5) / static_cast<double>(h);
    }
  return Tensor({h * w, 2}, std::move(v));
}

Tensor sine_position_encoding(std::size_t h, std::size_t w, std::size_t channels) {
  const std::size_t half = channels / 2;
  std::vector<double> v(h * w * channels, 0.0);
  auto encode = [half](double pos, std::size_t k) {
    const double dim_t = std::pow(10000.0, 2.0 * static_cast<double>(k / 2) / static_cast<double>(std::max<std::size_t>(half, 1)));
    return (k % 2 == 0) ? std::sin(pos / dim_t) : std::cos(pos / dim_t);
  };
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double py = (static_cast<double>(i) + 0.5) / static_cast<double>(h) * 2.0 * std::numbers::pi;
      const double px = (static_cast<double>(j) + 0.5) / static_cast<double>(w) * 2.0 * std::numbers::pi;
      double* row = v.data() + (i * w + j) * channels;
      for (std::size_t k = 0; k < half; ++k) {
        row[k] = encode(py, k);
        row[half + k] = encode(px, k);
      }
    }
  return Tensor({h * w, channels}, std::move(v));
}

DeformableAttentionWeights DeformableAttentionWeights::init(std::size_t width, std::size_t heads,
                                                            std::size_t levels, std::size_t points, Rng& rng) {
  DeformableAttentionWeights w;
  w.heads = heads;
  w.levels = levels;
  w.points = points;
  w.value_proj = Linear::xavier(width, width, rng);
  w.output_proj = Linear::xavier(width, width, rng);
  w.sampling_offsets = Linear::zeros(width, heads * levels * points * 2);
  w.attention_logits = Linear::zeros(width, heads * levels * points);
  auto bias = w.sampling_offsets.bias.mutable_data();
  for (std::size_t h = 0; h < heads; ++h) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(heads);
    double dx = std::cos(theta), dy = std::sin(theta);
    const double norm = std::max(std::abs(dx), std::abs(dy));
    dx /= norm;
    dy /= norm;
    for (std::size_t l = 0; l < levels; ++l)
      for (std::size_t k = 0; k < points; ++k) {
        const std::size_t idx = ((h * levels + l) * points + k) * 2;
        bias[idx] = dx * static_cast<double>(k + 1);
        bias[idx + 1] = dy * static_cast<double>(k + 1);
      }
  }
  return w;
}

void DeformableAttentionWeights::collect(const std::string& prefix, NamedTensors& out) const {
  value_proj.collect(prefix + ".value_proj", out);
  sampling_offsets.collect(prefix + ".sampling_offsets", out);
  attention_logits.collect(prefix + ".attention_logits", out);
  output_proj.collect(prefix + ".output_proj", out);
}

namespace {

struct Tap {
  std::ptrdiff_t row[4];
  double weight[4];
  double dwx[4];
  double dwy[4];
};

// Bilinear taps of pixel location (x, y) on an h x w level whose first row
// sits at `start` in the flattened value matrix; row < 0 marks padding.
Tap bilinear_taps(double x, double y, std::size_t h, std::size_t w, std::size_t start) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
  auto cell = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> std::ptrdiff_t {
    if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(w)) return -1;
    return static_cast<std::ptrdiff_t>(start) + yy * static_cast<std::ptrdiff_t>(w) + xx;
  };
  return Tap{{cell(y0, x0), cell(y0, x0 + 1), cell(y0 + 1, x0), cell(y0 + 1, x0 + 1)},
             {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay},
             {-(1 - ay), (1 - ay), -ay, ay},
             {-(1 - ax), -ax, (1 - ax), ax}};
}

}  // namespace

Tensor deformable_sampling(const Tensor& value, const LevelLayout& layout, const Tensor& reference_points,
                           const Tensor& offsets, const Tensor& weights, std::size_t heads, std::size_t points) {
  const std::size_t levels = layout.levels();
  if (value.rank() != 2 || value.dim(0) != layout.total()) {
    throw DimensionError("deformable_sampling: value " + to_string(value.shape()) + " does not cover " +
                         std::to_string(layout.total()) + " tokens");
  }
  const std::size_t d = value.dim(1);
  if (heads == 0 || d % heads != 0) throw ConfigError("deformable_sampling: width not divisible by heads");
  const std::size_t nq = reference_points.dim(0);
  const std::size_t samples = heads * levels * points;
  if (reference_points.shape() != Shape{nq, 2} || offsets.shape() != Shape{nq, samples * 2} ||
      weights.shape() != Shape{nq, samples}) {
    throw DimensionError("deformable_sampling: refs " + to_string(reference_points.shape()) + ", offsets " +
                         to_string(offsets.shape()) + ", weights " + to_string(weights.shape()) + " for " +
                         std::to_string(heads) + " heads, " + std::to_string(levels) + " levels, " +
                         std::to_string(points) + " points");
  }
  const std::size_t dh = d / heads;
  auto vv = value.data();
  auto rv = reference_points.data();
  auto ov = offsets.data();
  auto wv = weights.data();
  auto location = [&, levels, points](std::size_t q, std::size_t h, std::size_t l, std::size_t k) {
    const std::size_t s = (h * levels + l) * points + k;
    const auto [lh, lw] = layout.extents[l];
    const double x = rv[q * 2] * static_cast<double>(lw) - 0.5 + ov[(q * samples + s) * 2];
    const double y = rv[q * 2 + 1] * static_cast<double>(lh) - 0.5 + ov[(q * samples + s) * 2 + 1];
    return bilinear_taps(x, y, lh, lw, layout.starts[l]);
  };
  std::vector<double> out(nq * d, 0.0);
  for (std::size_t q = 0; q < nq; ++q)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < levels; ++l)
        for (std::size_t k = 0; k < points; ++k) {
          const Tap tap = location(q, h, l, k);
          const double a = wv[q * samples + (h * levels + l) * points + k];
          double* dst = out.data() + q * d + h * dh;
          for (int t = 0; t < 4; ++t) {
            if (tap.row[t] < 0) continue;
            const double* src = vv.data() + static_cast<std::size_t>(tap.row[t]) * d + h * dh;
            const double c = a * tap.weight[t];
            for (std::size_t ch = 0; ch < dh; ++ch) dst[ch] += c * src[ch];
          }
        }
  mac_counter() += nq * samples * dh * 5;
  return detail::make_result(
      "deformable_sampling", {nq, d}, std::move(out), {value, reference_points, offsets, weights},
      [=]() -> std::function<void(std::span<const double>)> {
        return [=](std::span<const double> g) {
          auto grad = [](const Tensor& t) -> double* {
            return t.requires_grad() ? detail::grad_buffer(*t.impl()).data() : nullptr;
          };
          double* gv = grad(value);
          double* gr = grad(reference_points);
          double* go = grad(offsets);
          double* gw = grad(weights);
          auto vv = value.data();
          auto rv = reference_points.data();
          auto ov = offsets.data();
          auto wv = weights.data();
          for (std::size_t q = 0; q < nq; ++q)
            for (std::size_t h = 0; h < heads; ++h)
              for (std::size_t l = 0; l < levels; ++l)
                for (std::size_t k = 0; k < points; ++k) {
                  const std::size_t s = (h * levels + l) * points + k;
                  const auto [lh, lw] = layout.extents[l];
                  const double x = rv[q * 2] * static_cast<double>(lw) - 0.5 + ov[(q * samples + s) * 2];
                  const double y = rv[q * 2 + 1] * static_cast<double>(lh) - 0.5 + ov[(q * samples + s) * 2 + 1];
                  const Tap tap = bilinear_taps(x, y, lh, lw, layout.starts[l]);
                  const double a = wv[q * samples + s];
                  const double* gq = g.data() + q * d + h * dh;
                  double g_weight = 0.0, g_x = 0.0, g_y = 0.0;
                  for (int t = 0; t < 4; ++t) {
                    if (tap.row[t] < 0) continue;
                    const std::size_t base = static_cast<std::size_t>(tap.row[t]) * d + h * dh;
                    double dot = 0.0;
                    for (std::size_t ch = 0; ch < dh; ++ch) {
                      dot += gq[ch] * vv[base + ch];
                      if (gv) gv[base + ch] += a * tap.weight[t] * gq[ch];
                    }
                    g_weight += tap.weight[t] * dot;
                    g_x += a * tap.dwx[t] * dot;
                    g_y += a * tap.dwy[t] * dot;
                  }
                  if (gw) gw[q * samples + s] += g_weight;
                  if (go) {
                    go[(q * samples + s) * 2] += g_x;
                    go[(q * samples + s) * 2 + 1] += g_y;
                  }
                  if (gr) {
                    gr[q * 2] += g_x * static_cast<double>(lw);
                    gr[q * 2 + 1] += g_y * static_cast<double>(lh);
                  }
                }
        };
      });
}

Tensor deformable_attention_weights(const Tensor& queries, const DeformableAttentionWeights& w) {
  const std::size_t nq = queries.dim(0), per_head = w.levels * w.points;
  Tensor logits = reshape(w.attention_logits(queries), {nq * w.heads, per_head});
  return reshape(softmax(logits, 1), {nq, w.heads * per_head});
}

Tensor ms_deform_attn(const Tensor& queries, const Tensor& reference_points, const Tensor& value_input,
                      const LevelLayout& layout, const DeformableAttentionWeights& w) {
  if (w.levels != layout.levels()) {
    throw ConfigError("deformable attention weights expect " + std::to_string(w.levels) + " levels, got " +
                      std::to_string(layout.levels()));
  }
  if (reference_points.rank() != 2 || reference_points.dim(1) != 2 || reference_points.dim(0) != queries.dim(0)) {
    throw DimensionError("ms_deform_attn: reference points " + to_string(reference_points.shape()) + " for queries " +
                         to_string(queries.shape()));
  }
  Tensor value = w.value_proj(value_input);
  Tensor offsets = w.sampling_offsets(queries);
  Tensor weights = deformable_attention_weights(queries, w);
  return w.output_proj(deformable_sampling(value, layout, reference_points, offsets, weights, w.heads, w.points));
}

Tensor ms_deform_attn(const Tensor& queries, const Tensor& reference_points, const FeatureMapSet& maps,
                      const DeformableAttentionWeights& w) {
  maps.validate();
  return ms_deform_attn(queries, reference_points, flatten_levels(maps), LevelLayout::of(maps), w);
}

EncoderLayerWeights EncoderLayerWeights::xavier(const AttentionConfig& config, Rng& rng) {
  EncoderLayerWeights w;
  w.norm1 = LayerNormWeights(config.model_dim);
  w.self_attn = MultiHeadAttentionWeights::xavier(config.model_dim, rng);
  w.norm2 = LayerNormWeights(config.model_dim);
  w.ffn = FeedForward::xavier(config.model_dim, config.ffn_dim, rng);
  return w;
}

void EncoderLayerWeights::collect(const std::string& prefix, NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  self_attn.collect(prefix + ".self_attn", out);
  norm2.collect(prefix + ".norm2", out);
  ffn.collect(prefix + ".ffn", out);
}

namespace {

Tensor with_pos(const Tensor& x, const Tensor& pos) { return pos.defined() ? x + pos : x; }

}  // namespace

Tensor transformer_encoder_layer(const Tensor& x, const Tensor& pos, const EncoderLayerWeights& w,
                                 std::size_t heads, const AttentionMask* mask) {
  Tensor h = w.norm1(x);
  Tensor qk = with_pos(h, pos);
  Tensor y = x + multi_head_attention(qk, qk, h, w.self_attn, heads, mask);
  return y + w.ffn(w.norm2(y));
}

DecoderLayerWeights DecoderLayerWeights::xavier(const AttentionConfig& config, Rng& rng) {
  DecoderLayerWeights w;
  w.norm1 = LayerNormWeights(config.model_dim);
  w.self_attn = MultiHeadAttentionWeights::xavier(config.model_dim, rng);
  w.norm2 = LayerNormWeights(config.model_dim);
  w.cross_attn = MultiHeadAttentionWeights::xavier(config.model_dim, rng);
  w.norm3 = LayerNormWeights(config.model_dim);
  w.ffn = FeedForward::xavier(config.model_dim, config.ffn_dim, rng);
  return w;
}

void DecoderLayerWeights::collect(const std::string& prefix, NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  self_attn.collect(prefix + ".self_attn", out);
  norm2.collect(prefix + ".norm2", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  norm3.collect(prefix + ".norm3", out);
  ffn.collect(prefix + ".ffn", out);
}

Tensor transformer_decoder_layer(const Tensor& queries, const Tensor& query_pos, const Tensor& memory,
                                 const Tensor& memory_pos, const DecoderLayerWeights& w, std::size_t heads) {
  Tensor h = w.norm1(queries);
  Tensor qk = with_pos(h, query_pos);
  Tensor t = queries + multi_head_attention(qk, qk, h, w.self_attn, heads);
  h = w.norm2(t);
  t = t + multi_head_attention(with_pos(h, query_pos), with_pos(memory, memory_pos), memory, w.cross_attn, heads);
  return t + w.ffn(w.norm3(t));
}

DeformableEncoderLayerWeights DeformableEncoderLayerWeights::init(const AttentionConfig& config, std::size_t levels,
                                                                  Rng& rng) {
  DeformableEncoderLayerWeights w;
  w.norm1 = LayerNormWeights(config.model_dim);
  w.attn = DeformableAttentionWeights::init(config.model_dim, config.heads, levels, config.sampling_points, rng);
  w.norm2 = LayerNormWeights(config.model_dim);
  w.ffn = FeedForward::xavier(config.model_dim, config.ffn_dim, rng);
  return w;
}

void DeformableEncoderLayerWeights::collect(const std::string& prefix, NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  ffn.collect(prefix + ".ffn", out);
}

Tensor deformable_encoder_layer(const Tensor& queries, const Tensor& query_pos, const Tensor& reference_points,
                                const Tensor& values, const LevelLayout& layout,
                                const DeformableEncoderLayerWeights& w) {
  Tensor h = w.norm1(queries);
  Tensor v = queries.id() == values.id() ? h : w.norm1(values);
  Tensor y = queries + ms_deform_attn(with_pos(h, query_pos), reference_points, v, layout, w.attn);
  return y + w.ffn(w.norm2(y));
}

DeformableDecoderLayerWeights DeformableDecoderLayerWeights::init(const AttentionConfig& config, std::size_t levels,
                                                                  Rng& rng) {
  DeformableDecoderLayerWeights w;
  w.norm1 = LayerNormWeights(config.model_dim);
  w.self_attn = MultiHeadAttentionWeights::xavier(config.model_dim, rng);
  w.norm2 = LayerNormWeights(config.model_dim);
  w.cross_attn = DeformableAttentionWeights::init(config.model_dim, config.heads, levels, config.sampling_points, rng);
  w.norm3 = LayerNormWeights(config.model_dim);
  w.ffn = FeedForward::xavier(config.model_dim, config.ffn_dim, rng);
  return w;
}

void DeformableDecoderLayerWeights::collect(const std::string& prefix, NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  self_attn.collect(prefix + ".self_attn", out);
  norm2.collect(prefix + ".norm2", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  norm3.collect(prefix + ".norm3", out);
  ffn.collect(prefix + ".ffn", out);
}

Tensor deformable_decoder_layer(const Tensor& queries, const Tensor& query_pos, const Tensor& reference_points,
                                const Tensor& memory, const LevelLayout& layout,
                                const DeformableDecoderLayerWeights& w, std::size_t heads) {
  Tensor h = w.norm1(queries);
  Tensor qk = with_pos(h, query_pos);
  Tensor t = queries + multi_head_attention(qk, qk, h, w.self_attn, heads);
  h = w.norm2(t);
  t = t + ms_deform_attn(with_pos(h, query_pos), reference_points, memory, layout, w.cross_attn);
  return t + w.ffn(w.norm3(t));
}

ScalableEncoderWeights ScalableEncoderWeights::init(const AttentionConfig& config, std::size_t num_layers,
                                                    int query_stride, std::size_t levels, Rng& rng) {
  config.validate();
  if (num_layers == 0) throw ConfigError("encoder needs at least one layer");
  ScalableEncoderWeights w;
  w.query_stride = query_stride;
  for (std::size_t i = 0; i < num_layers; ++i) {
    const std::size_t l = (i == 0 || query_stride == kAllScales) ? levels : 1;
    w.layers.push_back(DeformableEncoderLayerWeights::init(config, l, rng));
  }
  w.final_norm = LayerNormWeights(config.model_dim);
  return w;
}

void ScalableEncoderWeights::collect(const std::string& prefix, NamedTensors& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".layers." + std::to_string(i), out);
  final_norm.collect(prefix + ".final_norm", out);
}

Tensor level_positions(const FeatureMapSet& maps, std::size_t level) {
  const auto& m = maps.maps.at(level);
  Tensor pos = sine_position_encoding(m.dim(0), m.dim(1), m.dim(2));
  if (!maps.level_embeddings.empty()) pos = pos + broadcast_rows(maps.level_embeddings[level], m.dim(0) * m.dim(1));
  return pos;
}

EncodedMemory scalable_encoder(const FeatureMapSet& maps, int query_stride, const ScalableEncoderWeights& w) {
  maps.validate();
  const std::size_t levels = maps.levels();
  if (w.layers.empty()) throw ConfigError("encoder has no layers");
  if (w.layers.front().attn.levels != levels) {
    throw ConfigError("encoder expects " + std::to_string(w.layers.front().attn.levels) + " scales, got " +
                      std::to_string(levels));
  }
  const LevelLayout all_layout = LevelLayout::of(maps);
  const Tensor all_tokens = flatten_levels(maps);

  if (query_stride == kAllScales) {
    std::vector<Tensor> pos_parts, ref_parts;
    for (std::size_t l = 0; l < levels; ++l) {
      pos_parts.push_back(level_positions(maps, l));
      ref_parts.push_back(reference_grid(maps.maps[l].dim(0), maps.maps[l].dim(1)));
    }
    Tensor pos = levels == 1 ? pos_parts.front() : concat(pos_parts, 0);
    Tensor refs = levels == 1 ? ref_parts.front() : concat(ref_parts, 0);
    Tensor x = all_tokens;
    for (const auto& layer : w.layers) {
      if (layer.attn.levels != levels) throw ConfigError("all-scales encoder layer must sample every scale");
      x = deformable_encoder_layer(x, pos, refs, x, all_layout, layer);
    }
    return {w.final_norm(x), pos, all_layout, maps.strides};
  }

  const std::size_t lq = maps.level_of_stride(query_stride);
  const auto& qmap = maps.maps[lq];
  const std::size_t h = qmap.dim(0), wd = qmap.dim(1);
  Tensor pos = level_positions(maps, lq);
  Tensor refs = reference_grid(h, wd);
  Tensor x = reshape(qmap, {h * wd, qmap.dim(2)});
  x = deformable_encoder_layer(x, pos, refs, all_tokens, all_layout, w.layers.front());
  const LevelLayout single = LevelLayout::single(h, wd);
  for (std::size_t i = 1; i < w.layers.size(); ++i) {
    if (w.layers[i].attn.levels != 1) throw ConfigError("single-map encoder layers must sample one scale");
    x = deformable_encoder_layer(x, pos, refs, x, single, w.layers[i]);
  }
  return {w.final_norm(x), pos, single, {query_stride}};
}

}  // namespace txt
