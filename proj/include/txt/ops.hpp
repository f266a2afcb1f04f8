#pragma once

// Differentiable operations over txt::Tensor. All functions record a graph
// node when grad mode is on and an operand requires grad.

#include <cstdint>
#include <vector>

#include "txt/tensor.hpp"

namespace txt {

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator*(const Tensor& x, double c) { return mul_scalar(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return mul_scalar(x, c); }
inline Tensor operator-(const Tensor& x) { return mul_scalar(x, -1.0); }
inline Tensor operator-(double c, const Tensor& x) { return add_scalar(mul_scalar(x, -1.0), c); }

// Broadcasting helpers.
/// x[..., n] + b[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// [C] or [1,C] repeated to [rows, C].
Tensor broadcast_rows(const Tensor& x, std::size_t rows);
/// x[N,C] with row i multiplied by s[i].
Tensor scale_rows(const Tensor& x, const Tensor& s);

// Unary.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// log(1 + e^x), computed without overflow.
Tensor softplus(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
/// Values clipped to [lo, hi]; gradient is zero where clipping is active.
Tensor clamp(const Tensor& x, double lo, double hi);
/// log(x / (1 - x)) with both sides clamped away from zero by eps.
Tensor inverse_sigmoid(const Tensor& x, double eps = 1e-5);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor max(const Tensor& x, std::size_t axis);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then scales by gamma and shifts by beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Shape manipulation.
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);

/// Entries where mask != 0 are replaced by `value` and receive no gradient.
Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, double value);

/// HWC convolution. x[H,W,Cin], weight[kh,kw,Cin,Cout], bias[Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// Bilinear interpolation of map[H,W,C] at points[P,2] given as (x, y) pixel
/// coordinates, x along W and y along H; (j, i) lands exactly on map[i, j].
/// Neighbours outside the grid contribute zero. Differentiable w.r.t. both
/// the map values and the point coordinates.
Tensor bilinear_sample(const Tensor& map, const Tensor& points);

// Losses.
/// Mean binary cross-entropy between sigmoid(logits) and targets.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
/// Weighted mean of -log softmax(logits)[label] over rows; weights indexed by
/// class (empty = uniform). Normalized by the summed weights of the labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels,
                     const std::vector<double>& class_weights = {});

}  // namespace txt
