#pragma once

// Parameter containers and initialization shared by every model component.

#include <cstdint>
#include <random>
#include <string>

#include "txt/ops.hpp"
#include "txt/serialize.hpp"

namespace txt {

/// Seeded generator with library-independent distributions, so a seed gives
/// the same stream on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  /// Independent generator derived from this one's seed stream.
  Rng fork(std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
};

Tensor make_parameter(Shape shape, std::vector<double> values);
Tensor constant_parameter(Shape shape, double value);
Tensor uniform_parameter(Shape shape, double bound, Rng& rng);

/// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear xavier(std::size_t in, std::size_t out, Rng& rng);
  static Linear zeros(std::size_t in, std::size_t out);
  static Linear identity(std::size_t n);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct LayerNormWeights {
  Tensor gamma;
  Tensor beta;

  LayerNormWeights() = default;
  explicit LayerNormWeights(std::size_t n);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, 1e-5); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Pointwise two-layer feed-forward block with ReLU.
struct FeedForward {
  Linear fc1;
  Linear fc2;

  static FeedForward xavier(std::size_t width, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Sets every value of every tensor to zero; for tests and ablations.
void zero_fill(Tensor& t);

}  // namespace txt
