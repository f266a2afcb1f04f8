#include "txt/nn.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace txt {

double Rng::normal() {
  // Box-Muller; u1 is kept away from zero.
  const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw ContractError("Rng::index with empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

Rng Rng::fork(std::uint64_t stream) { return Rng(engine_() ^ (0x9E3779B97F4A7C15ULL * (stream + 1))); }

Tensor make_parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

Tensor constant_parameter(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(element_count(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return make_parameter(std::move(shape), std::move(v));
}

Linear Linear::xavier(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  return {uniform_parameter({in, out}, bound, rng), constant_parameter({out}, 0.0)};
}

Linear Linear::zeros(std::size_t in, std::size_t out) {
  return {constant_parameter({in, out}, 0.0), constant_parameter({out}, 0.0)};
}

Linear Linear::identity(std::size_t n) {
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  return {make_parameter({n, n}, std::move(w)), constant_parameter({n}, 0.0)};
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LayerNormWeights::LayerNormWeights(std::size_t n)
    : gamma(constant_parameter({n}, 1.0)), beta(constant_parameter({n}, 0.0)) {}

void LayerNormWeights::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

FeedForward FeedForward::xavier(std::size_t width, std::size_t hidden, Rng& rng) {
  auto fc1 = Linear::xavier(width, hidden, rng);
  auto fc2 = Linear::xavier(hidden, width, rng);
  return {std::move(fc1), std::move(fc2)};
}

void FeedForward::collect(const std::string& prefix, NamedTensors& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

void zero_fill(Tensor& t) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
}

}  // namespace txt
