#pragma once

// Dense row-major tensor of doubles with reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, so a parameter
// held by a model and the same parameter referenced from a recorded graph are
// one object. Results of differentiable operations remember their inputs
// through a GraphNode until the last handle to them goes away.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace txt {

using Shape = std::vector<std::size_t>;

/// Operand extents do not fit the operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A configuration value is missing or inconsistent.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

namespace detail {

struct TensorImpl;

struct GraphNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives d(loss)/d(output) and accumulates into the inputs' grads.
  std::function<void(std::span<const double>)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<GraphNode> node;  // null for leaves
};

// Grad buffer of `impl`, zero-filled on first use.
std::vector<double>& grad_buffer(TensorImpl& impl);

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view. Meant for leaves (optimizer updates, test perturbation);
  // mutating a tensor already recorded in a graph invalidates that graph.
  std::span<double> mutable_data();

  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  Tensor grad_tensor() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Leaf grads accumulate across calls;
  /// intermediate grads are reset at the start of every sweep.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy of the values as a fresh leaf.
  Tensor clone() const;

  const detail::TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Forward multiply-accumulate counter for the calling thread. Matmul,
/// convolution and deformable sampling add to it.
std::uint64_t& mac_counter();

namespace detail {

// Builds the result of an operation. Records a node only when grad mode is on
// and some input requires grad; `make_backward` is invoked lazily in that case.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs,
                   const std::function<std::function<void(std::span<const double>)>()>& make_backward);

}  // namespace detail

}  // namespace txt
