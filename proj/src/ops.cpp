#include "txt/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace txt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using Backward = std::function<void(std::span<const double>)>;

template <class MakeBackward>
Tensor record(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
              MakeBackward&& make) {
  return detail::make_result(op, std::move(shape), std::move(values), std::move(inputs),
                             std::forward<MakeBackward>(make));
}

// Grad buffer of t when it participates in differentiation, else nullptr.
double* grad_of(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  return detail::grad_buffer(*t.impl()).data();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " differ");
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
  }
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " invalid for " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Elementwise unary op from value and derivative functors.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return record(op, x.shape(), std::move(out), {x}, [x, df]() -> Backward {
    return [x, df](std::span<const double> g) {
      double* gx = grad_of(x);
      if (!gx) return;
      auto xv = x.data();
      for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * df(xv[i]);
    };
  });
}

double stable_softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  mac_counter() += m * k * n;
  return record("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n]() -> Backward {
    return [a, b, m, k, n](std::span<const double> g) {
      MapC gm(g.data(), m, n);
      if (double* ga = grad_of(a)) Map(ga, m, k).noalias() += gm * MapC(b.data().data(), k, n).transpose();
      if (double* gb = grad_of(b)) Map(gb, k, n).noalias() += MapC(a.data().data(), m, k).transpose() * gm;
    };
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  Map(out.data(), n, m) = MapC(a.data().data(), m, n).transpose();
  return record("transpose", {n, m}, std::move(out), {a}, [a, m, n]() -> Backward {
    return [a, m, n](std::span<const double> g) {
      if (double* ga = grad_of(a)) Map(ga, m, n) += MapC(g.data(), n, m).transpose();
    };
  });
}

namespace {

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_same_shape(op, a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  return record(op, a.shape(), std::move(out), {a, b}, [a, b, da, db]() -> Backward {
    return [a, b, da, db](std::span<const double> g) {
      auto av = a.data(), bv = b.data();
      if (double* ga = grad_of(a))
        for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[i] * da(av[i], bv[i]);
      if (double* gb = grad_of(b))
        for (std::size_t i = 0; i < bv.size(); ++i) gb[i] += g[i] * db(av[i], bv[i]);
    };
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary("div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
}

// Ties send the gradient to the first operand.
Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary("maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
                [](double x, double y) { return x >= y ? 1.0 : 0.0; },
                [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary("minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
                [](double x, double y) { return x <= y ? 1.0 : 0.0; },
                [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary("mul_scalar", x, [c](double v) { return v * c; }, [c](double) { return c; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  const std::size_t n = bias.dim(0), rows = x.numel() / n;
  auto xv = x.data();
  auto bv = bias.data();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  return record("add_bias", x.shape(), std::move(out), {x, bias}, [x, bias, n, rows]() -> Backward {
    return [x, bias, n, rows](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      if (double* gb = grad_of(bias))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    };
  });
}

Tensor broadcast_rows(const Tensor& x, std::size_t rows) {
  if (!(x.rank() == 1 || (x.rank() == 2 && x.dim(0) == 1))) {
    throw DimensionError("broadcast_rows: expected [C] or [1,C], got " + to_string(x.shape()));
  }
  const std::size_t c = x.numel();
  auto xv = x.data();
  std::vector<double> out(rows * c);
  for (std::size_t r = 0; r < rows; ++r) std::copy(xv.begin(), xv.end(), out.begin() + r * c);
  return record("broadcast_rows", {rows, c}, std::move(out), {x}, [x, rows, c]() -> Backward {
    return [x, rows, c](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gx[j] += g[r * c + j];
    };
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_rank("scale_rows", x, 2);
  if (s.numel() != x.dim(0)) {
    throw DimensionError("scale_rows: scale " + to_string(s.shape()) + " vs rows of " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  auto xv = x.data();
  auto sv = s.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * sv[i];
  return record("scale_rows", x.shape(), std::move(out), {x, s}, [x, s, n, c]() -> Backward {
    return [x, s, n, c](std::span<const double> g) {
      auto xv = x.data();
      auto sv = s.data();
      double* gx = grad_of(x);
      double* gs = grad_of(s);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          if (gx) gx[i * c + j] += g[i * c + j] * sv[i];
          if (gs) gs[i] += g[i * c + j] * xv[i * c + j];
        }
    };
  });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double v) {
    const double s = stable_sigmoid(v);
    return s * (1.0 - s);
  });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double v) {
    const double t = std::tanh(v);
    return 1.0 - t * t;
  });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor softplus(const Tensor& x) { return unary("softplus", x, stable_softplus, stable_sigmoid); }

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](double v) { return std::abs(v); },
               [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor pow(const Tensor& x, double exponent) {
  return unary("pow", x, [exponent](double v) { return std::pow(v, exponent); },
               [exponent](double v) { return exponent == 0.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor inverse_sigmoid(const Tensor& x, double eps) {
  auto f = [eps](double v) {
    v = std::clamp(v, 0.0, 1.0);
    return std::log(std::max(v, eps) / std::max(1.0 - v, eps));
  };
  auto df = [eps](double v) {
    if (v < 0.0 || v > 1.0) return 0.0;
    double d = 0.0;
    if (v > eps) d += 1.0 / v;
    if (1.0 - v > eps) d += 1.0 / (1.0 - v);
    return d;
  };
  return unary("inverse_sigmoid", x, f, df);
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return record("sum", {}, {s}, {x}, [x]() -> Backward {
    return [x](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
    };
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto xv = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
  return record("sum_axis", std::move(out_shape), std::move(out), {x}, [x, sp]() -> Backward {
    return [x, sp](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
    };
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  const double len = static_cast<double>(x.dim(axis));
  return mul_scalar(sum(x, axis), 1.0 / len);
}

Tensor max(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  if (sp.len == 0) throw ContractError("max over empty axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto xv = x.data();
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t l = 1; l < sp.len; ++l)
        if (xv[(o * sp.len + l) * sp.inner + i] > xv[(o * sp.len + best) * sp.inner + i]) best = l;
      out[o * sp.inner + i] = xv[(o * sp.len + best) * sp.inner + i];
      arg[o * sp.inner + i] = (o * sp.len + best) * sp.inner + i;
    }
  return record("max_axis", std::move(out_shape), std::move(out), {x}, [x, arg]() -> Backward {
    return [x, arg](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    };
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, xv[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += (out[at(l)] = std::exp(xv[at(l)] - m));
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] /= z;
    }
  auto y = std::make_shared<std::vector<double>>(out);
  return record("softmax", x.shape(), std::move(out), {x}, [x, y, sp]() -> Backward {
    return [x, y, sp](std::span<const double> g) {
      double* gx = grad_of(x);
      if (!gx) return;
      const auto& yv = *y;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
          double dot = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) dot += g[at(l)] * yv[at(l)];
          for (std::size_t l = 0; l < sp.len; ++l) gx[at(l)] += yv[at(l)] * (g[at(l)] - dot);
        }
    };
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, xv[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(xv[at(l)] - m);
      const double lz = m + std::log(z);
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] = xv[at(l)] - lz;
    }
  auto y = std::make_shared<std::vector<double>>(out);
  return record("log_softmax", x.shape(), std::move(out), {x}, [x, y, sp]() -> Backward {
    return [x, y, sp](std::span<const double> g) {
      double* gx = grad_of(x);
      if (!gx) return;
      const auto& yv = *y;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
          double gs = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) gs += g[at(l)];
          for (std::size_t l = 0; l < sp.len; ++l) gx[at(l)] += g[at(l)] - std::exp(yv[at(l)]) * gs;
        }
    };
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on scalar");
  const std::size_t n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm: gamma/beta " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " vs last axis of " + to_string(x.shape()));
  }
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / n;
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return record("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat, inv_std, n, rows]() -> Backward {
                  return [x, gamma, beta, xhat, inv_std, n, rows](std::span<const double> g) {
                    auto gv = gamma.data();
                    double* gx = grad_of(x);
                    double* gg = grad_of(gamma);
                    double* gb = grad_of(beta);
                    const auto& h = *xhat;
                    for (std::size_t r = 0; r < rows; ++r) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dh = g[r * n + j] * gv[j];
                        s1 += dh;
                        s2 += dh * h[r * n + j];
                        if (gg) gg[j] += g[r * n + j] * h[r * n + j];
                        if (gb) gb[j] += g[r * n + j];
                      }
                      if (!gx) continue;
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dh = g[r * n + j] * gv[j];
                        gx[r * n + j] += (*inv_std)[r] * (dh - inv_n * s1 - h[r * n + j] * inv_n * s2);
                      }
                    }
                  };
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (element_count(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  auto xv = x.data();
  return record("reshape", std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x}, [x]() -> Backward {
    return [x](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range for " + to_string(out_shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch " + to_string(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != out_shape[d])
        throw DimensionError("concat: " + to_string(s) + " vs " + to_string(out_shape));
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto sp = split_axis(out_shape, axis);
  std::vector<double> out(element_count(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    auto pv = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.data() + o * len * sp.inner, len * sp.inner, out.data() + (o * total + off) * sp.inner);
    off += len;
  }
  return record("concat", std::move(out_shape), std::move(out), parts, [parts, offsets, sp, axis, total]() -> Backward {
    return [parts, offsets, sp, axis, total](std::span<const double> g) {
      for (std::size_t p = 0; p < parts.size(); ++p) {
        double* gp = grad_of(parts[p]);
        if (!gp) continue;
        const std::size_t len = parts[p].dim(axis);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < len * sp.inner; ++i)
            gp[o * len * sp.inner + i] += g[(o * total + offsets[p]) * sp.inner + i];
      }
    };
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = split_axis(x.shape(), axis);
  if (begin > end || end > sp.len) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of axis " +
                         std::to_string(axis) + " in " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  const std::size_t len = end - begin;
  out_shape[axis] = len;
  auto xv = x.data();
  std::vector<double> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.data() + (o * sp.len + begin) * sp.inner, len * sp.inner, out.data() + o * len * sp.inner);
  return record("slice", std::move(out_shape), std::move(out), {x}, [x, sp, begin, len]() -> Backward {
    return [x, sp, begin, len](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < len * sp.inner; ++i) gx[(o * sp.len + begin) * sp.inner + i] += g[o * len * sp.inner + i];
    };
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() == 0) throw DimensionError("gather_rows on scalar");
  const std::size_t n = x.dim(0), width = x.numel() / std::max<std::size_t>(n, 1);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  auto xv = x.data();
  std::vector<double> out(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ContractError("gather_rows: index " + std::to_string(rows[r]) + " >= " + std::to_string(n));
    std::copy_n(xv.data() + rows[r] * width, width, out.data() + r * width);
  }
  return record("gather_rows", std::move(out_shape), std::move(out), {x}, [x, rows, width]() -> Backward {
    return [x, rows, width](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t j = 0; j < width; ++j) gx[rows[r] * width + j] += g[r * width + j];
    };
  });
}

Tensor masked_fill(const Tensor& x, const std::vector<std::uint8_t>& mask, double value) {
  if (mask.size() != x.numel()) throw DimensionError("masked_fill: mask size does not match " + to_string(x.shape()));
  auto xv = x.data();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return record("masked_fill", x.shape(), std::move(out), {x}, [x, mask]() -> Backward {
    return [x, mask](std::span<const double> g) {
      if (double* gx = grad_of(x))
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!mask[i]) gx[i] += g[i];
    };
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  require_rank("conv2d input", x, 3);
  require_rank("conv2d weight", weight, 4);
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::size_t kh = weight.dim(0), kw = weight.dim(1), cout = weight.dim(3);
  if (weight.dim(2) != cin || bias.numel() != cout || stride == 0) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + ", weight " + to_string(weight.shape()) +
                         ", bias " + to_string(bias.shape()));
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t patch = kh * kw * cin;
  auto xv = x.data();
  // im2col: one row per output pixel; out-of-range taps stay zero.
  auto cols = std::make_shared<std::vector<double>>(ho * wo * patch, 0.0);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      double* dst = cols->data() + (oy * wo + ox) * patch;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          std::copy_n(xv.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin, cin,
                      dst + (ky * kw + kx) * cin);
        }
      }
    }
  std::vector<double> out(ho * wo * cout);
  Map om(out.data(), ho * wo, cout);
  om.noalias() = MapC(cols->data(), ho * wo, patch) * MapC(weight.data().data(), patch, cout);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), cout);
  mac_counter() += ho * wo * patch * cout;
  return record("conv2d", {ho, wo, cout}, std::move(out), {x, weight, bias},
                [=]() -> Backward {
                  return [=](std::span<const double> g) {
                    MapC gm(g.data(), ho * wo, cout);
                    if (double* gw = grad_of(weight))
                      Map(gw, patch, cout).noalias() += MapC(cols->data(), ho * wo, patch).transpose() * gm;
                    if (double* gb = grad_of(bias))
                      Eigen::Map<Eigen::RowVectorXd>(gb, cout) += gm.colwise().sum();
                    if (double* gx = grad_of(x)) {
                      RowMat gcols = gm * MapC(weight.data().data(), patch, cout).transpose();
                      for (std::size_t oy = 0; oy < ho; ++oy)
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                          const double* src = gcols.data() + (oy * wo + ox) * patch;
                          for (std::size_t ky = 0; ky < kh; ++ky) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                              double* d = gx + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                              const double* s = src + (ky * kw + kx) * cin;
                              for (std::size_t c = 0; c < cin; ++c) d[c] += s[c];
                            }
                          }
                        }
                    }
                  };
                });
}

Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
  require_rank("bilinear_sample map", map, 3);
  if (points.rank() != 2 || points.dim(1) != 2) {
    throw DimensionError("bilinear_sample: points must be [P,2], got " + to_string(points.shape()));
  }
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2), p = points.dim(0);
  auto mv = map.data();
  auto pv = points.data();
  std::vector<double> out(p * c, 0.0);
  auto cell = [h, w](std::ptrdiff_t y, std::ptrdiff_t x) -> std::ptrdiff_t {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return -1;
    return y * static_cast<std::ptrdiff_t>(w) + x;
  };
  for (std::size_t i = 0; i < p; ++i) {
    const double px = pv[2 * i], py = pv[2 * i + 1];
    const double fx = std::floor(px), fy = std::floor(py);
    const double ax = px - fx, ay = py - fy;
    const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
    const std::ptrdiff_t idx[4] = {cell(y0, x0), cell(y0, x0 + 1), cell(y0 + 1, x0), cell(y0 + 1, x0 + 1)};
    const double wt[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
    for (int k = 0; k < 4; ++k) {
      if (idx[k] < 0) continue;
      const double* src = mv.data() + static_cast<std::size_t>(idx[k]) * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += wt[k] * src[ch];
    }
  }
  return record("bilinear_sample", {p, c}, std::move(out), {map, points}, [=]() -> Backward {
    return [=](std::span<const double> g) {
      double* gm = grad_of(map);
      double* gp = grad_of(points);
      auto mv = map.data();
      auto pv = points.data();
      for (std::size_t i = 0; i < p; ++i) {
        const double px = pv[2 * i], py = pv[2 * i + 1];
        const double fx = std::floor(px), fy = std::floor(py);
        const double ax = px - fx, ay = py - fy;
        const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
        const std::ptrdiff_t idx[4] = {cell(y0, x0), cell(y0, x0 + 1), cell(y0 + 1, x0), cell(y0 + 1, x0 + 1)};
        const double wt[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        const double dwx[4] = {-(1 - ay), (1 - ay), -ay, ay};
        const double dwy[4] = {-(1 - ax), -ax, (1 - ax), ax};
        for (int k = 0; k < 4; ++k) {
          if (idx[k] < 0) continue;
          const std::size_t base = static_cast<std::size_t>(idx[k]) * c;
          double dot = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            if (gm) gm[base + ch] += wt[k] * g[i * c + ch];
            dot += g[i * c + ch] * mv[base + ch];
          }
          if (gp) {
            gp[2 * i] += dot * dwx[k];
            gp[2 * i + 1] += dot * dwy[k];
          }
        }
      }
    };
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape("bce_with_logits", logits, targets);
  if (logits.numel() == 0) throw ContractError("bce_with_logits on empty tensor");
  auto xv = logits.data();
  auto tv = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double x = xv[i];
    total += std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double n = static_cast<double>(xv.size());
  return record("bce_with_logits", {}, {total / n}, {logits, targets}, [logits, targets, n]() -> Backward {
    return [logits, targets, n](std::span<const double> g) {
      auto xv = logits.data();
      auto tv = targets.data();
      if (double* gx = grad_of(logits))
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[0] * (stable_sigmoid(xv[i]) - tv[i]) / n;
      if (double* gt = grad_of(targets))
        for (std::size_t i = 0; i < xv.size(); ++i) gt[i] += g[0] * (-xv[i]) / n;
    };
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels,
                     const std::vector<double>& class_weights) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match rows");
  if (!class_weights.empty() && class_weights.size() != c) throw DimensionError("cross_entropy: class weight count");
  Tensor lp = log_softmax(logits, 1);
  std::vector<double> pick(n * c, 0.0);
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ContractError("cross_entropy: label out of range");
    const double wgt = class_weights.empty() ? 1.0 : class_weights[labels[i]];
    pick[i * c + labels[i]] = -wgt;
    wsum += wgt;
  }
  if (!(wsum > 0)) throw ContractError("cross_entropy: zero total weight");
  return mul_scalar(sum(mul(lp, Tensor({n, c}, std::move(pick)))), 1.0 / wsum);
}

}  // namespace txt
