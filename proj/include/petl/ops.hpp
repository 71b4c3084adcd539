#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "petl/tensor.hpp"

namespace petl::ops {

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (*t && t->requires_grad()) return true;
  return false;
}

inline Tensor finish(std::string_view op, Tensor out, bool track, Tape::BackwardFn fn) {
  if (track) {
    out.set_requires_grad(true);
    active_tape()->record(op, out, std::move(fn));
  }
  return out;
}

inline bool wants(const Tensor& t) { return t && t.requires_grad(); }

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += D[m x n] * B[k x n]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* d,
                    const double* b, double* c) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(m, n, k, d, bt.data(), c);
}

// C[k x n] += A[m x k]^T * D[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* d, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* drow = d + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * drow[j];
    }
  }
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class F, class DF>
Tensor unary(std::string_view name, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor y = Tensor::from(x.shape(), std::move(out));
  const bool track = tracking({&x});
  return finish(name, y, track, [x, df](Tensor& o) mutable {
    auto g = x.grad_mut();
    auto go = o.grad();
    auto xd = x.data();
    auto yd = o.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * df(xd[i], yd[i]);
  });
}

}  // namespace detail

using detail::sigmoid_scalar;

/// Plain 2-D matrix product.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), c.data().data());
  const bool track = detail::tracking({&a, &b});
  return detail::finish("matmul", c, track, [a, b, m, k, n](Tensor& o) mutable {
    const double* g = o.grad().data();
    if (detail::wants(a)) detail::gemm_nt(m, n, k, g, b.data().data(), a.grad_mut().data());
    if (detail::wants(b)) detail::gemm_tn(m, k, n, a.data().data(), g, b.grad_mut().data());
  });
}

/// Affine map over the last axis: y = x W (+ bias). Leading axes are treated as rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (w.rank() != 2 || x.last_dim() != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  const std::size_t m = x.rows(), k = w.dim(0), n = w.dim(1);
  if (bias && bias.numel() != n)
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs out features " +
                         std::to_string(n));
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor y = Tensor::zeros(out_shape);
  double* yd = y.data().data();
  if (bias) {
    auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) yd[i * n + j] = bd[j];
  }
  detail::gemm_nn(m, k, n, x.data().data(), w.data().data(), yd);
  const bool track = detail::tracking({&x, &w, &bias});
  return detail::finish("linear", y, track, [x, w, bias, m, k, n](Tensor& o) mutable {
    const double* g = o.grad().data();
    if (detail::wants(x)) detail::gemm_nt(m, n, k, g, w.data().data(), x.grad_mut().data());
    if (detail::wants(w)) detail::gemm_tn(m, k, n, x.data().data(), g, w.grad_mut().data());
    if (detail::wants(bias)) {
      auto gb = bias.grad_mut();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const bool track = detail::tracking({&a, &b});
  return detail::finish("add", Tensor::from(a.shape(), std::move(out)), track,
                        [a, b](Tensor& o) mutable {
                          auto g = o.grad();
                          if (detail::wants(a)) {
                            auto ga = a.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (detail::wants(b)) {
                            auto gb = b.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                          }
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  const bool track = detail::tracking({&a, &b});
  return detail::finish("sub", Tensor::from(a.shape(), std::move(out)), track,
                        [a, b](Tensor& o) mutable {
                          auto g = o.grad();
                          if (detail::wants(a)) {
                            auto ga = a.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (detail::wants(b)) {
                            auto gb = b.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const bool track = detail::tracking({&a, &b});
  return detail::finish("mul", Tensor::from(a.shape(), std::move(out)), track,
                        [a, b](Tensor& o) mutable {
                          auto g = o.grad();
                          if (detail::wants(a)) {
                            auto ga = a.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
                          }
                          if (detail::wants(b)) {
                            auto gb = b.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
                          }
                        });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  const bool track = detail::tracking({&x});
  return detail::finish("scale", Tensor::from(x.shape(), std::move(out)), track,
                        [x, s](Tensor& o) mutable {
                          auto g = o.grad();
                          auto gx = x.grad_mut();
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
                        });
}

/// x + b with b broadcast over every row of the last axis.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t n = x.last_dim();
  if (b.numel() != n)
    throw DimensionError("add_bias: " + shape_str(b.shape()) + " vs " + shape_str(x.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % n];
  const bool track = detail::tracking({&x, &b});
  return detail::finish("add_bias", Tensor::from(x.shape(), std::move(out)), track,
                        [x, b, n](Tensor& o) mutable {
                          auto g = o.grad();
                          if (detail::wants(x)) {
                            auto gx = x.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (detail::wants(b)) {
                            auto gb = b.grad_mut();
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                          }
                        });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool track = detail::tracking({&x});
  return detail::finish("sum", Tensor::scalar(s), track, [x](Tensor& o) mutable {
    const double g = o.grad()[0];
    for (double& gx : x.grad_mut()) gx += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x, [](double v) { return sigmoid_scalar(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor swish(const Tensor& x) {
  return detail::unary(
      "swish", x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.last_dim(), m = x.rows();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data().data() + i * n;
    double* yr = out.data() + i * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  const bool track = detail::tracking({&x});
  return detail::finish("softmax_rows", Tensor::from(x.shape(), std::move(out)), track,
                        [x, m, n](Tensor& o) mutable {
                          auto g = o.grad();
                          auto y = o.data();
                          auto gx = x.grad_mut();
                          for (std::size_t i = 0; i < m; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                            for (std::size_t j = 0; j < n; ++j)
                              gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                          }
                        });
}

namespace detail {

// Shared normalization backward: given xhat and dxhat for a group of `count`
// elements with inverse std `inv`, accumulate dx.
inline void norm_backward(std::size_t count, const double* xhat, const double* dxhat,
                          double inv, double* dx, std::size_t stride) {
  double mean_d = 0.0, mean_dx = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    mean_d += dxhat[i * stride];
    mean_dx += dxhat[i * stride] * xhat[i * stride];
  }
  mean_d /= static_cast<double>(count);
  mean_dx /= static_cast<double>(count);
  for (std::size_t i = 0; i < count; ++i)
    dx[i * stride] += inv * (dxhat[i * stride] - mean_d - xhat[i * stride] * mean_dx);
}

}  // namespace detail

/// Per-row normalization over the last axis followed by an affine map.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::size_t d = x.last_dim(), m = x.rows();
  if (d == 0) throw DimensionError("layer_norm: empty feature axis");
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: affine size mismatch for " + shape_str(x.shape()));
  std::vector<double> xhat(x.numel()), out(x.numel()), inv(m);
  auto g = gamma.data();
  auto b = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xr[j] - mu) * inv[i];
      out[i * d + j] = g[j] * xhat[i * d + j] + b[j];
    }
  }
  const bool track = detail::tracking({&x, &gamma, &beta});
  return detail::finish(
      "layer_norm", Tensor::from(x.shape(), std::move(out)), track,
      [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv), m, d](Tensor& o) mutable {
        auto go = o.grad();
        if (detail::wants(gamma)) {
          auto gg = gamma.grad_mut();
          for (std::size_t i = 0; i < m * d; ++i) gg[i % d] += go[i] * xhat[i];
        }
        if (detail::wants(beta)) {
          auto gb = beta.grad_mut();
          for (std::size_t i = 0; i < m * d; ++i) gb[i % d] += go[i];
        }
        if (detail::wants(x)) {
          auto gx = x.grad_mut();
          auto gam = gamma.data();
          std::vector<double> dxhat(d);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < d; ++j) dxhat[j] = go[i * d + j] * gam[j];
            detail::norm_backward(d, xhat.data() + i * d, dxhat.data(), inv[i],
                                  gx.data() + i * d, 1);
          }
        }
      });
}

/// Affine parameters plus running statistics for 1-D batch normalization.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(std::size_t channels) {
    return {Tensor::full({channels}, 1.0), Tensor::zeros({channels}),
            Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
  }
  std::size_t channels() const { return gamma.numel(); }
};

/// Batch normalization over every axis except the last (channel) one.
/// Training mode uses batch statistics and updates the running estimates
/// (unbiased variance); eval mode uses the running estimates.
inline Tensor batch_norm_1d(const Tensor& x, BatchNormState& state, bool training) {
  const std::size_t c = x.last_dim(), count = x.rows();
  if (c != state.channels())
    throw DimensionError("batch_norm_1d: " + std::to_string(c) + " channels, state has " +
                         std::to_string(state.channels()));
  auto g = state.gamma.data();
  auto b = state.beta.data();
  std::vector<double> out(x.numel()), xhat(x.numel()), inv(c);
  auto xd = x.data();
  if (training) {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::size_t i = 0; i < count; ++i) mu += xd[i * c + ch];
      mu /= static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t i = 0; i < count; ++i) ss += (xd[i * c + ch] - mu) * (xd[i * c + ch] - mu);
      const double var = ss / static_cast<double>(count);
      inv[ch] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mu;
      rv[ch] = (1.0 - state.momentum) * rv[ch] + state.momentum * unbiased;
      for (std::size_t i = 0; i < count; ++i) {
        xhat[i * c + ch] = (xd[i * c + ch] - mu) * inv[ch];
        out[i * c + ch] = g[ch] * xhat[i * c + ch] + b[ch];
      }
    }
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = 1.0 / std::sqrt(rv[ch] + state.eps);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        xhat[i * c + ch] = (xd[i * c + ch] - rm[ch]) * inv[ch];
        out[i * c + ch] = g[ch] * xhat[i * c + ch] + b[ch];
      }
  }
  Tensor gamma = state.gamma, beta = state.beta;
  const bool track = detail::tracking({&x, &gamma, &beta});
  return detail::finish(
      "batch_norm_1d", Tensor::from(x.shape(), std::move(out)), track,
      [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv), c, count,
       training](Tensor& o) mutable {
        auto go = o.grad();
        if (detail::wants(gamma)) {
          auto gg = gamma.grad_mut();
          for (std::size_t i = 0; i < count * c; ++i) gg[i % c] += go[i] * xhat[i];
        }
        if (detail::wants(beta)) {
          auto gb = beta.grad_mut();
          for (std::size_t i = 0; i < count * c; ++i) gb[i % c] += go[i];
        }
        if (detail::wants(x)) {
          auto gx = x.grad_mut();
          auto gam = gamma.data();
          if (training) {
            std::vector<double> dxhat(count * c);
            for (std::size_t i = 0; i < count * c; ++i) dxhat[i] = go[i] * gam[i % c];
            for (std::size_t ch = 0; ch < c; ++ch)
              detail::norm_backward(count, xhat.data() + ch, dxhat.data() + ch, inv[ch],
                                    gx.data() + ch, c);
          } else {
            for (std::size_t i = 0; i < count * c; ++i) gx[i] += go[i] * gam[i % c] * inv[i % c];
          }
        }
      });
}

/// Gated linear unit over the last axis: first half times sigmoid of second half.
inline Tensor glu(const Tensor& x) {
  const std::size_t two_r = x.last_dim();
  if (two_r % 2 != 0)
    throw DimensionError("glu: channel extent must be even, got " + std::to_string(two_r));
  const std::size_t r = two_r / 2, m = x.rows();
  Shape s = x.shape();
  s.back() = r;
  std::vector<double> out(m * r), gate(m * r);
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      gate[i * r + j] = sigmoid_scalar(xd[i * two_r + r + j]);
      out[i * r + j] = xd[i * two_r + j] * gate[i * r + j];
    }
  const bool track = detail::tracking({&x});
  return detail::finish("glu", Tensor::from(s, std::move(out)), track,
                        [x, gate = std::move(gate), m, r](Tensor& o) mutable {
                          auto go = o.grad();
                          auto gx = x.grad_mut();
                          auto xd = x.data();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < r; ++j) {
                              const double s = gate[i * r + j];
                              const double a = xd[i * 2 * r + j];
                              gx[i * 2 * r + j] += go[i * r + j] * s;
                              gx[i * 2 * r + r + j] += go[i * r + j] * a * s * (1.0 - s);
                            }
                        });
}

/// Left zero-padding used by depthwise_conv1d for kernel size k ("same" output length).
inline std::size_t same_pad_left(std::size_t k) { return (k - 1) / 2; }

/// Per-channel 1-D convolution along the sequence axis with "same" zero
/// padding (left floor((k-1)/2), right ceil((k-1)/2)). x is [N x c] or [B x N x c],
/// w is [c x k], bias is [c].
inline Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) throw DimensionError("depthwise_conv1d: weight must be [c x k]");
  const std::size_t c = w.dim(0), k = w.dim(1);
  if (k == 0) throw ConfigError("depthwise_conv1d: kernel size must be >= 1");
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("depthwise_conv1d: input must be [N x c] or [B x N x c]");
  if (x.last_dim() != c || bias.numel() != c)
    throw DimensionError("depthwise_conv1d: channel mismatch, input " + shape_str(x.shape()) +
                         " weight " + shape_str(w.shape()));
  const std::size_t batches = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t n = x.rank() == 3 ? x.dim(1) : x.dim(0);
  const auto left = static_cast<std::ptrdiff_t>(same_pad_left(k));
  std::vector<double> out(x.numel());
  auto xd = x.data();
  auto wd = w.data();
  auto bd = bias.data();
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = bd[ch];
        for (std::size_t j = 0; j < k; ++j) {
          const auto src = static_cast<std::ptrdiff_t>(t + j) - left;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
          acc += wd[ch * k + j] * xd[(b * n + static_cast<std::size_t>(src)) * c + ch];
        }
        out[(b * n + t) * c + ch] = acc;
      }
  const bool track = detail::tracking({&x, &w, &bias});
  return detail::finish(
      "depthwise_conv1d", Tensor::from(x.shape(), std::move(out)), track,
      [x, w, bias, batches, n, c, k, left](Tensor& o) mutable {
        auto go = o.grad();
        auto xd = x.data();
        auto wd = w.data();
        const bool gx_on = detail::wants(x), gw_on = detail::wants(w);
        std::span<double> gx, gw;
        if (gx_on) gx = x.grad_mut();
        if (gw_on) gw = w.grad_mut();
        for (std::size_t b = 0; b < batches; ++b)
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double g = go[(b * n + t) * c + ch];
              for (std::size_t j = 0; j < k; ++j) {
                const auto src = static_cast<std::ptrdiff_t>(t + j) - left;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
                const std::size_t xi = (b * n + static_cast<std::size_t>(src)) * c + ch;
                if (gx_on) gx[xi] += wd[ch * k + j] * g;
                if (gw_on) gw[ch * k + j] += xd[xi] * g;
              }
            }
        if (detail::wants(bias)) {
          auto gb = bias.grad_mut();
          for (std::size_t i = 0; i < go.size(); ++i) gb[i % c] += go[i];
        }
      });
}

/// Mean softmax cross-entropy of logits [B x C] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t bsz = logits.dim(0), c = logits.dim(1);
  std::vector<double> prob(bsz * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < bsz; ++i) {
    if (labels[i] >= c) throw DimensionError("cross_entropy: label out of range");
    const double* r = logits.data().data() + i * c;
    const double mx = *std::max_element(r, r + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (prob[i * c + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= z;
    loss -= (r[labels[i]] - mx) - std::log(z);
  }
  loss /= static_cast<double>(bsz);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const bool track = detail::tracking({&logits});
  return detail::finish(
      "cross_entropy", Tensor::scalar(loss), track,
      [logits, prob = std::move(prob), lab = std::move(lab), bsz, c](Tensor& o) mutable {
        const double g = o.grad()[0] / static_cast<double>(bsz);
        auto gl = logits.grad_mut();
        for (std::size_t i = 0; i < bsz; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gl[i * c + j] += g * (prob[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
      });
}

/// Multi-head scaled dot-product attention. q is [B x S x d]; k and v are
/// [B x T x d]. If `probs_out` is non-null it receives the attention
/// probabilities as a detached [B x heads x S x T] tensor.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        Tensor* probs_out = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2))
    throw DimensionError("attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                         " v " + shape_str(v.shape()));
  const std::size_t bsz = q.dim(0), s = q.dim(1), t = k.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: d not divisible by heads");
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(bsz * heads * s * t);
  std::vector<double> out(bsz * s * d, 0.0);
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + ((b * heads + h) * s) * t;
      for (std::size_t i = 0; i < s; ++i) {
        const double* qi = qd.data() + (b * s + i) * d + h * dh;
        double* pr = p + i * t;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          const double* kj = kd.data() + (b * t + j) * d + h * dh;
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += qi[e] * kj[e];
          pr[j] = acc * scl;
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < t; ++j) z += (pr[j] = std::exp(pr[j] - mx));
        for (std::size_t j = 0; j < t; ++j) pr[j] /= z;
        double* oi = out.data() + (b * s + i) * d + h * dh;
        for (std::size_t j = 0; j < t; ++j) {
          const double* vj = vd.data() + (b * t + j) * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += pr[j] * vj[e];
        }
      }
    }
  if (probs_out) *probs_out = Tensor::from({bsz, heads, s, t}, probs);
  const bool track = detail::tracking({&q, &k, &v});
  return detail::finish(
      "attention", Tensor::from(q.shape(), std::move(out)), track,
      [q, k, v, probs = std::move(probs), bsz, heads, s, t, d, dh, scl](Tensor& o) mutable {
        auto go = o.grad();
        auto qd = q.data();
        auto kd = k.data();
        auto vd = v.data();
        const bool gq_on = detail::wants(q), gk_on = detail::wants(k), gv_on = detail::wants(v);
        std::span<double> gq, gk, gv;
        if (gq_on) gq = q.grad_mut();
        if (gk_on) gk = k.grad_mut();
        if (gv_on) gv = v.grad_mut();
        std::vector<double> dp(t);
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + ((b * heads + h) * s) * t;
            for (std::size_t i = 0; i < s; ++i) {
              const double* gi = go.data() + (b * s + i) * d + h * dh;
              const double* pr = p + i * t;
              double dot = 0.0;
              for (std::size_t j = 0; j < t; ++j) {
                const double* vj = vd.data() + (b * t + j) * d + h * dh;
                double acc = 0.0;
                for (std::size_t e = 0; e < dh; ++e) acc += gi[e] * vj[e];
                dp[j] = acc;
                dot += acc * pr[j];
                if (gv_on) {
                  double* gvj = gv.data() + (b * t + j) * d + h * dh;
                  for (std::size_t e = 0; e < dh; ++e) gvj[e] += pr[j] * gi[e];
                }
              }
              const double* qi = qd.data() + (b * s + i) * d + h * dh;
              for (std::size_t j = 0; j < t; ++j) {
                const double ds = pr[j] * (dp[j] - dot) * scl;
                if (ds == 0.0) continue;
                const double* kj = kd.data() + (b * t + j) * d + h * dh;
                if (gq_on) {
                  double* gqi = gq.data() + (b * s + i) * d + h * dh;
                  for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds * kj[e];
                }
                if (gk_on) {
                  double* gkj = gk.data() + (b * t + j) * d + h * dh;
                  for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds * qi[e];
                }
              }
            }
          }
      });
}

/// Concatenation of rank-3 tensors along the sequence axis (axis 1).
inline Tensor concat_seq(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_seq: no inputs");
  const std::size_t bsz = parts[0].dim(0), d = parts[0].dim(2);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(0) != bsz || p.dim(2) != d)
      throw DimensionError("concat_seq: incompatible part " + shape_str(p.shape()));
    total += p.dim(1);
  }
  std::vector<double> out(bsz * total * d);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(1);
    for (std::size_t b = 0; b < bsz; ++b)
      std::copy_n(p.data().data() + b * len * d, len * d,
                  out.data() + (b * total + offset) * d);
    offset += len;
  }
  bool track = false;
  if (active_tape())
    for (const auto& p : parts) track = track || p.requires_grad();
  return detail::finish("concat_seq", Tensor::from({bsz, total, d}, std::move(out)), track,
                        [parts, bsz, total, d](Tensor& o) mutable {
                          auto go = o.grad();
                          std::size_t offset = 0;
                          for (auto& p : parts) {
                            const std::size_t len = p.dim(1);
                            if (detail::wants(p)) {
                              auto gp = p.grad_mut();
                              for (std::size_t b = 0; b < bsz; ++b)
                                for (std::size_t i = 0; i < len * d; ++i)
                                  gp[b * len * d + i] += go[(b * total + offset) * d + i];
                            }
                            offset += len;
                          }
                        });
}

/// Rows [start, start+len) of the sequence axis of a rank-3 tensor.
inline Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t len) {
  if (x.rank() != 3 || start + len > x.dim(1))
    throw DimensionError("slice_seq: range out of bounds for " + shape_str(x.shape()));
  const std::size_t bsz = x.dim(0), s = x.dim(1), d = x.dim(2);
  std::vector<double> out(bsz * len * d);
  for (std::size_t b = 0; b < bsz; ++b)
    std::copy_n(x.data().data() + (b * s + start) * d, len * d, out.data() + b * len * d);
  const bool track = detail::tracking({&x});
  return detail::finish("slice_seq", Tensor::from({bsz, len, d}, std::move(out)), track,
                        [x, bsz, s, d, start, len](Tensor& o) mutable {
                          auto go = o.grad();
                          auto gx = x.grad_mut();
                          for (std::size_t b = 0; b < bsz; ++b)
                            for (std::size_t i = 0; i < len * d; ++i)
                              gx[(b * s + start) * d + i] += go[b * len * d + i];
                        });
}

/// Repeats an [n x d] tensor over a new leading batch axis: [B x n x d].
inline Tensor tile_batch(const Tensor& x, std::size_t batch) {
  if (x.rank() != 2) throw DimensionError("tile_batch: expected [n x d], got " + shape_str(x.shape()));
  const std::size_t n = x.numel();
  std::vector<double> out(batch * n);
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.data().data(), n, out.data() + b * n);
  const bool track = detail::tracking({&x});
  return detail::finish("tile_batch", Tensor::from({batch, x.dim(0), x.dim(1)}, std::move(out)),
                        track, [x, batch, n](Tensor& o) mutable {
                          auto go = o.grad();
                          auto gx = x.grad_mut();
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t i = 0; i < n; ++i) gx[i] += go[b * n + i];
                        });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  const bool track = detail::tracking({&x});
  return detail::finish("reshape", Tensor::from(std::move(shape), std::move(out)), track,
                        [x](Tensor& o) mutable {
                          auto go = o.grad();
                          auto gx = x.grad_mut();
                          for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
                        });
}

/// Splits [B x F x T] into non-overlapping ph x pw patches: [B x N x (ph*pw)],
/// patches ordered frequency-major, time-minor.
inline Tensor patchify(const Tensor& x, std::size_t ph, std::size_t pw) {
  if (x.rank() != 3 || ph == 0 || pw == 0 || x.dim(1) % ph != 0 || x.dim(2) % pw != 0)
    throw DimensionError("patchify: grid " + std::to_string(ph) + "x" + std::to_string(pw) +
                         " does not tile " + shape_str(x.shape()));
  const std::size_t bsz = x.dim(0), f = x.dim(1), t = x.dim(2);
  const std::size_t nf = f / ph, nt = t / pw, np = nf * nt, pp = ph * pw;
  std::vector<std::size_t> src(np * pp);
  for (std::size_t fi = 0; fi < nf; ++fi)
    for (std::size_t ti = 0; ti < nt; ++ti)
      for (std::size_t r = 0; r < ph; ++r)
        for (std::size_t c = 0; c < pw; ++c)
          src[(fi * nt + ti) * pp + r * pw + c] = (fi * ph + r) * t + ti * pw + c;
  std::vector<double> out(bsz * np * pp);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t i = 0; i < np * pp; ++i) out[b * np * pp + i] = x[b * f * t + src[i]];
  const bool track = detail::tracking({&x});
  return detail::finish("patchify", Tensor::from({bsz, np, pp}, std::move(out)), track,
                        [x, src = std::move(src), bsz, f, t, np, pp](Tensor& o) mutable {
                          auto go = o.grad();
                          auto gx = x.grad_mut();
                          for (std::size_t b = 0; b < bsz; ++b)
                            for (std::size_t i = 0; i < np * pp; ++i)
                              gx[b * f * t + src[i]] += go[b * np * pp + i];
                        });
}

}  // namespace petl::ops
