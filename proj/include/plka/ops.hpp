#pragma once

// Differentiable operations over plka::Tensor. Every op validates shapes,
// rejects non-finite results, and records a backward closure when any input
// participates in gradients.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <numbers>
#include <string>
#include <vector>

#include "plka/tensor.hpp"

namespace plka {

namespace detail {

// NaN/Inf have an all-ones exponent; the integer test vectorizes.
template <std::floating_point T>
void check_finite(std::span<const T> v, const char* op) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  Bits top = 0;
  for (const T x : v) top = std::max(top, Bits(std::bit_cast<Bits>(x) & exp_mask));
  if (top == exp_mask) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Dot product with eight independent partial sums so the loop vectorizes
// without reassociation flags. The summation order is fixed.
template <std::floating_point T>
T dot(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t kLanes = 8;
  T lanes[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) lanes[j] += a[i + j] * b[i + j];
  }
  T acc = 0;
  for (; i < n; ++i) acc += a[i] * b[i];
  for (std::size_t j = 0; j < kLanes; ++j) acc += lanes[j];
  return acc;
}

template <std::floating_point T>
T total(const T* a, std::size_t n) {
  constexpr std::size_t kLanes = 8;
  T lanes[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) lanes[j] += a[i + j];
  }
  T acc = 0;
  for (; i < n; ++i) acc += a[i];
  for (std::size_t j = 0; j < kLanes; ++j) acc += lanes[j];
  return acc;
}

template <std::floating_point T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      const char* op, Backward&& backward) {
  check_finite<T>(value, op);
  auto out = Tensor<T>::from(std::move(shape), std::move(value));
  bool needs_grad = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  auto& node = *out.node();
  node.op = op;
  if (needs_grad) {
    node.requires_grad = true;
    for (const auto& in : inputs) node.parents.push_back(in.node());
    node.backward_fn = std::forward<Backward>(backward);
  }
  return out;
}

// Gradient buffer of parent i, or an empty span when it does not need one.
template <std::floating_point T>
std::span<T> parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

template <std::floating_point T>
const std::vector<T>& parent_value(const Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

template <std::floating_point T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <std::floating_point T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise algebra
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "add", [](detail::Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto g = detail::parent_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node<T>& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

// Hadamard product.
template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node<T>& self) {
    const auto& av = detail::parent_value(self, 0);
    const auto& bv = detail::parent_value(self, 1);
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    auto gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, "scale", [s](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, "add_scalar", [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// 1 - a
template <std::floating_point T>
Tensor<T> one_minus(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) - a[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a}, "one_minus", [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

// a - t, where t holds a single value broadcast over a.
template <std::floating_point T>
Tensor<T> sub_broadcast(const Tensor<T>& a, const Tensor<T>& t) {
  if (t.numel() != 1) throw ShapeError("sub_broadcast: shift must hold one value, got " + shape_str(t.shape()));
  const T s = t[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - s;
  return detail::make_result<T>(a.shape(), std::move(out), {a, t}, "sub_broadcast", [](detail::Node<T>& self) {
    auto ga = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gt = detail::parent_grad(self, 1);
    if (!gt.empty()) {
      T acc = 0;
      for (const T g : self.grad) acc += g;
      gt[0] -= acc;
    }
  });
}

// Applies f elementwise; df(x, y) is the derivative at input x with output y.
template <std::floating_point T, typename F, typename DF>
Tensor<T> elementwise_unary(const Tensor<T>& a, F f, DF df, const char* op) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return detail::make_result<T>(a.shape(), std::move(out), {a}, op, [df](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    const auto& x = detail::parent_value(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

template <std::floating_point T>
inline constexpr T kInvSqrt2 = T(0.70710678118654752440084436210484903928L);
template <std::floating_point T>
inline constexpr T kInvSqrt2Pi = T(0.39894228040143267793994605993438186848L);

// exp(x) for x <= 0 via Cody-Waite reduction and a degree-6 polynomial;
// relative error ~2e-7 in single precision. Written branch-free so the
// callers' loops vectorize.
inline float exp_nonpositive(float x) {
  x = x < -87.0f ? -87.0f : x;
  const float n = std::nearbyint(x * 1.44269504088896341f);
  const float r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

// Rational erf approximation (Abramowitz & Stegun 7.1.26), |error| < 1.5e-7.
inline float erf_rational(float x) {
  const float ax = std::abs(x);
  const float t = 1.0f / (1.0f + 0.3275911f * ax);
  const float poly = t * (0.254829592f + t * (-0.284496736f + t * (1.421413741f + t * (-1.453152027f + t * 1.061405429f))));
  const float y = 1.0f - poly * exp_nonpositive(-ax * ax);
  return std::copysign(y, x);
}

// Single precision uses the rational approximation; double, used by the
// finite-difference harness, uses the library erf.
template <std::floating_point T>
T erf_value(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return erf_rational(x);
  } else {
    return std::erf(x);
  }
}

template <std::floating_point T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + erf_value(x * kInvSqrt2<T>));
}

// d/dx of x * Phi(x) = Phi(x) + x * phi(x)
template <std::floating_point T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + erf_value(x * kInvSqrt2<T>));
  T e;
  if constexpr (std::is_same_v<T, float>) {
    e = exp_nonpositive(T(-0.5) * x * x);
  } else {
    e = std::exp(T(-0.5) * x * x);
  }
  return cdf + x * e * kInvSqrt2Pi<T>;
}

// The derivative is evaluated alongside the forward pass and kept for
// backward, so each element is visited once.
template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.numel()), deriv(a.numel());
  const T* x = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T cdf = T(0.5) * (T(1) + erf_value(x[i] * kInvSqrt2<T>));
    T e;
    if constexpr (std::is_same_v<T, float>) {
      e = exp_nonpositive(T(-0.5) * x[i] * x[i]);
    } else {
      e = std::exp(T(-0.5) * x[i] * x[i]);
    }
    out[i] = x[i] * cdf;
    deriv[i] = cdf + x[i] * e * kInvSqrt2Pi<T>;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, "gelu", [deriv = std::move(deriv)](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv[i];
  });
}

template <std::floating_point T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return sigmoid_value(x); }, [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }, "log");
}

template <std::floating_point T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return elementwise_unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); }, "clamp");
}

// Clamps values into [lo, hi] but passes the incoming gradient through
// unchanged, so saturated probabilities still receive a learning signal.
template <std::floating_point T>
Tensor<T> clamp_straight_through(const Tensor<T>& a, T lo, T hi) {
  return elementwise_unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); }, [](T, T) { return T(1); }, "clamp_straight_through");
}

// -mean(t log(clamp(fg)) + (1 - t) log(clamp(bg))) with straight-through
// clamping to [eps, 1 - eps]. Gradients flow to fg and bg; t is constant.
template <std::floating_point T>
Tensor<T> binary_cross_entropy(const Tensor<T>& fg, const Tensor<T>& bg, const Tensor<T>& truth, T eps) {
  detail::require_same_shape(fg, truth, "binary_cross_entropy");
  detail::require_same_shape(bg, truth, "binary_cross_entropy");
  const std::size_t n = truth.numel();
  if (n == 0) throw ShapeError("binary_cross_entropy of empty tensor");
  const T hi = T(1) - eps;
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T t = truth[i];
    acc += t * std::log(std::clamp(fg[i], eps, hi)) + (T(1) - t) * std::log(std::clamp(bg[i], eps, hi));
  }
  const T inv = T(1) / static_cast<T>(n);
  return detail::make_result<T>({}, {-acc * inv}, {fg, bg, truth}, "binary_cross_entropy",
                                [eps, hi, inv](detail::Node<T>& self) {
    const T g = -self.grad[0] * inv;
    const auto& fv = detail::parent_value(self, 0);
    const auto& bv = detail::parent_value(self, 1);
    const auto& tv = detail::parent_value(self, 2);
    auto gf = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < gf.size(); ++i) gf[i] += g * tv[i] / std::clamp(fv[i], eps, hi);
    auto gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * (T(1) - tv[i]) / std::clamp(bv[i], eps, hi);
    auto gt = detail::parent_grad(self, 2);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] += g * (std::log(std::clamp(fv[i], eps, hi)) - std::log(std::clamp(bv[i], eps, hi)));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (const T x : a.data()) acc += x;
  return detail::make_result<T>({}, {acc}, {a}, "sum", [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  T acc = 0;
  for (const T x : a.data()) acc += x;
  const T inv = T(1) / static_cast<T>(a.numel());
  return detail::make_result<T>({}, {acc * inv}, {a}, "mean", [inv](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

// C x H x W -> C
template <std::floating_point T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  const T inv = T(1) / static_cast<T>(hw);
  std::vector<T> out(c, T(0));
  const T* xv = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t p = 0; p < hw; ++p) acc += xv[ch * hw + p];
    out[ch] = acc * inv;
  }
  return detail::make_result<T>({c}, std::move(out), {x}, "global_avg_pool", [c, hw, inv](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T gv = self.grad[ch] * inv;
      for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += gv;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

enum class ConvGroups { kDepthwise, kPointwise };

struct ConvSpec {
  std::size_t kernel_size = 3;
  std::size_t dilation = 1;
  ConvGroups groups = ConvGroups::kDepthwise;

  // Zero padding that keeps the spatial extent unchanged.
  std::size_t padding() const { return dilation * (kernel_size - 1) / 2; }

  void validate() const {
    if (kernel_size % 2 == 0) throw ShapeError("convolution kernel size must be odd");
    if (dilation < 1) throw ShapeError("convolution dilation must be >= 1");
    if (groups == ConvGroups::kPointwise && (kernel_size != 1 || dilation != 1)) {
      throw ShapeError("pointwise convolution requires kernel 1 and dilation 1");
    }
  }
};

// Per-channel convolution, "same" output size. input C x H x W, weights C x k x k.
template <std::floating_point T>
Tensor<T> conv2d_depthwise(const Tensor<T>& input, const Tensor<T>& weights, const ConvSpec& spec) {
  spec.validate();
  detail::require_rank(input, 3, "conv2d_depthwise");
  detail::require_rank(weights, 3, "conv2d_depthwise");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t k = spec.kernel_size;
  if (weights.dim(1) != k || weights.dim(2) != k) {
    throw ShapeError("conv2d_depthwise: kernel extents " + shape_str(weights.shape()) +
                     " do not match kernel size " + std::to_string(k));
  }
  if (weights.dim(0) != c) {
    throw ShapeError("conv2d_depthwise: " + std::to_string(weights.dim(0)) + " kernels for " +
                     std::to_string(c) + " channels");
  }
  const auto d = static_cast<std::ptrdiff_t>(spec.dilation);
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding());
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);

  // Visits every (kernel tap, valid output row, valid column span).
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) * d - pad;
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(H, H - dy);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) * d - pad;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(W, W - dx);
          if (x0 >= x1) continue;
          const std::size_t widx = (ch * k + ky) * k + kx;
          for (std::ptrdiff_t y = y0; y < y1; ++y) {
            const std::size_t out_off = (ch * h + static_cast<std::size_t>(y)) * w;
            const std::size_t in_off = (ch * h + static_cast<std::size_t>(y + dy)) * w;
            body(widx, out_off + static_cast<std::size_t>(x0),
                 static_cast<std::size_t>(static_cast<std::ptrdiff_t>(in_off) + x0 + dx),
                 static_cast<std::size_t>(x1 - x0));
          }
        }
      }
    }
  };

  std::vector<T> out(input.numel(), T(0));
  {
    const T* in = input.data().data();
    const T* wt = weights.data().data();
    T* o = out.data();
    for_each_tap([&](std::size_t widx, std::size_t oo, std::size_t io, std::size_t n) {
      const T wv = wt[widx];
      for (std::size_t i = 0; i < n; ++i) o[oo + i] += wv * in[io + i];
    });
  }
  return detail::make_result<T>(input.shape(), std::move(out), {input, weights}, "conv2d_depthwise",
                                [for_each_tap](detail::Node<T>& self) {
    auto gin = detail::parent_grad(self, 0);
    auto gw = detail::parent_grad(self, 1);
    const T* in = detail::parent_value(self, 0).data();
    const T* wt = detail::parent_value(self, 1).data();
    const T* g = self.grad.data();
    for_each_tap([&](std::size_t widx, std::size_t oo, std::size_t io, std::size_t n) {
      if (!gin.empty()) {
        const T wv = wt[widx];
        T* gi = gin.data();
        for (std::size_t i = 0; i < n; ++i) gi[io + i] += wv * g[oo + i];
      }
      if (!gw.empty()) {
        gw[widx] += detail::dot(g + oo, in + io, n);
      }
    });
  });
}

// Per-pixel linear map across channels. input C x H x W, weights C' x C, bias C'.
template <std::floating_point T>
Tensor<T> conv2d_pointwise(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  detail::require_rank(input, 3, "conv2d_pointwise");
  detail::require_rank(weights, 2, "conv2d_pointwise");
  const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2), co = weights.dim(0);
  if (weights.dim(1) != c) {
    throw ShapeError("conv2d_pointwise: weights " + shape_str(weights.shape()) + " for " +
                     std::to_string(c) + " input channels");
  }
  if (bias.rank() != 1 || bias.dim(0) != co) {
    throw ShapeError("conv2d_pointwise: bias " + shape_str(bias.shape()) + " for " +
                     std::to_string(co) + " output channels");
  }
  std::vector<T> out(co * hw);
  const T* in = input.data().data();
  const T* wt = weights.data().data();
  for (std::size_t o = 0; o < co; ++o) {
    T* dst = out.data() + o * hw;
    std::fill(dst, dst + hw, bias[o]);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T wv = wt[o * c + ci];
      const T* src = in + ci * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] += wv * src[p];
    }
  }
  return detail::make_result<T>({co, input.dim(1), input.dim(2)}, std::move(out), {input, weights, bias},
                                "conv2d_pointwise", [c, co, hw](detail::Node<T>& self) {
    auto gin = detail::parent_grad(self, 0);
    auto gw = detail::parent_grad(self, 1);
    auto gb = detail::parent_grad(self, 2);
    const T* in = detail::parent_value(self, 0).data();
    const T* wt = detail::parent_value(self, 1).data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < co; ++o) {
      const T* go = g + o * hw;
      if (!gb.empty()) {
        gb[o] += detail::total(go, hw);
      }
      for (std::size_t ci = 0; ci < c; ++ci) {
        if (!gw.empty()) {
          gw[o * c + ci] += detail::dot(go, in + ci * hw, hw);
        }
        if (!gin.empty()) {
          const T wv = wt[o * c + ci];
          T* gi = gin.data() + ci * hw;
          for (std::size_t p = 0; p < hw; ++p) gi[p] += wv * go[p];
        }
      }
    }
  });
}

// 2x2 average pooling with stride 2. Spatial extents must be even.
template <std::floating_point T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  detail::require_rank(x, 3, "avg_pool2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial extent " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> out(c * oh * ow);
  const T* xv = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      const T* r0 = xv + (ch * h + 2 * y) * w;
      const T* r1 = r0 + w;
      T* o = out.data() + (ch * oh + y) * ow;
      for (std::size_t xx = 0; xx < ow; ++xx) {
        o[xx] = T(0.25) * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }
  return detail::make_result<T>({c, oh, ow}, std::move(out), {x}, "avg_pool2", [c, h, w, oh, ow](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        T* r0 = g.data() + (ch * h + 2 * y) * w;
        T* r1 = r0 + w;
        const T* go = self.grad.data() + (ch * oh + y) * ow;
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const T v = T(0.25) * go[xx];
          r0[2 * xx] += v;
          r0[2 * xx + 1] += v;
          r1[2 * xx] += v;
          r1[2 * xx + 1] += v;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

namespace detail {

// Source taps of one output coordinate under align_corners=false.
struct LerpTap {
  std::size_t i0, i1;
  double w0, w1;
};

inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double lambda = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - lambda, lambda};
  }
  return taps;
}

// out(C x oh x ow) = R in(C x ih x iw)
template <std::floating_point T>
void resize_apply(const T* in, T* out, std::size_t c, std::size_t ih, std::size_t iw, const std::vector<LerpTap>& ty,
                  const std::vector<LerpTap>& tx) {
  const std::size_t oh = ty.size(), ow = tx.size();
  std::vector<T> row(iw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = in + ch * ih * iw;
    T* dst = out + ch * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const T wy0 = static_cast<T>(ty[y].w0), wy1 = static_cast<T>(ty[y].w1);
      const T* r0 = src + ty[y].i0 * iw;
      const T* r1 = src + ty[y].i1 * iw;
      for (std::size_t x = 0; x < iw; ++x) row[x] = wy0 * r0[x] + wy1 * r1[x];
      T* o = dst + y * ow;
      for (std::size_t x = 0; x < ow; ++x) {
        o[x] = static_cast<T>(tx[x].w0) * row[tx[x].i0] + static_cast<T>(tx[x].w1) * row[tx[x].i1];
      }
    }
  }
}

// in(C x ih x iw) += R^T out_grad(C x oh x ow)
template <std::floating_point T>
void resize_transpose(const T* g, T* in_grad, std::size_t c, std::size_t ih, std::size_t iw,
                      const std::vector<LerpTap>& ty, const std::vector<LerpTap>& tx) {
  const std::size_t oh = ty.size(), ow = tx.size();
  std::vector<T> row(iw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* go = g + ch * oh * ow;
    T* dst = in_grad + ch * ih * iw;
    for (std::size_t y = 0; y < oh; ++y) {
      std::fill(row.begin(), row.end(), T(0));
      const T* gr = go + y * ow;
      for (std::size_t x = 0; x < ow; ++x) {
        row[tx[x].i0] += static_cast<T>(tx[x].w0) * gr[x];
        row[tx[x].i1] += static_cast<T>(tx[x].w1) * gr[x];
      }
      const T wy0 = static_cast<T>(ty[y].w0), wy1 = static_cast<T>(ty[y].w1);
      T* r0 = dst + ty[y].i0 * iw;
      T* r1 = dst + ty[y].i1 * iw;
      for (std::size_t x = 0; x < iw; ++x) {
        r0[x] += wy0 * row[x];
        r1[x] += wy1 * row[x];
      }
    }
  }
}

}  // namespace detail

// Bilinear interpolation, align_corners=false. C x H x W -> C x out_h x out_w.
template <std::floating_point T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(input, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: zero target extent");
  const std::size_t c = input.dim(0), ih = input.dim(1), iw = input.dim(2);
  if (ih == 0 || iw == 0) throw ShapeError("bilinear_resize: empty input");
  auto ty = detail::lerp_taps(ih, out_h);
  auto tx = detail::lerp_taps(iw, out_w);
  std::vector<T> out(c * out_h * out_w);
  detail::resize_apply(input.data().data(), out.data(), c, ih, iw, ty, tx);
  return detail::make_result<T>({c, out_h, out_w}, std::move(out), {input}, "bilinear_resize",
                                [c, ih, iw, ty = std::move(ty), tx = std::move(tx)](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    detail::resize_transpose(self.grad.data(), g.data(), c, ih, iw, ty, tx);
  });
}

// Transpose of bilinear_resize: maps a C x H x W field back onto the
// C x src_h x src_w grid it would have been resized from. Pooling a resized
// feature map against a weight field w equals pooling the original map
// against bilinear_resize_adjoint(w).
template <std::floating_point T>
Tensor<T> bilinear_resize_adjoint(const Tensor<T>& field, std::size_t src_h, std::size_t src_w) {
  detail::require_rank(field, 3, "bilinear_resize_adjoint");
  if (src_h == 0 || src_w == 0) throw ShapeError("bilinear_resize_adjoint: zero target extent");
  const std::size_t c = field.dim(0), oh = field.dim(1), ow = field.dim(2);
  auto ty = detail::lerp_taps(src_h, oh);
  auto tx = detail::lerp_taps(src_w, ow);
  std::vector<T> out(c * src_h * src_w, T(0));
  detail::resize_transpose(field.data().data(), out.data(), c, src_h, src_w, ty, tx);
  return detail::make_result<T>({c, src_h, src_w}, std::move(out), {field}, "bilinear_resize_adjoint",
                                [c, src_h, src_w, oh, ow, ty = std::move(ty), tx = std::move(tx)](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    std::vector<T> tmp(c * oh * ow);
    detail::resize_apply(self.grad.data(), tmp.data(), c, src_h, src_w, ty, tx);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
  });
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

// x / max(||x||, eps) for a rank-1 x.
template <std::floating_point T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  detail::require_rank(x, 1, "l2_normalize");
  T sq = 0;
  for (const T v : x.data()) sq += v * v;
  const T norm = std::sqrt(sq);
  const bool floored = !(norm > eps);
  const T denom = floored ? eps : norm;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / denom;
  return detail::make_result<T>(x.shape(), out, {x}, "l2_normalize", [denom, floored, out](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    if (floored) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / denom;
      return;
    }
    // (I - y y^T) g / ||x||
    T dot = 0;
    for (std::size_t i = 0; i < out.size(); ++i) dot += out[i] * self.grad[i];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (self.grad[i] - out[i] * dot) / denom;
  });
}

// x (D) . weights (1 x D) + bias (1) -> (1)
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  detail::require_rank(x, 1, "linear");
  const std::size_t d = x.dim(0);
  if (weights.rank() != 2 || weights.dim(0) != 1 || weights.dim(1) != d) {
    throw ShapeError("linear: weights " + shape_str(weights.shape()) + " for input of extent " + std::to_string(d));
  }
  if (bias.numel() != 1) throw ShapeError("linear: bias must hold one value");
  T acc = bias[0];
  for (std::size_t i = 0; i < d; ++i) acc += weights[i] * x[i];
  return detail::make_result<T>({1}, {acc}, {x, weights, bias}, "linear", [d](detail::Node<T>& self) {
    const T g = self.grad[0];
    auto gx = detail::parent_grad(self, 0);
    auto gw = detail::parent_grad(self, 1);
    auto gb = detail::parent_grad(self, 2);
    const auto& xv = detail::parent_value(self, 0);
    const auto& wv = detail::parent_value(self, 1);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * wv[i];
    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g * xv[i];
    if (!gb.empty()) gb[0] += g;
    (void)d;
  });
}

// sum_xy F(:,x,y) w(x,y) / sum_xy w(x,y). features Z x H x W, weights H x W.
template <std::floating_point T>
Tensor<T> weighted_pool(const Tensor<T>& features, const Tensor<T>& weights) {
  detail::require_rank(features, 3, "weighted_pool");
  const std::size_t z = features.dim(0), hw = features.dim(1) * features.dim(2);
  if (weights.numel() != hw || weights.rank() < 2 || weights.dim(weights.rank() - 1) != features.dim(2)) {
    throw ShapeError("weighted_pool: weights " + shape_str(weights.shape()) + " for features " +
                     shape_str(features.shape()));
  }
  T total = 0;
  for (const T v : weights.data()) total += v;
  if (!(total > T(0))) throw EmptyMaskError("weighted_pool: pooling weights sum to zero");
  const T inv = T(1) / total;
  std::vector<T> out(z, T(0));
  const T* f = features.data().data();
  const T* w = weights.data().data();
  for (std::size_t ch = 0; ch < z; ++ch) {
    T acc = 0;
    for (std::size_t p = 0; p < hw; ++p) acc += f[ch * hw + p] * w[p];
    out[ch] = acc * inv;
  }
  return detail::make_result<T>({z}, std::move(out), {features, weights}, "weighted_pool", [z, hw, inv](detail::Node<T>& self) {
    auto gf = detail::parent_grad(self, 0);
    auto gw = detail::parent_grad(self, 1);
    const T* f = detail::parent_value(self, 0).data();
    const T* w = detail::parent_value(self, 1).data();
    if (!gf.empty()) {
      for (std::size_t ch = 0; ch < z; ++ch) {
        const T gv = self.grad[ch] * inv;
        for (std::size_t p = 0; p < hw; ++p) gf[ch * hw + p] += gv * w[p];
      }
    }
    if (!gw.empty()) {
      // d p_c / d w_q = (F_cq - p_c) / sum(w)
      T gp = 0;
      for (std::size_t ch = 0; ch < z; ++ch) gp += self.grad[ch] * self.value[ch];
      for (std::size_t p = 0; p < hw; ++p) {
        T acc = 0;
        for (std::size_t ch = 0; ch < z; ++ch) acc += self.grad[ch] * f[ch * hw + p];
        gw[p] += (acc - gp) * inv;
      }
    }
  });
}

// S(x,y) = -scale * <q(:,x,y), p> / max(|q(:,x,y)| |p|, eps). query Z x H x W, p Z -> H x W.
template <std::floating_point T>
Tensor<T> cosine_score(const Tensor<T>& query, const Tensor<T>& prototype, T scale, T eps) {
  detail::require_rank(query, 3, "cosine_score");
  const std::size_t z = query.dim(0), h = query.dim(1), w = query.dim(2), hw = h * w;
  if (prototype.rank() != 1 || prototype.dim(0) != z) {
    throw ShapeError("cosine_score: prototype " + shape_str(prototype.shape()) + " for " + std::to_string(z) +
                     " channels");
  }
  T pn2 = 0;
  for (const T v : prototype.data()) pn2 += v * v;
  const T pn = std::sqrt(pn2);
  if (!(pn > T(0))) throw Error("cosine_score: zero prototype norm");

  const T* q = query.data().data();
  const T* pv = prototype.data().data();
  std::vector<T> dot(hw, T(0)), qn2(hw, T(0));
  for (std::size_t ch = 0; ch < z; ++ch) {
    const T* qc = q + ch * hw;
    const T pc = pv[ch];
    for (std::size_t i = 0; i < hw; ++i) {
      dot[i] += qc[i] * pc;
      qn2[i] += qc[i] * qc[i];
    }
  }
  std::vector<T> out(hw), denom(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    denom[i] = std::max(std::sqrt(qn2[i]) * pn, eps);
    out[i] = -scale * dot[i] / denom[i];
  }
  return detail::make_result<T>({h, w}, std::move(out), {query, prototype}, "cosine_score",
                                [z, hw, pn, scale, eps, dot = std::move(dot), qn2 = std::move(qn2),
                                 denom = std::move(denom)](detail::Node<T>& self) {
    auto gq = detail::parent_grad(self, 0);
    auto gp = detail::parent_grad(self, 1);
    const T* q = detail::parent_value(self, 0).data();
    const T* pv = detail::parent_value(self, 1).data();
    // With the floor active the denominator is constant: dS = -scale * d<q,p>/eps.
    // Otherwise c = dot/(|q||p|): dc/dq = p/D - dot q/(|q|^2 D), dc/dp = q/D - dot p/(|p|^2 D).
    std::vector<T> a(hw), bq(hw), bp(hw);
    T bp_total = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const T gs = -scale * self.grad[i] / denom[i];
      const bool floored = std::sqrt(qn2[i]) * pn < eps;
      a[i] = gs;
      bq[i] = floored ? T(0) : gs * dot[i] / qn2[i];
      bp[i] = floored ? T(0) : gs * dot[i] / (pn * pn);
      bp_total += bp[i];
    }
    if (!gq.empty()) {
      for (std::size_t ch = 0; ch < z; ++ch) {
        const T* qc = q + ch * hw;
        T* g = gq.data() + ch * hw;
        const T pc = pv[ch];
        for (std::size_t i = 0; i < hw; ++i) g[i] += a[i] * pc - bq[i] * qc[i];
      }
    }
    if (!gp.empty()) {
      for (std::size_t ch = 0; ch < z; ++ch) {
        const T* qc = q + ch * hw;
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += a[i] * qc[i];
        gp[ch] += acc - bp_total * pv[ch];
      }
    }
  });
}

// Reshape without copying semantics beyond the value buffer.
template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, "reshape", [](detail::Node<T>& self) {
    auto g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

}  // namespace plka
