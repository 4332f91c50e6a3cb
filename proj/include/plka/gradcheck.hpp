#pragma once

// Central finite-difference checks of every differentiable operation in
// double precision. Each case draws random inputs, reduces the output with a
// fixed random weighting, and compares the analytic gradient of every input
// against (f(x + h) - f(x - h)) / 2h on a sample of coordinates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "plka/encoder.hpp"
#include "plka/fusion_loss.hpp"
#include "plka/lka.hpp"
#include "plka/model.hpp"
#include "plka/ops.hpp"
#include "plka/proto_head.hpp"
#include "plka/rng.hpp"

namespace plka {

struct GradcheckOptions {
  std::size_t instances = 20;
  std::size_t coords_per_input = 12;  // sampled coordinates per input tensor
  double step = 1e-5;
  double tolerance = 1e-5;
  std::uint64_t seed = 1;
  bool corrupt_gelu = false;  // negative control: wrong gelu derivative
};

struct GradcheckResult {
  std::string op;
  std::size_t instances = 0;
  double max_rel_error = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;
  double seconds = 0;

  bool passed() const {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  }
};

namespace gradcheck {

using T = double;

// Leaves of one instance plus its forward function over them.
struct Instance {
  std::vector<Tensor<T>> leaves;
  std::function<Tensor<T>()> forward;
};

struct Case {
  std::string op;
  std::function<Instance(Rng&, const GradcheckOptions&)> make;
};

inline Tensor<T> leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

// Uniform in [lo, hi] but at least `gap` away from every point in `avoid`.
inline Tensor<T> leaf_avoiding(Shape shape, Rng& rng, double lo, double hi, std::vector<double> avoid, double gap) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) {
    do {
      x = uniform(rng, lo, hi);
    } while (std::any_of(avoid.begin(), avoid.end(), [&](double a) { return std::abs(x - a) < gap; }));
  }
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

inline Tensor<T> constant(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor<T>::from(std::move(shape), std::move(v), false);
}

inline Tensor<T> binary_constant(Shape shape, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, 0.0, 1.0) < 0.4 ? 1.0 : 0.0;
  v[0] = 1.0;
  return Tensor<T>::from(std::move(shape), std::move(v), false);
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(hi - lo + 1))) % (hi - lo + 1);
}

inline double weighted_sum(const Tensor<T>& y, const std::vector<T>& w) {
  double acc = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) acc += y[i] * w[i];
  return acc;
}

inline double run_instance(Instance& inst, Rng& rng, const GradcheckOptions& opts) {
  const auto probe = [&] {
    NoGradGuard off;
    return inst.forward();
  }();
  std::vector<T> w(probe.numel());
  for (auto& x : w) x = uniform(rng, -1.0, 1.0);

  for (auto& l : inst.leaves) l.zero_grad();
  auto y = inst.forward();
  auto loss = sum(mul(y, Tensor<T>::from(y.shape(), w)));
  loss.backward();

  double diff2 = 0, a2 = 0, n2 = 0;
  for (auto& l : inst.leaves) {
    const auto grad = l.grad();
    std::vector<T> analytic(l.numel(), T(0));
    if (!grad.empty()) std::copy(grad.begin(), grad.end(), analytic.begin());
    std::vector<std::size_t> coords(l.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > opts.coords_per_input) {
      for (std::size_t i = 0; i < opts.coords_per_input; ++i) {
        std::swap(coords[i], coords[pick(rng, i, coords.size() - 1)]);
      }
      coords.resize(opts.coords_per_input);
    }
    for (const auto c : coords) {
      auto data = l.mutable_data();
      const T orig = data[c];
      NoGradGuard off;
      data[c] = orig + opts.step;
      const double up = weighted_sum(inst.forward(), w);
      data[c] = orig - opts.step;
      const double down = weighted_sum(inst.forward(), w);
      data[c] = orig;
      const double numeric = (up - down) / (2 * opts.step);
      diff2 += (analytic[c] - numeric) * (analytic[c] - numeric);
      a2 += analytic[c] * analytic[c];
      n2 += numeric * numeric;
    }
  }
  const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-10});
  return std::sqrt(diff2) / scale;
}

inline Tensor<T> corrupted_gelu(const Tensor<T>& x) {
  return elementwise_unary(
      x, [](T v) { return gelu_value(v); }, [](T v, T) { return gelu_derivative(v) + T(0.1) * v; }, "gelu");
}

inline LkaParams<T> lka_params(std::size_t z, std::size_t k, std::size_t d, Rng& rng) {
  auto p = LkaParams<T>::init(z, k, d, rng);
  return p;
}

inline std::vector<Tensor<T>> lka_leaves(const LkaParams<T>& p) {
  return {p.proj_in_w, p.proj_in_b, p.dw, p.dwd, p.proj_attn_w, p.proj_attn_b};
}

inline std::vector<Case> cases() {
  std::vector<Case> out;
  auto add_case = [&](std::string op, std::function<Instance(Rng&, const GradcheckOptions&)> make) {
    out.push_back({std::move(op), std::move(make)});
  };
  auto small_shape = [](Rng& rng) {
    return Shape{pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
  };

  add_case("add", [=](Rng& rng, const GradcheckOptions&) {
    const auto s = small_shape(rng);
    auto a = leaf(s, rng), b = leaf(s, rng);
    return Instance{{a, b}, [=] { return add(a, b); }};
  });
  add_case("sub", [=](Rng& rng, const GradcheckOptions&) {
    const auto s = small_shape(rng);
    auto a = leaf(s, rng), b = leaf(s, rng);
    return Instance{{a, b}, [=] { return sub(a, b); }};
  });
  add_case("mul", [=](Rng& rng, const GradcheckOptions&) {
    const auto s = small_shape(rng);
    auto a = leaf(s, rng), b = leaf(s, rng);
    return Instance{{a, b}, [=] { return mul(a, b); }};
  });
  add_case("scale", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng);
    const T s = uniform(rng, -3.0, 3.0);
    return Instance{{a}, [=] { return scale(a, s); }};
  });
  add_case("add_scalar", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng);
    const T s = uniform(rng, -3.0, 3.0);
    return Instance{{a}, [=] { return add_scalar(a, s); }};
  });
  add_case("one_minus", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng);
    return Instance{{a}, [=] { return one_minus(a); }};
  });
  add_case("sub_broadcast", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf({pick(rng, 2, 6), pick(rng, 2, 6)}, rng);
    auto t = leaf({1}, rng);
    return Instance{{a, t}, [=] { return sub_broadcast(a, t); }};
  });
  add_case("gelu", [=](Rng& rng, const GradcheckOptions& o) {
    auto a = leaf(small_shape(rng), rng, -4.0, 4.0);
    const bool bad = o.corrupt_gelu;
    return Instance{{a}, [=] { return bad ? corrupted_gelu(a) : gelu(a); }};
  });
  add_case("sigmoid", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng, -8.0, 8.0);
    return Instance{{a}, [=] { return sigmoid(a); }};
  });
  add_case("log", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng, 0.2, 3.0);
    return Instance{{a}, [=] { return log(a); }};
  });
  add_case("clamp", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf_avoiding(small_shape(rng), rng, -1.5, 1.5, {-0.5, 0.7}, 1e-3);
    return Instance{{a}, [=] { return clamp(a, T(-0.5), T(0.7)); }};
  });
  // The straight-through clamp passes gradients unchanged; finite differences
  // agree with it inside the bounds only.
  add_case("clamp_straight_through", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng, 0.05, 0.95);
    return Instance{{a}, [=] { return clamp_straight_through(a, T(1e-7), T(1 - 1e-7)); }};
  });
  add_case("binary_cross_entropy", [=](Rng& rng, const GradcheckOptions&) {
    const Shape s{pick(rng, 2, 6), pick(rng, 2, 6)};
    auto fg = leaf(s, rng, 0.05, 0.95), bg = leaf(s, rng, 0.05, 0.95);
    auto truth = leaf(s, rng, 0.0, 1.0);
    return Instance{{fg, bg, truth}, [=] { return binary_cross_entropy(fg, bg, truth, T(1e-7)); }};
  });
  add_case("sum", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng);
    return Instance{{a}, [=] { return sum(a); }};
  });
  add_case("mean", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng);
    return Instance{{a}, [=] { return mean(a); }};
  });
  add_case("global_avg_pool", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf(small_shape(rng), rng);
    return Instance{{a}, [=] { return global_avg_pool(a); }};
  });
  add_case("conv2d_depthwise", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t c = pick(rng, 1, 3), k = pick(rng, 0, 1) ? 3 : 5, d = pick(rng, 1, 2);
    auto x = leaf({c, pick(rng, 3, 8), pick(rng, 3, 8)}, rng);
    auto w = leaf({c, k, k}, rng);
    const ConvSpec spec{k, d, ConvGroups::kDepthwise};
    return Instance{{x, w}, [=] { return conv2d_depthwise(x, w, spec); }};
  });
  add_case("conv2d_pointwise", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t c = pick(rng, 1, 4), co = pick(rng, 1, 4);
    auto x = leaf({c, pick(rng, 2, 5), pick(rng, 2, 5)}, rng);
    auto w = leaf({co, c}, rng), b = leaf({co}, rng);
    return Instance{{x, w, b}, [=] { return conv2d_pointwise(x, w, b); }};
  });
  add_case("avg_pool2", [=](Rng& rng, const GradcheckOptions&) {
    auto x = leaf({pick(rng, 1, 3), 2 * pick(rng, 1, 4), 2 * pick(rng, 1, 4)}, rng);
    return Instance{{x}, [=] { return avg_pool2(x); }};
  });
  add_case("bilinear_resize", [=](Rng& rng, const GradcheckOptions&) {
    auto x = leaf({pick(rng, 1, 2), pick(rng, 2, 6), pick(rng, 2, 6)}, rng);
    const std::size_t oh = pick(rng, 2, 12), ow = pick(rng, 2, 12);
    return Instance{{x}, [=] { return bilinear_resize(x, oh, ow); }};
  });
  add_case("bilinear_resize_adjoint", [=](Rng& rng, const GradcheckOptions&) {
    auto f = leaf({pick(rng, 1, 2), pick(rng, 2, 12), pick(rng, 2, 12)}, rng);
    const std::size_t sh = pick(rng, 2, 6), sw = pick(rng, 2, 6);
    return Instance{{f}, [=] { return bilinear_resize_adjoint(f, sh, sw); }};
  });
  add_case("l2_normalize", [=](Rng& rng, const GradcheckOptions&) {
    auto x = leaf({pick(rng, 2, 8)}, rng, 0.1, 1.0);
    return Instance{{x}, [=] { return l2_normalize(x, T(1e-8)); }};
  });
  add_case("linear", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t d = pick(rng, 1, 8);
    auto x = leaf({d}, rng), w = leaf({1, d}, rng), b = leaf({1}, rng);
    return Instance{{x, w, b}, [=] { return linear(x, w, b); }};
  });
  add_case("weighted_pool", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    auto f = leaf({pick(rng, 1, 4), h, w}, rng);
    auto m = leaf({h, w}, rng, 0.1, 1.0);
    return Instance{{f, m}, [=] { return weighted_pool(f, m); }};
  });
  add_case("cosine_score", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t z = pick(rng, 2, 5);
    auto q = leaf({z, pick(rng, 2, 5), pick(rng, 2, 5)}, rng);
    auto p = leaf({z}, rng, 0.2, 1.0);
    return Instance{{q, p}, [=] { return cosine_score(q, p, T(20), T(1e-8)); }};
  });
  add_case("reshape", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    auto x = leaf({a, b, 2}, rng);
    return Instance{{x}, [=] { return reshape(x, {2 * a * b}); }};
  });

  // Composites.
  add_case("lka_map", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t z = pick(rng, 1, 3);
    auto p = lka_params(z, 3, pick(rng, 1, 2), rng);
    auto f = leaf({z, pick(rng, 4, 8), pick(rng, 4, 8)}, rng);
    auto leaves = lka_leaves(p);
    leaves.insert(leaves.begin(), f);
    return Instance{leaves, [=] { return lka_map(f, p); }};
  });
  add_case("attend", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t z = pick(rng, 1, 3);
    auto p = lka_params(z, 3, 2, rng);
    auto f = leaf({z, pick(rng, 5, 9), pick(rng, 5, 9)}, rng);
    auto leaves = lka_leaves(p);
    leaves.insert(leaves.begin(), f);
    return Instance{leaves, [=] { return attend(f, p); }};
  });
  add_case("extract", [=](Rng& rng, const GradcheckOptions&) {
    auto params = EncoderParams<T>::init(4, rng);
    auto img = leaf({3, 16, 16}, rng, 0.0, 1.0);
    std::vector<Tensor<T>> leaves{img};
    for (const auto& b : params.blocks) {
      leaves.push_back(b.pw_w);
      leaves.push_back(b.pw_b);
      leaves.push_back(b.dw);
    }
    return Instance{leaves, [=] {
                      auto taps = extract(img, params);
                      return add(sum(taps.quarter), scale(sum(taps.eighth), T(0.5)));
                    }};
  });
  add_case("masked_avg_pool", [=](Rng& rng, const GradcheckOptions&) {
    auto f = leaf({pick(rng, 1, 4), 4, 4}, rng);
    auto m = binary_constant({16, 16}, rng);
    return Instance{{f}, [=] { return masked_avg_pool(f, m); }};
  });
  add_case("anomaly_score", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t z = pick(rng, 2, 4);
    auto q = leaf({z, 4, 4}, rng);
    auto p = leaf({z}, rng, 0.2, 1.0);
    return Instance{{q, p}, [=] { return anomaly_score(q, p); }};
  });
  add_case("adaptive_threshold", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t z = pick(rng, 2, 4);
    auto q = leaf({z, 4, 4}, rng, 0.0, 1.0);
    ThresholdHead<T> head{leaf({1, z}, rng), leaf({1}, rng)};
    return Instance{{q, head.weights, head.bias}, [=] { return adaptive_threshold(q, head); }};
  });
  add_case("predict_masks", [=](Rng& rng, const GradcheckOptions&) {
    auto s = leaf({4, 5}, rng, -5.0, 5.0);
    auto t = leaf({1}, rng);
    return Instance{{s, t}, [=] {
                      auto m = predict_masks(s, t);
                      return add(m.fg, scale(m.bg, T(0.3)));
                    }};
  });
  add_case("upsample", [=](Rng& rng, const GradcheckOptions&) {
    auto fg = leaf({4, 4}, rng, 0.0, 1.0);
    return Instance{{fg}, [=] {
                      MaskPrediction<T> m{fg, one_minus(fg)};
                      auto u = upsample(m, 9, 7);
                      return add(u.fg, scale(u.bg, T(0.3)));
                    }};
  });
  // Composites run at a moderate score scale: at the default scale the soft
  // masks saturate below the loss clamp, where the straight-through gradient
  // is nonzero but the function is flat.
  constexpr T kScale = 2;
  // End to end: pooling, scoring, threshold and soft masks.
  add_case("prototype_pipeline", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t z = pick(rng, 2, 4);
    auto fs = leaf({z, 4, 4}, rng, 0.0, 1.0), fq = leaf({z, 4, 4}, rng, 0.0, 1.0);
    auto m = binary_constant({8, 8}, rng);
    ThresholdHead<T> head{leaf({1, z}, rng), leaf({1}, rng)};
    return Instance{{fs, fq, head.weights, head.bias}, [=] {
                      auto p = masked_avg_pool(fs, m);
                      return predict_masks(anomaly_score(fq, p, kScale), adaptive_threshold(fq, head)).fg;
                    }};
  });
  add_case("fuse", [=](Rng& rng, const GradcheckOptions&) {
    auto a = leaf({3, 4}, rng, 0.0, 1.0), b = leaf({3, 4}, rng, 0.0, 1.0);
    const FusionConfig cfg{uniform(rng, 0.1, 0.9)};
    return Instance{{a, b}, [=] {
                      auto f = fuse(MaskPrediction<T>{a, one_minus(a)}, MaskPrediction<T>{b, one_minus(b)}, cfg);
                      return add(f.fg, scale(f.bg, T(0.3)));
                    }};
  });
  add_case("seg_loss", [=](Rng& rng, const GradcheckOptions&) {
    auto fg = leaf({4, 5}, rng, 0.05, 0.95);
    auto truth = binary_constant({4, 5}, rng);
    return Instance{{fg}, [=] { return seg_loss(MaskPrediction<T>{fg, one_minus(fg)}, truth); }};
  });
  add_case("align_loss", [=](Rng& rng, const GradcheckOptions&) {
    const std::size_t z = pick(rng, 2, 3);
    auto fs0 = leaf({z, 4, 4}, rng, 0.0, 1.0), fq0 = leaf({z, 4, 4}, rng, 0.0, 1.0);
    auto fs1 = leaf({z, 2, 2}, rng, 0.0, 1.0), fq1 = leaf({z, 2, 2}, rng, 0.0, 1.0);
    auto qfg0 = leaf({8, 8}, rng, 0.05, 0.95), qfg1 = leaf({8, 8}, rng, 0.05, 0.95);
    auto sm = binary_constant({8, 8}, rng);
    auto h0 = std::make_shared<ThresholdHead<T>>(ThresholdHead<T>{leaf({1, z}, rng), leaf({1}, rng)});
    auto h1 = std::make_shared<ThresholdHead<T>>(ThresholdHead<T>{leaf({1, z}, rng), leaf({1}, rng)});
    return Instance{{fs0, fq0, fs1, fq1, qfg0, qfg1, h0->weights, h0->bias, h1->weights, h1->bias}, [=] {
                      std::array<AlignPath<T>, 2> paths{AlignPath<T>{fs0, fq0, qfg0, h0.get()},
                                                        AlignPath<T>{fs1, fq1, qfg1, h1.get()}};
                      return align_loss(paths, sm, FusionConfig{0.8}, kScale).loss;
                    }};
  });
  add_case("total_loss", [=](Rng& rng, const GradcheckOptions&) {
    ModelConfig mc;
    mc.channels = 4;
    mc.score_scale = kScale;
    auto model = std::make_shared<Model<T>>(mc, rng);
    auto si = constant({3, 32, 32}, rng, 0.0, 1.0), qi = constant({3, 32, 32}, rng, 0.0, 1.0);
    auto sm = binary_constant({32, 32}, rng), qm = binary_constant({32, 32}, rng);
    std::vector<Tensor<T>> leaves;
    for (const auto& [_, t] : model->params()) leaves.push_back(t);
    return Instance{leaves, [=] { return model->forward(si, sm, qi, qm).loss->total; }};
  });
  return out;
}

}  // namespace gradcheck

inline GradcheckReport run_gradcheck(const GradcheckOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckReport report;
  const auto all = gradcheck::cases();
  for (std::size_t ci = 0; ci < all.size(); ++ci) {
    GradcheckResult r;
    r.op = all[ci].op;
    for (std::size_t i = 0; i < opts.instances; ++i) {
      Rng rng(derive_seed(opts.seed, Stream::kGradcheck, {ci, i}));
      auto inst = all[ci].make(rng, opts);
      const double err = gradcheck::run_instance(inst, rng, opts);
      r.max_rel_error = std::max(r.max_rel_error, std::isfinite(err) ? err : 1e300);
      ++r.instances;
    }
    r.passed = r.max_rel_error < opts.tolerance;
    report.results.push_back(r);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace plka
