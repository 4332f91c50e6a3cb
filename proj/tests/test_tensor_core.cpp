#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "oracles.hpp"
#include "plka/gradcheck.hpp"
#include "plka/ops.hpp"
#include "plka/serialize.hpp"

using namespace plka;
using TD = Tensor<double>;

namespace {

TD random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return TD::from(std::move(shape), std::move(v), grad);
}

std::vector<double> values(const TD& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Tensor, ShapeMatchesDataLength) {
  EXPECT_THROW(TD::from({2, 3}, std::vector<double>(5)), ShapeError);
  const auto t = TD::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
}

TEST(Tensor, NonFiniteValuesRaise) {
  const auto a = TD::from({2}, {1.0, 0.0});
  EXPECT_THROW(log(a), NumericError);
  const auto big = TD::from({1}, {std::numeric_limits<double>::max()});
  EXPECT_THROW(scale(big, 10.0), NumericError);
}

TEST(Backward, SumGivesOnes) {
  auto x = TD::from({3}, {1, -2, 5}, true);
  sum(x).backward();
  for (const double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, QuadraticGivesTwiceInput) {
  auto x = TD::from({4}, {0.5, -1.5, 2.0, 3.0}, true);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = TD::from({2}, {1, 2}, true);
  auto loss = sum(scale(x, 3.0));
  loss.backward();
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = TD::from({2}, {1, 2}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(Backward, NoGradModeRecordsNothing) {
  auto x = TD::from({2}, {1, 2}, true);
  NoGradGuard off;
  const auto y = sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(ConvSpec, ValidatesKernelAndDilation) {
  EXPECT_THROW((ConvSpec{4, 1, ConvGroups::kDepthwise}.validate()), ShapeError);
  EXPECT_THROW((ConvSpec{3, 0, ConvGroups::kDepthwise}.validate()), ShapeError);
  EXPECT_THROW((ConvSpec{3, 1, ConvGroups::kPointwise}.validate()), ShapeError);
  EXPECT_EQ((ConvSpec{3, 2, ConvGroups::kDepthwise}.padding()), 2u);
}

TEST(Depthwise, IdentityKernelIsIdentity) {
  Rng rng(1);
  const auto x = random_tensor({2, 6, 5}, rng);
  std::vector<double> w(2 * 9, 0.0);
  w[4] = w[13] = 1.0;
  const auto y = conv2d_depthwise(x, TD::from({2, 3, 3}, w), ConvSpec{3, 1, ConvGroups::kDepthwise});
  EXPECT_EQ(values(y), values(x));
}

TEST(Depthwise, OnesKernelOnConstantField) {
  const auto x = TD::full({1, 5, 5}, 0.25);
  const auto y = conv2d_depthwise(x, TD::full({1, 3, 3}, 1.0), ConvSpec{3, 1, ConvGroups::kDepthwise});
  EXPECT_DOUBLE_EQ(y[2 * 5 + 2], 9 * 0.25);
  EXPECT_DOUBLE_EQ(y[0], 4 * 0.25);
}

TEST(Depthwise, MatchesNaiveOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + trial % 3, h = 3 + trial % 5, w = 4 + trial % 4, k = trial % 2 ? 3 : 5;
    const std::size_t d = 1 + trial % 2;
    const auto x = random_tensor({c, h, w}, rng);
    const auto kern = random_tensor({c, k, k}, rng);
    const auto y = conv2d_depthwise(x, kern, ConvSpec{k, d, ConvGroups::kDepthwise});
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_LT(max_abs_diff(values(y), oracle::depthwise(values(x), values(kern), c, h, w, k, d)), 1e-12);
  }
}

TEST(Depthwise, DilationTwoMatchesOracle) {
  Rng rng(3);
  const auto x = random_tensor({2, 5, 5}, rng);
  const auto kern = random_tensor({2, 3, 3}, rng);
  const auto y = conv2d_depthwise(x, kern, ConvSpec{3, 2, ConvGroups::kDepthwise});
  EXPECT_LT(max_abs_diff(values(y), oracle::depthwise(values(x), values(kern), 2, 5, 5, 3, 2)), 1e-12);
}

TEST(Depthwise, RejectsMismatchedChannels) {
  EXPECT_THROW(conv2d_depthwise(TD::zeros({2, 4, 4}), TD::zeros({3, 3, 3}), ConvSpec{}), ShapeError);
  EXPECT_THROW(conv2d_depthwise(TD::zeros({2, 4, 4}), TD::zeros({2, 4, 4}), ConvSpec{4, 1}), ShapeError);
}

TEST(Depthwise, IsLinearInInput) {
  Rng rng(4);
  const auto x = random_tensor({2, 6, 6}, rng), z = random_tensor({2, 6, 6}, rng);
  const auto kern = random_tensor({2, 3, 3}, rng);
  const ConvSpec spec{3, 2, ConvGroups::kDepthwise};
  const double a = 1.7, b = -0.6;
  const auto lhs = conv2d_depthwise(add(scale(x, a), scale(z, b)), kern, spec);
  const auto rhs = add(scale(conv2d_depthwise(x, kern, spec), a), scale(conv2d_depthwise(z, kern, spec), b));
  EXPECT_LT(max_abs_diff(values(lhs), values(rhs)), 1e-10);
}

TEST(Pointwise, IdentityWeights) {
  Rng rng(5);
  const auto x = random_tensor({3, 4, 4}, rng);
  std::vector<double> w(9, 0.0);
  w[0] = w[4] = w[8] = 1;
  EXPECT_EQ(values(conv2d_pointwise(x, TD::from({3, 3}, w), TD::zeros({3}))), values(x));
}

TEST(Pointwise, SumsConstantChannels) {
  std::vector<double> v(2 * 9);
  for (std::size_t i = 0; i < 9; ++i) v[i] = 0.3, v[9 + i] = 1.1;
  const auto y = conv2d_pointwise(TD::from({2, 3, 3}, v), TD::from({1, 2}, {1, 1}), TD::zeros({1}));
  for (const double x : y.data()) EXPECT_DOUBLE_EQ(x, 1.4);
}

TEST(Pointwise, MatchesMatvecOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + trial % 4, co = 1 + trial % 3, h = 2 + trial % 3, w = 3;
    const auto x = random_tensor({c, h, w}, rng);
    const auto wt = random_tensor({co, c}, rng), b = random_tensor({co}, rng);
    const auto y = conv2d_pointwise(x, wt, b);
    EXPECT_LT(max_abs_diff(values(y), oracle::pointwise(values(x), values(wt), values(b), c, co, h * w)), 1e-12);
  }
}

TEST(Pointwise, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d_pointwise(TD::zeros({2, 3, 3}), TD::zeros({1, 3}), TD::zeros({1})), ShapeError);
}

TEST(Gelu, KnownValues) {
  const auto y = gelu(TD::from({3}, {0.0, 10.0, 1.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 10.0, 1e-9);
  const double oracle1 = 0.5 * (1 + static_cast<double>(oracle::erf_series(1 / std::sqrt(2.0L))));
  EXPECT_NEAR(y[2], oracle1, 1e-12);
  EXPECT_NEAR(y[2], 0.841345, 1e-6);
}

TEST(Gelu, FloatErfApproximationStaysInBound) {
  double worst = 0;
  for (int i = -4000; i <= 4000; ++i) {
    const long double x = i / 1000.0L;
    worst = std::max(worst, static_cast<double>(std::abs(erf_rational(static_cast<float>(x)) - oracle::erf_series(x))));
  }
  // 1.5e-7 for the rational form, the rest from single-precision exp and rounding.
  EXPECT_LT(worst, 4e-7);
}

TEST(Sigmoid, KnownValues) {
  const auto y = sigmoid(TD::from({2}, {0.0, -20.0}));
  EXPECT_EQ(y[0], 0.5);
  EXPECT_LT(y[1], 2.1e-9);
  EXPECT_NEAR(y[1], 1 / (1 + std::exp(20.0)), 1e-20);
}

TEST(Sigmoid, Reflection) {
  Rng rng(7);
  const auto x = random_tensor({50}, rng, -30, 30);
  const auto a = sigmoid(x), b = sigmoid(scale(x, -1.0));
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(a[i] + b[i], 1.0, 1e-15);
}

TEST(BilinearResize, SameSizeIsIdentity) {
  Rng rng(8);
  const auto x = random_tensor({2, 5, 7}, rng);
  EXPECT_EQ(values(bilinear_resize(x, 5, 7)), values(x));
}

TEST(BilinearResize, ConstantStaysConstant) {
  const auto y = bilinear_resize(TD::full({1, 3, 4}, 0.7), 13, 5);
  for (const double v : y.data()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(BilinearResize, TwoByTwoToFourByFour) {
  const auto y = bilinear_resize(TD::from({1, 2, 2}, {0, 1, 2, 3}), 4, 4);
  // Sample positions along each axis: 0, 0.25, 0.75, 1 (edges clamp).
  const std::vector<double> expected = {0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5,
                                        1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0};
  EXPECT_LT(max_abs_diff(values(y), expected), 1e-15);
}

TEST(BilinearResize, MatchesSamplingOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 2 + trial % 5, w = 3 + trial % 4, oh = 1 + trial % 11, ow = 2 + trial % 7;
    const auto x = random_tensor({1, h, w}, rng);
    const auto y = bilinear_resize(x, oh, ow);
    for (std::size_t yy = 0; yy < oh; ++yy)
      for (std::size_t xx = 0; xx < ow; ++xx)
        EXPECT_NEAR(y[yy * ow + xx], oracle::bilinear_sample(values(x), h, w, oh, ow, yy, xx), 1e-12);
  }
}

TEST(BilinearResize, AdjointSatisfiesInnerProductIdentity) {
  Rng rng(10);
  const auto x = random_tensor({2, 4, 6}, rng), f = random_tensor({2, 9, 5}, rng);
  const auto rx = bilinear_resize(x, 9, 5), af = bilinear_resize_adjoint(f, 4, 6);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < rx.numel(); ++i) lhs += rx[i] * f[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * af[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(BilinearResize, RejectsZeroExtent) { EXPECT_THROW(bilinear_resize(TD::zeros({1, 2, 2}), 0, 3), ShapeError); }

TEST(Linear, ConstantHeadAndSelector) {
  const auto x = TD::from({3}, {0.2, -0.4, 0.9});
  EXPECT_DOUBLE_EQ(linear(x, TD::zeros({1, 3}), TD::from({1}, {0.35})).item(), 0.35);
  EXPECT_DOUBLE_EQ(linear(x, TD::from({1, 3}, {0, 1, 0}), TD::from({1}, {0.5})).item(), -0.4 + 0.5);
}

TEST(Linear, MatchesDotOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + trial;
    const auto x = random_tensor({d}, rng), w = random_tensor({1, d}, rng), b = random_tensor({1}, rng);
    double acc = b[0];
    for (std::size_t i = 0; i < d; ++i) acc += x[i] * w[i];
    EXPECT_NEAR(linear(x, w, b).item(), acc, 1e-12);
  }
  EXPECT_THROW(linear(TD::zeros({3}), TD::zeros({1, 2}), TD::zeros({1})), ShapeError);
}

TEST(Reductions, MeanSumAndGlobalPool) {
  const auto x = TD::from({2, 1, 2}, {1, 3, 5, 9});
  EXPECT_DOUBLE_EQ(sum(x).item(), 18);
  EXPECT_DOUBLE_EQ(mean(x).item(), 4.5);
  const auto g = global_avg_pool(x);
  EXPECT_DOUBLE_EQ(g[0], 2);
  EXPECT_DOUBLE_EQ(g[1], 7);
}

TEST(Clamp, StraightThroughPassesGradient) {
  auto x = TD::from({3}, {-1.0, 0.5, 2.0}, true);
  sum(clamp_straight_through(x, 0.0, 1.0)).backward();
  for (const double g : x.grad()) EXPECT_EQ(g, 1.0);
  auto z = TD::from({3}, {-1.0, 0.5, 2.0}, true);
  sum(clamp(z, 0.0, 1.0)).backward();
  EXPECT_EQ(z.grad()[0], 0.0);
  EXPECT_EQ(z.grad()[1], 1.0);
}

TEST(L2Normalize, UnitNormAndFloor) {
  const auto y = l2_normalize(TD::from({2}, {3.0, 4.0}), 1e-8);
  EXPECT_DOUBLE_EQ(y[0], 0.6);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
  const auto z = l2_normalize(TD::zeros({3}), 1e-8);
  for (const double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Serialization, RoundTripIsBitExact) {
  Rng rng(12);
  std::vector<float> v(2 * 3 * 4);
  for (auto& x : v) x = static_cast<float>(normal(rng));
  const auto t = Tensor<float>::from({2, 3, 4}, v);
  std::stringstream ss;
  write_tensor(ss, t);
  const auto bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "PLKA");
  EXPECT_EQ(bytes.size(), 4 + 4 + 4 + 3 * 4 + v.size() * 4);
  const auto back = read_tensor<float>(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::vector<float>(back.data().begin(), back.data().end()), v);
}

TEST(Serialization, RejectsBadMagic) {
  std::stringstream ss("XXXX0000");
  EXPECT_THROW(read_tensor<float>(ss), IoError);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  Rng a(13), b(13);
  const auto x = random_tensor({2, 8, 8}, a), y = random_tensor({2, 8, 8}, b);
  const auto k = TD::full({2, 3, 3}, 0.1);
  EXPECT_EQ(values(gelu(conv2d_depthwise(x, k, ConvSpec{3, 2}))), values(gelu(conv2d_depthwise(y, k, ConvSpec{3, 2}))));
}

TEST(Gradcheck, EveryOpPassesOnce) {
  const auto report = run_gradcheck();
  std::set<std::string> seen;
  for (const auto& r : report.results) {
    EXPECT_TRUE(seen.insert(r.op).second) << r.op << " reported twice";
    EXPECT_TRUE(r.passed) << r.op << " rel err " << r.max_rel_error;
    EXPECT_GE(r.instances, 20u);
  }
  for (const char* op : {"gelu", "sigmoid", "conv2d_depthwise", "conv2d_pointwise", "bilinear_resize", "linear",
                         "attend", "extract", "masked_avg_pool", "seg_loss", "align_loss", "total_loss"}) {
    EXPECT_TRUE(seen.count(op)) << op;
  }
  EXPECT_LT(report.seconds, 60.0);
}

TEST(Gradcheck, CorruptedGeluIsReported) {
  GradcheckOptions opts;
  opts.corrupt_gelu = true;
  opts.instances = 3;
  const auto report = run_gradcheck(opts);
  EXPECT_FALSE(report.passed());
  for (const auto& r : report.results) EXPECT_EQ(r.passed, r.op != "gelu") << r.op;
}
