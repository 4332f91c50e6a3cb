#pragma once

// Prototype prediction for one scale path: masked average pooling of support
// features, scaled negative-cosine anomaly scores against the query, a
// learned threshold, and soft foreground/background masks.

#include <string>

#include "plka/ops.hpp"
#include "plka/params.hpp"

namespace plka {

inline constexpr double kDefaultScoreScale = 20.0;
inline constexpr double kCosineEps = 1e-8;

template <std::floating_point T>
struct ThresholdHead {
  Tensor<T> weights;  // 1 x Z
  Tensor<T> bias;     // 1

  static ThresholdHead init(std::size_t channels, Rng&) {
    return {zero_param<T>({1, channels}), zero_param<T>({1})};
  }

  void register_into(ParamTable<T>& table, const std::string& prefix) const {
    table.add(prefix + ".w", weights);
    table.add(prefix + ".b", bias);
  }
};

template <std::floating_point T>
struct MaskPrediction {
  Tensor<T> fg;  // H x W
  Tensor<T> bg;  // H x W, 1 - fg
};

// Average of features under a (binary or soft) mask. Features at a coarser
// grid are treated as bilinearly resized to the mask grid; the pooling is
// evaluated exactly through the adjoint of that resize so the full-size
// feature map is never materialized.
template <std::floating_point T>
Tensor<T> masked_avg_pool(const Tensor<T>& features, const Tensor<T>& mask) {
  detail::require_rank(features, 3, "masked_avg_pool");
  detail::require_rank(mask, 2, "masked_avg_pool");
  T total = 0;
  for (const T v : mask.data()) total += v;
  if (!(total > T(0))) throw EmptyMaskError("masked_avg_pool: mask has no positive pixel");
  const std::size_t fh = features.dim(1), fw = features.dim(2);
  if (mask.dim(0) == fh && mask.dim(1) == fw) return weighted_pool(features, mask);
  auto field = reshape(mask, {1, mask.dim(0), mask.dim(1)});
  auto weights = bilinear_resize_adjoint(field, fh, fw);
  return weighted_pool(features, reshape(weights, {fh, fw}));
}

// S = -scale * cos(query(x, y), p)
template <std::floating_point T>
Tensor<T> anomaly_score(const Tensor<T>& query, const Tensor<T>& prototype, T score_scale = T(kDefaultScoreScale)) {
  return cosine_score(query, prototype, score_scale, T(kCosineEps));
}

// One scalar per query feature map: linear head over the unit-normalized
// global average, so T shares the scale invariance of the score.
template <std::floating_point T>
Tensor<T> adaptive_threshold(const Tensor<T>& query, const ThresholdHead<T>& head) {
  if (query.rank() != 3 || query.dim(0) != head.weights.dim(1)) {
    throw ShapeError("adaptive_threshold: query " + shape_str(query.shape()) + " for head of width " +
                     std::to_string(head.weights.dim(1)));
  }
  return linear(l2_normalize(global_avg_pool(query), T(kCosineEps)), head.weights, head.bias);
}

// fg = 1 - sigmoid(S - T), bg = 1 - fg
template <std::floating_point T>
MaskPrediction<T> predict_masks(const Tensor<T>& score, const Tensor<T>& threshold) {
  auto fg = one_minus(sigmoid(sub_broadcast(score, threshold)));
  auto bg = one_minus(fg);
  return {fg, bg};
}

// Bilinear upsampling of a prediction to the image grid. Interpolation
// weights sum to one, so bg stays 1 - fg.
template <std::floating_point T>
MaskPrediction<T> upsample(const MaskPrediction<T>& pred, std::size_t height, std::size_t width) {
  detail::require_rank(pred.fg, 2, "upsample");
  if (pred.fg.dim(0) == height && pred.fg.dim(1) == width) return pred;
  auto fg = reshape(bilinear_resize(reshape(pred.fg, {1, pred.fg.dim(0), pred.fg.dim(1)}), height, width),
                    {height, width});
  return {fg, one_minus(fg)};
}

}  // namespace plka
