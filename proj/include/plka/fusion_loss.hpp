#pragma once

// Multi-scale mask fusion, segmentation and alignment losses, Dice.

#include <array>
#include <string>

#include "plka/data/image.hpp"
#include "plka/ops.hpp"
#include "plka/proto_head.hpp"

namespace plka {

inline constexpr double kProbEps = 1e-7;
inline constexpr double kDegenerateWeight = 1e-6;

struct FusionConfig {
  double alpha = 0.8;  // weight of the 1/4-scale path

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("fusion alpha must lie in (0, 1), got " + std::to_string(alpha));
  }
};

template <std::floating_point T>
struct LossBreakdown {
  Tensor<T> seg;
  Tensor<T> reg;
  Tensor<T> total;
};

// alpha * m64 + (1 - alpha) * m32, on both fg and bg.
template <std::floating_point T>
MaskPrediction<T> fuse(const MaskPrediction<T>& m64, const MaskPrediction<T>& m32, const FusionConfig& cfg) {
  cfg.validate();
  const T a = static_cast<T>(cfg.alpha);
  const T b = T(1) - a;
  return {add(scale(m64.fg, a), scale(m32.fg, b)), add(scale(m64.bg, a), scale(m32.bg, b))};
}

// Pixel-mean binary cross entropy of fg/bg against a binary foreground map.
// Probabilities are clamped to [eps, 1 - eps]; the clamp passes gradients.
template <std::floating_point T>
Tensor<T> seg_loss(const MaskPrediction<T>& pred, const Tensor<T>& truth_fg) {
  if (pred.fg.shape() != truth_fg.shape() || pred.bg.shape() != truth_fg.shape()) {
    throw ShapeError("seg_loss: prediction " + shape_str(pred.fg.shape()) + " vs truth " + shape_str(truth_fg.shape()));
  }
  return binary_cross_entropy(pred.fg, pred.bg, truth_fg, static_cast<T>(kProbEps));
}

template <std::floating_point T>
LossBreakdown<T> total_loss(const Tensor<T>& seg, const Tensor<T>& reg) {
  return {seg, reg, add(reshape(seg, {}), reshape(reg, {}))};
}

// One scale path's view of an episode for the alignment loss.
template <std::floating_point T>
struct AlignPath {
  Tensor<T> support_features;  // Z x h x w
  Tensor<T> query_features;    // Z x h x w
  Tensor<T> query_fg;          // H x W soft query foreground at image size
  const ThresholdHead<T>* head = nullptr;
};

template <std::floating_point T>
struct AlignResult {
  Tensor<T> loss;
  bool degenerate = false;
};

// Segments the support image from a prototype pooled over the query under
// its predicted soft foreground, then scores against the support truth.
template <std::floating_point T>
AlignResult<T> align_loss(const std::array<AlignPath<T>, 2>& paths, const Tensor<T>& support_mask,
                          const FusionConfig& fusion, T score_scale = T(kDefaultScoreScale)) {
  detail::require_rank(support_mask, 2, "align_loss");
  const std::size_t h = support_mask.dim(0), w = support_mask.dim(1);
  for (const auto& path : paths) {
    T peak = 0;
    for (const T v : path.query_fg.data()) peak = std::max(peak, v);
    if (peak < static_cast<T>(kDegenerateWeight)) return {Tensor<T>::scalar(T(0)), true};
  }
  std::array<MaskPrediction<T>, 2> preds;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& path = paths[i];
    if (path.head == nullptr) throw Error("align_loss: path without threshold head");
    auto prototype = masked_avg_pool(path.query_features, path.query_fg);
    auto score = anomaly_score(path.support_features, prototype, score_scale);
    auto threshold = adaptive_threshold(path.support_features, *path.head);
    preds[i] = upsample(predict_masks(score, threshold), h, w);
  }
  return {seg_loss(fuse(preds[0], preds[1], fusion), support_mask), false};
}

// 2|A n B| / (|A| + |B|) * 100; 100 when both are empty.
inline double dice(const BinaryMask& pred, const BinaryMask& truth) {
  if (pred.size() != truth.size()) throw ShapeError("dice: mask size mismatch");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    a += pred.bits[i];
    b += truth.bits[i];
    both += pred.bits[i] & truth.bits[i];
  }
  if (a + b == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

// Foreground where fg > 0.5.
template <std::floating_point T>
BinaryMask binarize(const Tensor<T>& fg) {
  detail::require_rank(fg, 2, "binarize");
  BinaryMask m(fg.dim(0), fg.dim(1));
  for (std::size_t i = 0; i < m.size(); ++i) m.bits[i] = fg[i] > T(0.5) ? 1 : 0;
  return m;
}

template <std::floating_point T>
double dice(const Tensor<T>& pred_fg, const Tensor<T>& truth_fg) {
  return dice(binarize(pred_fg), binarize(truth_fg));
}

}  // namespace plka
