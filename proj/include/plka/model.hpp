#pragma once

// End-to-end episode model: shared encoder, per-path attention, prototype
// heads, fusion, and the training objective.

#include <array>
#include <optional>

#include "plka/encoder.hpp"
#include "plka/fusion_loss.hpp"
#include "plka/lka.hpp"
#include "plka/proto_head.hpp"

namespace plka {

struct ModelConfig {
  std::size_t channels = 32;
  std::size_t lka_kernel = 3;
  std::size_t lka_dilation = 2;
  bool use_attention = true;  // false replaces attend() with the identity
  double score_scale = kDefaultScoreScale;
  double fusion_alpha = 0.8;

  bool operator==(const ModelConfig&) const = default;
};

template <std::floating_point T>
struct EpisodeOutput {
  std::array<MaskPrediction<T>, 2> paths;  // quarter, eighth; at image size
  MaskPrediction<T> fused;
  std::optional<LossBreakdown<T>> loss;
  bool align_degenerate = false;
};

template <std::floating_point T>
class Model {
 public:
  static constexpr std::array<const char*, 5> kGroups = {"enc.", "lka64.", "lka32.", "thr64.", "thr32."};

  Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    encoder_ = EncoderParams<T>::init(cfg.channels, rng);
    lka_[0] = LkaParams<T>::init(cfg.channels, cfg.lka_kernel, cfg.lka_dilation, rng);
    lka_[1] = LkaParams<T>::init(cfg.channels, cfg.lka_kernel, cfg.lka_dilation, rng);
    heads_[0] = ThresholdHead<T>::init(cfg.channels, rng);
    heads_[1] = ThresholdHead<T>::init(cfg.channels, rng);
    encoder_.register_into(table_, "enc");
    lka_[0].register_into(table_, "lka64");
    lka_[1].register_into(table_, "lka32");
    heads_[0].register_into(table_, "thr64");
    heads_[1].register_into(table_, "thr32");
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  void set_fusion_alpha(double alpha) { cfg_.fusion_alpha = alpha; }
  ParamTable<T>& params() { return table_; }
  const ParamTable<T>& params() const { return table_; }
  const EncoderParams<T>& encoder() const { return encoder_; }
  const LkaParams<T>& lka(std::size_t path) const { return lka_.at(path); }
  const ThresholdHead<T>& head(std::size_t path) const { return heads_.at(path); }

  // Enhanced features of one image for both paths.
  std::array<Tensor<T>, 2> features(const Tensor<T>& image) const {
    auto taps = extract(image, encoder_);
    std::array<Tensor<T>, 2> out{taps.quarter, taps.eighth};
    if (cfg_.use_attention) {
      for (std::size_t i = 0; i < 2; ++i) out[i] = attend(out[i], lka_[i]);
    }
    return out;
  }

  // Images are 3 x H x W tensors, masks H x W in {0, 1}. With a query mask
  // the output carries the training loss.
  EpisodeOutput<T> forward(const Tensor<T>& support_image, const Tensor<T>& support_mask,
                           const Tensor<T>& query_image, const std::optional<Tensor<T>>& query_mask = {}) const {
    const std::size_t h = support_mask.dim(0), w = support_mask.dim(1);
    if (query_image.dim(1) != h || query_image.dim(2) != w) {
      throw ShapeError("support and query images must share one size");
    }
    const FusionConfig fusion{cfg_.fusion_alpha};
    const T score_scale = static_cast<T>(cfg_.score_scale);
    const auto fs = features(support_image);
    const auto fq = features(query_image);

    EpisodeOutput<T> out;
    for (std::size_t i = 0; i < 2; ++i) {
      auto prototype = masked_avg_pool(fs[i], support_mask);
      auto score = anomaly_score(fq[i], prototype, score_scale);
      auto threshold = adaptive_threshold(fq[i], heads_[i]);
      out.paths[i] = upsample(predict_masks(score, threshold), h, w);
    }
    out.fused = fuse(out.paths[0], out.paths[1], fusion);

    if (query_mask) {
      auto seg = seg_loss(out.fused, *query_mask);
      std::array<AlignPath<T>, 2> align;
      for (std::size_t i = 0; i < 2; ++i) align[i] = {fs[i], fq[i], out.paths[i].fg, &heads_[i]};
      auto reg = align_loss(align, support_mask, fusion, score_scale);
      out.align_degenerate = reg.degenerate;
      out.loss = total_loss(seg, reg.loss);
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  EncoderParams<T> encoder_;
  std::array<LkaParams<T>, 2> lka_;
  std::array<ThresholdHead<T>, 2> heads_;
  ParamTable<T> table_;
};

}  // namespace plka
