#pragma once

// Small strided CNN producing feature taps at 1/4 and 1/8 of the input
// resolution with a shared channel count.

#include <array>
#include <string>

#include "plka/ops.hpp"
#include "plka/params.hpp"

namespace plka {

template <std::floating_point T>
struct EncoderBlock {
  Tensor<T> pw_w;  // C_out x C_in
  Tensor<T> pw_b;  // C_out
  Tensor<T> dw;    // C_out x 3 x 3
  bool downsample = false;

  static EncoderBlock init(std::size_t in, std::size_t out, bool downsample, Rng& rng) {
    auto pw = he_normal<T>({out, in}, in, rng);
    auto pb = fan_in_uniform<T>({out}, in, rng);
    return {pw, pb, he_normal<T>({out, 3, 3}, 9, rng), downsample};
  }

  // [avg_pool2 ->] pointwise -> depthwise 3x3 -> gelu
  Tensor<T> forward(const Tensor<T>& x) const {
    const auto in = downsample ? avg_pool2(x) : x;
    auto mixed = conv2d_pointwise(in, pw_w, pw_b);
    return gelu(conv2d_depthwise(mixed, dw, ConvSpec{3, 1, ConvGroups::kDepthwise}));
  }
};

template <std::floating_point T>
struct FeaturePair {
  Tensor<T> quarter;  // Z x H/4 x W/4
  Tensor<T> eighth;   // Z x H/8 x W/8
};

template <std::floating_point T>
struct EncoderParams {
  static constexpr std::array<const char*, 4> kBlockNames = {"stem", "stage1", "stage2", "stage3"};

  // stem (full res), stage1 (1/2), stage2 (1/4, quarter tap), stage3 (1/8, eighth tap)
  std::array<EncoderBlock<T>, 4> blocks;

  static std::array<std::size_t, 4> widths(std::size_t channels) {
    return {std::max<std::size_t>(2, channels / 8), std::max<std::size_t>(2, channels / 4), channels, channels};
  }

  static EncoderParams init(std::size_t channels, Rng& rng) {
    if (channels == 0) throw ConfigError("encoder channel count must be positive");
    const auto w = widths(channels);
    EncoderParams p;
    p.blocks[0] = EncoderBlock<T>::init(3, w[0], false, rng);
    for (std::size_t i = 1; i < 4; ++i) p.blocks[i] = EncoderBlock<T>::init(w[i - 1], w[i], true, rng);
    return p;
  }

  std::size_t channels() const { return blocks[3].pw_w.dim(0); }

  void register_into(ParamTable<T>& table, const std::string& prefix) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string base = prefix + "." + kBlockNames[i];
      table.add(base + ".pw.w", blocks[i].pw_w);
      table.add(base + ".pw.b", blocks[i].pw_b);
      table.add(base + ".dw.w", blocks[i].dw);
    }
  }
};

// image: 3 x H x W with H, W multiples of 8.
template <std::floating_point T>
FeaturePair<T> extract(const Tensor<T>& image, const EncoderParams<T>& params) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) == 0 || image.dim(2) == 0 || image.dim(1) % 8 ||
      image.dim(2) % 8) {
    throw ShapeError("encoder expects a 3 x H x W image with H, W multiples of 8, got " + shape_str(image.shape()));
  }
  auto x = params.blocks[0].forward(image);
  x = params.blocks[1].forward(x);
  auto quarter = params.blocks[2].forward(x);
  auto eighth = params.blocks[3].forward(quarter);
  return {quarter, eighth};
}

}  // namespace plka
