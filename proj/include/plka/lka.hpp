#pragma once

// Large Kernel Attention: a 1x1 projection + GELU, then an attention map
// built from a depthwise conv, a dilated depthwise conv and a 1x1 conv,
// applied to the projected features by elementwise multiplication.

#include <string>

#include "plka/ops.hpp"
#include "plka/params.hpp"

namespace plka {

template <std::floating_point T>
struct LkaParams {
  Tensor<T> proj_in_w;    // Z x Z
  Tensor<T> proj_in_b;    // Z
  Tensor<T> dw;           // Z x k x k, dilation 1
  Tensor<T> dwd;          // Z x k x k, dilation `dilation`
  Tensor<T> proj_attn_w;  // Z x Z
  Tensor<T> proj_attn_b;  // Z
  std::size_t kernel_size = 3;
  std::size_t dilation = 2;

  static LkaParams init(std::size_t channels, std::size_t kernel_size, std::size_t dilation, Rng& rng) {
    LkaParams p;
    p.kernel_size = kernel_size;
    p.dilation = dilation;
    p.proj_in_w = he_normal<T>({channels, channels}, channels, rng);
    p.proj_in_b = fan_in_uniform<T>({channels}, channels, rng);
    p.dw = he_normal<T>({channels, kernel_size, kernel_size}, kernel_size * kernel_size, rng);
    p.dwd = he_normal<T>({channels, kernel_size, kernel_size}, kernel_size * kernel_size, rng);
    p.proj_attn_w = he_normal<T>({channels, channels}, channels, rng);
    p.proj_attn_b = fan_in_uniform<T>({channels}, channels, rng);
    p.validate();
    return p;
  }

  std::size_t channels() const { return proj_in_w.dim(0); }

  ConvSpec dw_spec() const { return {kernel_size, 1, ConvGroups::kDepthwise}; }
  ConvSpec dwd_spec() const { return {kernel_size, dilation, ConvGroups::kDepthwise}; }

  void validate() const {
    if (!proj_in_w.defined() || !proj_in_b.defined() || !dw.defined() || !dwd.defined() ||
        !proj_attn_w.defined() || !proj_attn_b.defined()) {
      throw Error("LKA parameters incomplete");
    }
    dw_spec().validate();
    dwd_spec().validate();
  }

  void register_into(ParamTable<T>& table, const std::string& prefix) const {
    table.add(prefix + ".proj_in.w", proj_in_w);
    table.add(prefix + ".proj_in.b", proj_in_b);
    table.add(prefix + ".dw.w", dw);
    table.add(prefix + ".dwd.w", dwd);
    table.add(prefix + ".proj_attn.w", proj_attn_w);
    table.add(prefix + ".proj_attn.b", proj_attn_b);
  }
};

namespace detail {
template <std::floating_point T>
void require_lka_channels(const Tensor<T>& f, const LkaParams<T>& params) {
  require_rank(f, 3, "lka");
  if (f.dim(0) != params.channels()) {
    throw ShapeError("lka: input has " + std::to_string(f.dim(0)) + " channels, parameters expect " +
                     std::to_string(params.channels()));
  }
}
}  // namespace detail

// Conv1x1(DW-D-Conv(DW-Conv(F))), linear throughout.
template <std::floating_point T>
Tensor<T> lka_map(const Tensor<T>& features, const LkaParams<T>& params) {
  detail::require_lka_channels(features, params);
  auto local = conv2d_depthwise(features, params.dw, params.dw_spec());
  auto wide = conv2d_depthwise(local, params.dwd, params.dwd_spec());
  return conv2d_pointwise(wide, params.proj_attn_w, params.proj_attn_b);
}

template <std::floating_point T>
Tensor<T> attend(const Tensor<T>& raw, const LkaParams<T>& params) {
  detail::require_lka_channels(raw, params);
  auto projected = gelu(conv2d_pointwise(raw, params.proj_in_w, params.proj_in_b));
  return mul(lka_map(projected, params), projected);
}

// Side length of the square an impulse can reach through lka_map.
inline std::size_t lka_receptive_field(std::size_t kernel_size, std::size_t dilation) {
  return kernel_size + (kernel_size - 1) * dilation;
}

}  // namespace plka
