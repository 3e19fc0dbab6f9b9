#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sunet/nn.hpp"

namespace sunet {

/// Additive mask value separating tokens of different shifted regions.
inline constexpr double kMaskFill = -1e9;

struct StlConfig {
  std::int64_t dim = 96;
  std::int64_t heads = 3;
  std::int64_t window = 8;
  std::int64_t shift = 0;  // 0 or window / 2
  double mlp_ratio = 4.0;

  std::int64_t hidden() const { return static_cast<std::int64_t>(static_cast<double>(dim) * mlp_ratio); }
  /// Throws ShapeError when dim % heads != 0, shift not in {0, window/2}, or window < 1.
  void validate() const;
};

template <typename T>
struct WindowAttentionParams {
  LinearParams<T> qkv;   // C -> 3C
  LinearParams<T> proj;  // C -> C
  Var<T> rel_bias;       // [(2w-1)^2, heads]
};

template <typename T>
struct StlParams {
  NormParams<T> norm1;
  WindowAttentionParams<T> attn;
  NormParams<T> norm2;
  LinearParams<T> fc1;  // C -> ratio*C
  LinearParams<T> fc2;  // ratio*C -> C
};

template <typename T>
StlParams<T> make_stl_params(ParameterList<T>& params, const std::string& prefix, const StlConfig& cfg,
                             ParamInit& init);

/// [B,H,W,C] -> [B*(H/w)*(W/w), w*w, C]; windows ordered row-major per image.
template <typename T>
Var<T> window_partition(const Var<T>& x, std::int64_t window);

/// Inverse of window_partition back to [B,H,W,C].
template <typename T>
Var<T> window_reverse(const Var<T>& windows, std::int64_t window, std::int64_t height, std::int64_t width);

/// out(y, x) = in((y - dy) mod H, (x - dx) mod W) on [B,H,W,C].
template <typename T>
Var<T> cyclic_shift(const Var<T>& x, std::int64_t dy, std::int64_t dx);

/// [num_windows, w*w, w*w] additive mask for attention on the grid rolled by
/// (-s, -s). Zero where two tokens share a region, kMaskFill otherwise.
template <typename T>
Tensor<T> build_shift_mask(std::int64_t height, std::int64_t width, std::int64_t window, std::int64_t shift);

/// Flattened (w^2 x w^2) lookup into the relative-bias table: for query q and
/// key k at in-window positions (yq,xq), (yk,xk) the row is
/// (yq-yk+w-1)*(2w-1) + (xq-xk+w-1).
std::vector<std::int64_t> relative_position_index(std::int64_t window);

/// Multi-head self-attention independently within each window.
/// tokens: [nW_total, w*w, C]; mask, when given, is [nW, w*w, w*w] with
/// nW dividing nW_total (images are stacked along the leading axis).
template <typename T>
Var<T> window_attention(const Var<T>& tokens, const WindowAttentionParams<T>& p, std::int64_t heads,
                        const std::optional<Tensor<T>>& mask);

/// One Swin Transformer layer on [B, H*W, C]:
///   h = (S)W-MSA(LN(x)) + x;  out = MLP(LN(h)) + h
template <typename T>
Var<T> stl_forward(const Var<T>& x, const StlConfig& cfg, const StlParams<T>& p, std::int64_t height,
                   std::int64_t width);

struct StbConfig {
  std::int64_t dim = 96;
  std::int64_t depth = 8;
  std::int64_t heads = 3;
  std::int64_t window = 8;
  double mlp_ratio = 4.0;

  /// Config of layer i: no shift for even i, window/2 for odd i.
  StlConfig layer(std::int64_t i) const;
};

template <typename T>
std::vector<StlParams<T>> make_stb_params(ParameterList<T>& params, const std::string& prefix,
                                          const StbConfig& cfg, ParamInit& init);

/// Stack of cfg.depth layers alternating W-MSA and SW-MSA. Depth must be even.
template <typename T>
Var<T> stb_forward(const Var<T>& x, const StbConfig& cfg, std::span<const StlParams<T>> layers,
                   std::int64_t height, std::int64_t width);

}  // namespace sunet
