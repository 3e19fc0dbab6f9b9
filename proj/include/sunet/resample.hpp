#pragma once

#include <cstdint>
#include <string>

#include "sunet/nn.hpp"

namespace sunet {

template <typename T>
struct PatchMergeParams {
  NormParams<T> norm;       // over 4C
  LinearParams<T> reduce;   // 4C -> 2C, no bias
};

/// Two up-sampling branches fused back together:
///   A: bilinear x2, then 1x1 conv C -> C/2
///   B: 1x1 conv C -> 2C, then pixel shuffle x2 (-> C/2)
///   fuse: concat(A, B) (C channels) -> linear -> C_out
template <typename T>
struct DualUpsampleParams {
  ConvParams<T> bilinear_proj;
  ConvParams<T> subpixel_expand;
  LinearParams<T> fuse;
};

/// Non-overlapping p x p patches (row-major, channels innermost) projected to
/// C channels: [B,H,W,Cin] -> [B,H/p,W/p,C].
template <typename T>
Var<T> patch_embed(const Var<T>& x, std::int64_t patch, const LinearParams<T>& proj);

/// [B,H,W,C] -> [B,H/2,W/2,2C]. Sub-pixels concatenate in order
/// (0,0), (0,1), (1,0), (1,1), then layer norm over 4C, then the reduction.
template <typename T>
Var<T> patch_merge(const Var<T>& x, const PatchMergeParams<T>& p);

/// [B,H,W,C] -> [B,2H,2W,C_out]; C must be even.
template <typename T>
Var<T> dual_upsample(const Var<T>& x, const DualUpsampleParams<T>& p);

template <typename T>
PatchMergeParams<T> make_patch_merge(ParameterList<T>& params, const std::string& prefix, std::int64_t channels,
                                     ParamInit& init);

template <typename T>
DualUpsampleParams<T> make_dual_upsample(ParameterList<T>& params, const std::string& prefix,
                                         std::int64_t channels, std::int64_t out_channels, ParamInit& init);

}  // namespace sunet
