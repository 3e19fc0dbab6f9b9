#include "sunet/resample.hpp"

#include "sunet/ops.hpp"

namespace sunet {

template <typename T>
Var<T> patch_embed(const Var<T>& x, std::int64_t patch, const LinearParams<T>& proj) {
  if (x.value().rank() != 4) throw ShapeError("patch_embed expects [B,H,W,C]");
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (patch < 1 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patch_embed: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                     std::to_string(patch));
  if (proj.in_features() != patch * patch * c)
    throw ShapeError("patch_embed: projection expects " + std::to_string(proj.in_features()) + " inputs, patches have " +
                     std::to_string(patch * patch * c));
  Var<T> t = x;
  if (patch > 1) {
    t = reshape(t, {b, h / patch, patch, w / patch, patch, c});
    t = permute(t, {0, 1, 3, 2, 4, 5});
    t = reshape(t, {b, h / patch, w / patch, patch * patch * c});
  }
  return linear(t, proj);
}

template <typename T>
Var<T> patch_merge(const Var<T>& x, const PatchMergeParams<T>& p) {
  if (x.value().rank() != 4) throw ShapeError("patch_merge expects [B,H,W,C]");
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("patch_merge needs even extents, got " + std::to_string(h) + "x" + std::to_string(w));
  Var<T> t = reshape(x, {b, h / 2, 2, w / 2, 2, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  t = reshape(t, {b, h / 2, w / 2, 4 * c});
  return linear(layer_norm(t, p.norm), p.reduce);
}

template <typename T>
Var<T> dual_upsample(const Var<T>& x, const DualUpsampleParams<T>& p) {
  if (x.value().rank() != 4) throw ShapeError("dual_upsample expects [B,H,W,C]");
  if (x.dim(3) % 2 != 0) throw ShapeError("dual_upsample needs an even channel count, got " + std::to_string(x.dim(3)));
  const Var<T> smooth = conv2d(bilinear_upsample(x, 2), p.bilinear_proj);
  const Var<T> subpixel = pixel_shuffle(conv2d(x, p.subpixel_expand), 2);
  return linear(concat<T>({smooth, subpixel}, -1), p.fuse);
}

template <typename T>
PatchMergeParams<T> make_patch_merge(ParameterList<T>& params, const std::string& prefix, std::int64_t channels,
                                     ParamInit& init) {
  PatchMergeParams<T> p;
  p.norm = make_norm(params, prefix + ".norm", 4 * channels);
  p.reduce = make_linear(params, prefix + ".reduction", 4 * channels, 2 * channels, false, init);
  return p;
}

template <typename T>
DualUpsampleParams<T> make_dual_upsample(ParameterList<T>& params, const std::string& prefix,
                                         std::int64_t channels, std::int64_t out_channels, ParamInit& init) {
  if (channels % 2 != 0) throw ShapeError("dual_upsample needs an even channel count");
  DualUpsampleParams<T> p;
  p.bilinear_proj = make_conv(params, prefix + ".bilinear", 1, channels, channels / 2, init);
  p.subpixel_expand = make_conv(params, prefix + ".subpixel", 1, channels, 2 * channels, init);
  p.fuse = make_linear(params, prefix + ".fuse", channels, out_channels, true, init);
  return p;
}

#define SUNET_INSTANTIATE_RESAMPLE(T)                                                                      \
  template Var<T> patch_embed<T>(const Var<T>&, std::int64_t, const LinearParams<T>&);                     \
  template Var<T> patch_merge<T>(const Var<T>&, const PatchMergeParams<T>&);                               \
  template Var<T> dual_upsample<T>(const Var<T>&, const DualUpsampleParams<T>&);                           \
  template PatchMergeParams<T> make_patch_merge<T>(ParameterList<T>&, const std::string&, std::int64_t,    \
                                                   ParamInit&);                                            \
  template DualUpsampleParams<T> make_dual_upsample<T>(ParameterList<T>&, const std::string&, std::int64_t, \
                                                       std::int64_t, ParamInit&);

SUNET_INSTANTIATE_RESAMPLE(float)
SUNET_INSTANTIATE_RESAMPLE(double)

}  // namespace sunet
