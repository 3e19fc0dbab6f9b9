#include "sunet/model.hpp"

#include <algorithm>

#include "sunet/ops.hpp"

namespace sunet {

namespace {

std::int64_t log2_exact(std::int64_t v) {
  std::int64_t n = 0;
  while ((std::int64_t{1} << n) < v) ++n;
  return n;
}

}  // namespace

SunetConfig SunetConfig::toy() {
  SunetConfig c;
  c.base_channels = 16;
  c.patch_size = 2;
  c.window = 4;
  c.depths = {2, 2};
  c.heads = {2, 4};
  return c;
}

std::int64_t SunetConfig::required_multiple() const {
  return patch_size * window * (std::int64_t{1} << num_merges());
}

void SunetConfig::validate() const {
  if (base_channels < 2 || base_channels % 2 != 0)
    throw ConfigError("base_channels must be a positive even number, got " + std::to_string(base_channels));
  if (patch_size != 1 && patch_size != 2 && patch_size != 4)
    throw ConfigError("patch_size must be 1, 2 or 4, got " + std::to_string(patch_size));
  if (window < 1) throw ConfigError("window must be >= 1");
  if (depths.empty()) throw ConfigError("depths must list at least the bottleneck block");
  if (heads.size() != depths.size())
    throw ConfigError("heads has " + std::to_string(heads.size()) + " entries, depths has " +
                      std::to_string(depths.size()));
  if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
  for (std::size_t i = 0; i < depths.size(); ++i) {
    if (depths[i] < 2 || depths[i] % 2 != 0)
      throw ConfigError("depth of stage " + std::to_string(i) + " must be even and >= 2, got " +
                        std::to_string(depths[i]));
    const std::int64_t c = stage_channels(static_cast<std::int64_t>(i));
    if (heads[i] < 1 || c % heads[i] != 0)
      throw ConfigError("stage " + std::to_string(i) + " channels " + std::to_string(c) +
                        " not divisible by heads " + std::to_string(heads[i]));
  }
}

std::vector<StageShape> stage_shapes(const SunetConfig& cfg, std::int64_t height, std::int64_t width) {
  cfg.validate();
  const std::int64_t p = cfg.patch_size;
  const std::int64_t c = cfg.base_channels;
  std::vector<StageShape> out;
  out.push_back({"shallow", height, width, c});
  std::int64_t h = height / p, w = width / p;
  for (std::int64_t i = 0; i < cfg.num_merges(); ++i) {
    out.push_back({"encoder." + std::to_string(i), h, w, cfg.stage_channels(i)});
    h /= 2;
    w /= 2;
  }
  out.push_back({"bottleneck", h, w, cfg.stage_channels(cfg.num_merges())});
  for (std::int64_t i = cfg.num_merges() - 1; i >= 0; --i) {
    h *= 2;
    w *= 2;
    out.push_back({"decoder." + std::to_string(i), h, w, cfg.stage_channels(i)});
  }
  out.push_back({"deep", height, width, c});
  out.push_back({"output", height, width, 3});
  return out;
}

std::int64_t estimate_macs(const SunetConfig& cfg, std::int64_t height, std::int64_t width) {
  cfg.validate();
  const std::int64_t m = cfg.required_multiple();
  if (height % m != 0 || width % m != 0)
    throw ConfigError("FLOP estimate needs extents that are multiples of " + std::to_string(m));
  const std::int64_t c = cfg.base_channels;
  const std::int64_t p = cfg.patch_size;
  const std::int64_t n = cfg.window * cfg.window;

  auto block = [&](std::int64_t tokens, std::int64_t d, std::int64_t depth) {
    const auto hidden = static_cast<std::int64_t>(static_cast<double>(d) * cfg.mlp_ratio);
    // qkv + proj + two MLP layers, then Q K^T and A V inside each window.
    return depth * tokens * (3 * d * d + d * d + 2 * d * hidden + 2 * n * d);
  };
  auto upsample = [](std::int64_t in_pixels, std::int64_t ch, std::int64_t out_ch) {
    const std::int64_t out_pixels = 4 * in_pixels;
    return out_pixels * ch * (ch / 2) + in_pixels * ch * (2 * ch) + out_pixels * ch * out_ch;
  };

  std::int64_t macs = conv_macs(height, width, 3, 3, c);
  std::int64_t tokens = (height / p) * (width / p);
  macs += tokens * (p * p * c) * c;
  for (std::int64_t i = 0; i < cfg.num_merges(); ++i) {
    const std::int64_t d = cfg.stage_channels(i);
    macs += block(tokens, d, cfg.depths[static_cast<std::size_t>(i)]);
    tokens /= 4;
    macs += tokens * (4 * d) * (2 * d);
  }
  macs += block(tokens, cfg.stage_channels(cfg.num_merges()), cfg.depths.back());
  for (std::int64_t i = cfg.num_merges() - 1; i >= 0; --i) {
    const std::int64_t d = cfg.stage_channels(i);
    macs += upsample(tokens, 2 * d, d);
    tokens *= 4;
    macs += tokens * (2 * d) * d;
    macs += block(tokens, d, cfg.depths[static_cast<std::size_t>(i)]);
  }
  for (std::int64_t j = 0; j < log2_exact(p); ++j) {
    macs += upsample(tokens, c, c);
    tokens *= 4;
  }
  macs += conv_macs(height, width, 3, c, 3);
  return macs;
}

template <typename T>
SunetModel<T>::SunetModel(SunetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  ParamInit init(cfg_.seed);
  const std::int64_t c = cfg_.base_channels;
  const std::int64_t p = cfg_.patch_size;

  shallow_ = make_conv(params_, "shallow", 3, 3, c, init);
  embed_ = make_linear(params_, "patch_embed.proj", p * p * c, c, true, init);

  auto stb_cfg = [&](std::int64_t stage) {
    const auto s = static_cast<std::size_t>(stage);
    return StbConfig{cfg_.stage_channels(stage), cfg_.depths[s], cfg_.heads[s], cfg_.window, cfg_.mlp_ratio};
  };

  for (std::int64_t i = 0; i < cfg_.num_merges(); ++i) {
    const std::string prefix = "encoder." + std::to_string(i);
    EncoderLevel level;
    level.block_cfg = stb_cfg(i);
    level.block = make_stb_params(params_, prefix + ".block", level.block_cfg, init);
    level.merge = make_patch_merge(params_, prefix + ".merge", cfg_.stage_channels(i), init);
    encoder_.push_back(std::move(level));
  }
  bottleneck_.block_cfg = stb_cfg(cfg_.num_merges());
  bottleneck_.block = make_stb_params(params_, "bottleneck.block", bottleneck_.block_cfg, init);

  decoder_.resize(static_cast<std::size_t>(cfg_.num_merges()));
  for (std::int64_t i = cfg_.num_merges() - 1; i >= 0; --i) {
    const std::string prefix = "decoder." + std::to_string(i);
    const std::int64_t d = cfg_.stage_channels(i);
    DecoderLevel& level = decoder_[static_cast<std::size_t>(i)];
    level.upsample = make_dual_upsample(params_, prefix + ".upsample", 2 * d, d, init);
    level.skip_fuse = make_linear(params_, prefix + ".skip_fuse", 2 * d, d, true, init);
    level.block_cfg = stb_cfg(i);
    level.block = make_stb_params(params_, prefix + ".block", level.block_cfg, init);
  }
  for (std::int64_t j = 0; j < log2_exact(p); ++j)
    expand_.push_back(make_dual_upsample(params_, "expand." + std::to_string(j), c, c, init));
  reconstruct_ = make_conv(params_, "reconstruct", 3, c, 3, init);
}

template <typename T>
Var<T> SunetModel<T>::forward(const Var<T>& noisy) const {
  if (noisy.value().rank() != 4 || noisy.dim(3) != 3)
    throw ShapeError("forward expects [B,H,W,3], got " + to_string(noisy.shape()));
  const std::int64_t batch = noisy.dim(0), height = noisy.dim(1), width = noisy.dim(2);
  const std::int64_t m = cfg_.required_multiple();
  if (height % m != 0 || width % m != 0)
    throw ShapeError("forward: input " + std::to_string(height) + "x" + std::to_string(width) +
                     " must be a multiple of " + std::to_string(m) + " in both extents (use forward_padded)");

  auto run_block = [&](const Var<T>& x, const Level& level) {
    const std::int64_t h = x.dim(1), w = x.dim(2), d = x.dim(3);
    Var<T> tok = reshape(x, {batch, h * w, d});
    tok = stb_forward<T>(tok, level.block_cfg, level.block, h, w);
    return reshape(tok, {batch, h, w, d});
  };

  const Var<T> shallow = conv2d(noisy, shallow_);
  Var<T> x = patch_embed(shallow, cfg_.patch_size, embed_);
  std::vector<Var<T>> skips;
  for (const auto& level : encoder_) {
    x = run_block(x, level);
    skips.push_back(x);
    x = patch_merge(x, level.merge);
  }
  x = run_block(x, bottleneck_);
  for (std::int64_t i = cfg_.num_merges() - 1; i >= 0; --i) {
    const DecoderLevel& level = decoder_[static_cast<std::size_t>(i)];
    x = dual_upsample(x, level.upsample);
    x = linear(concat<T>({x, skips[static_cast<std::size_t>(i)]}, -1), level.skip_fuse);
    x = run_block(x, level);
  }
  for (const auto& up : expand_) x = dual_upsample(x, up);
  return conv2d(x, reconstruct_);
}

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, std::int64_t pad_bottom, std::int64_t pad_right) {
  if (x.rank() != 4) throw ShapeError("reflect_pad expects [B,H,W,C]");
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::int64_t oh = h + pad_bottom, ow = w + pad_right;
  // Mirror index with period 2(n-1); degenerate single-pixel extents repeat.
  auto mirror = [](std::int64_t i, std::int64_t n) {
    if (n == 1) return std::int64_t{0};
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Tensor<T> out = Tensor<T>::zeros({b, oh, ow, c});
  auto od = out.data();
  auto xd = x.data();
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t y = 0; y < oh; ++y) {
      const std::int64_t sy = mirror(y, h);
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        const std::int64_t sx = mirror(xx, w);
        std::copy_n(xd.begin() + ((n * h + sy) * w + sx) * c, c, od.begin() + ((n * oh + y) * ow + xx) * c);
      }
    }
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::int64_t height, std::int64_t width) {
  if (x.rank() != 4 || height > x.dim(1) || width > x.dim(2)) throw ShapeError("crop exceeds tensor extent");
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({b, height, width, c});
  auto od = out.data();
  auto xd = x.data();
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t y = 0; y < height; ++y)
      std::copy_n(xd.begin() + ((n * h + y) * w) * c, width * c, od.begin() + ((n * height + y) * width) * c);
  return out;
}

template <typename T>
Tensor<T> SunetModel<T>::forward_padded(const Tensor<T>& noisy) const {
  if (noisy.rank() != 4) throw ShapeError("forward_padded expects [B,H,W,3]");
  const std::int64_t h = noisy.dim(1), w = noisy.dim(2);
  const std::int64_t m = cfg_.required_multiple();
  const std::int64_t ph = (m - h % m) % m, pw = (m - w % m) % m;
  NoGradScope no_grad;
  if (ph == 0 && pw == 0) return forward(constant(noisy)).value();
  const Var<T> out = forward(constant(reflect_pad(noisy, ph, pw)));
  return crop(out.value(), h, w);
}

template class SunetModel<float>;
template class SunetModel<double>;
template Tensor<float> reflect_pad<float>(const Tensor<float>&, std::int64_t, std::int64_t);
template Tensor<double> reflect_pad<double>(const Tensor<double>&, std::int64_t, std::int64_t);
template Tensor<float> crop<float>(const Tensor<float>&, std::int64_t, std::int64_t);
template Tensor<double> crop<double>(const Tensor<double>&, std::int64_t, std::int64_t);

}  // namespace sunet
