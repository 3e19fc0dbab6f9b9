#include "sunet/swin.hpp"

#include <cmath>

#include "sunet/ops.hpp"

namespace sunet {

void StlConfig::validate() const {
  if (window < 1) throw ShapeError("window size must be >= 1");
  if (heads < 1 || dim % heads != 0)
    throw ShapeError("channels " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  if (shift != 0 && shift != window / 2)
    throw ShapeError("shift must be 0 or window/2, got " + std::to_string(shift));
}

StlConfig StbConfig::layer(std::int64_t i) const {
  return {dim, heads, window, i % 2 == 0 ? 0 : window / 2, mlp_ratio};
}

template <typename T>
StlParams<T> make_stl_params(ParameterList<T>& params, const std::string& prefix, const StlConfig& cfg,
                             ParamInit& init) {
  cfg.validate();
  const std::int64_t c = cfg.dim;
  const std::int64_t span = 2 * cfg.window - 1;
  StlParams<T> p;
  p.norm1 = make_norm(params, prefix + ".norm1", c);
  p.attn.qkv = make_linear(params, prefix + ".attn.qkv", c, 3 * c, true, init);
  p.attn.proj = make_linear(params, prefix + ".attn.proj", c, c, true, init);
  p.attn.rel_bias =
      params.add(prefix + ".attn.relative_position_bias_table", init.trunc_normal<T>({span * span, cfg.heads}, kInitStd));
  p.norm2 = make_norm(params, prefix + ".norm2", c);
  p.fc1 = make_linear(params, prefix + ".mlp.fc1", c, cfg.hidden(), true, init);
  p.fc2 = make_linear(params, prefix + ".mlp.fc2", cfg.hidden(), c, true, init);
  return p;
}

template <typename T>
Var<T> window_partition(const Var<T>& x, std::int64_t window) {
  if (x.value().rank() != 4) throw ShapeError("window_partition expects [B,H,W,C]");
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (window < 1 || h % window != 0 || w % window != 0)
    throw ShapeError("window_partition: " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by window " + std::to_string(window));
  const std::int64_t nh = h / window, nw = w / window;
  Var<T> t = reshape(x, {b, nh, window, nw, window, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {b * nh * nw, window * window, c});
}

template <typename T>
Var<T> window_reverse(const Var<T>& windows, std::int64_t window, std::int64_t height, std::int64_t width) {
  if (windows.value().rank() != 3 || windows.dim(1) != window * window)
    throw ShapeError("window_reverse expects [nW, w*w, C]");
  if (height % window != 0 || width % window != 0) throw ShapeError("window_reverse: extents not divisible by window");
  const std::int64_t nh = height / window, nw = width / window;
  if (windows.dim(0) % (nh * nw) != 0) throw ShapeError("window_reverse: window count does not match geometry");
  const std::int64_t b = windows.dim(0) / (nh * nw), c = windows.dim(2);
  Var<T> t = reshape(windows, {b, nh, nw, window, window, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {b, height, width, c});
}

template <typename T>
Var<T> cyclic_shift(const Var<T>& x, std::int64_t dy, std::int64_t dx) {
  if (x.value().rank() != 4) throw ShapeError("cyclic_shift expects [B,H,W,C]");
  return roll(x, {{1, dy}, {2, dx}});
}

template <typename T>
Tensor<T> build_shift_mask(std::int64_t height, std::int64_t width, std::int64_t window, std::int64_t shift) {
  if (window < 1 || height % window != 0 || width % window != 0)
    throw ShapeError("build_shift_mask: extents not divisible by window");
  const std::int64_t nh = height / window, nw = width / window, n = window * window;
  Tensor<T> mask = Tensor<T>::zeros({nh * nw, n, n});
  if (shift == 0) return mask;
  auto band = [&](std::int64_t v, std::int64_t extent) -> std::int64_t {
    if (v < extent - window) return 0;
    return v < extent - shift ? 1 : 2;
  };
  std::vector<std::int64_t> labels(static_cast<std::size_t>(n));
  auto md = mask.data();
  for (std::int64_t wy = 0; wy < nh; ++wy)
    for (std::int64_t wx = 0; wx < nw; ++wx) {
      for (std::int64_t ty = 0; ty < window; ++ty)
        for (std::int64_t tx = 0; tx < window; ++tx)
          labels[static_cast<std::size_t>(ty * window + tx)] =
              band(wy * window + ty, height) * 3 + band(wx * window + tx, width);
      const std::int64_t base = (wy * nw + wx) * n * n;
      for (std::int64_t q = 0; q < n; ++q)
        for (std::int64_t k = 0; k < n; ++k)
          if (labels[static_cast<std::size_t>(q)] != labels[static_cast<std::size_t>(k)])
            md[base + q * n + k] = static_cast<T>(kMaskFill);
    }
  return mask;
}

std::vector<std::int64_t> relative_position_index(std::int64_t window) {
  const std::int64_t n = window * window;
  const std::int64_t span = 2 * window - 1;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n * n));
  for (std::int64_t q = 0; q < n; ++q)
    for (std::int64_t k = 0; k < n; ++k) {
      const std::int64_t dy = q / window - k / window + window - 1;
      const std::int64_t dx = q % window - k % window + window - 1;
      idx[static_cast<std::size_t>(q * n + k)] = dy * span + dx;
    }
  return idx;
}

template <typename T>
Var<T> window_attention(const Var<T>& tokens, const WindowAttentionParams<T>& p, std::int64_t heads,
                        const std::optional<Tensor<T>>& mask) {
  if (tokens.value().rank() != 3) throw ShapeError("window_attention expects [nW, N, C]");
  const std::int64_t nwt = tokens.dim(0), n = tokens.dim(1), c = tokens.dim(2);
  if (heads < 1 || c % heads != 0)
    throw ShapeError("window_attention: channels " + std::to_string(c) + " not divisible by heads " +
                     std::to_string(heads));
  const auto window = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(n))));
  if (window * window != n) throw ShapeError("window_attention: token count is not a square");
  const std::int64_t span = 2 * window - 1;
  if (p.rel_bias.shape() != Shape{span * span, heads})
    throw ShapeError("window_attention: relative bias table must be " + to_string({span * span, heads}));
  const std::int64_t d = c / heads;

  Var<T> qkv = linear(tokens, p.qkv);
  qkv = permute(reshape(qkv, {nwt, n, 3, heads, d}), {2, 0, 3, 1, 4});  // [3, nW, h, N, d]
  const Var<T> q = scale(reshape(narrow(qkv, 0, 0, 1), {nwt, heads, n, d}),
                         static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  const Var<T> k = reshape(narrow(qkv, 0, 1, 1), {nwt, heads, n, d});
  const Var<T> v = reshape(narrow(qkv, 0, 2, 1), {nwt, heads, n, d});

  Var<T> attn = matmul(q, permute(k, {0, 1, 3, 2}));  // [nW, h, N, N]
  Var<T> bias = index_select(p.rel_bias, relative_position_index(window));
  bias = reshape(permute(reshape(bias, {n, n, heads}), {2, 0, 1}), {1, heads, n, n});
  attn = add(attn, bias);
  if (mask) {
    const std::int64_t nw = mask->dim(0);
    if (mask->shape() != Shape{nw, n, n} || nwt % nw != 0)
      throw ShapeError("window_attention: mask shape " + to_string(mask->shape()) + " incompatible with " +
                       to_string(tokens.shape()));
    attn = reshape(attn, {nwt / nw, nw, heads, n, n});
    attn = add(attn, constant(mask->reshape({1, nw, 1, n, n})));
    attn = reshape(attn, {nwt, heads, n, n});
  }
  attn = softmax(attn, -1);
  Var<T> out = matmul(attn, v);  // [nW, h, N, d]
  out = reshape(permute(out, {0, 2, 1, 3}), {nwt, n, c});
  return linear(out, p.proj);
}

template <typename T>
Var<T> stl_forward(const Var<T>& x, const StlConfig& cfg, const StlParams<T>& p, std::int64_t height,
                   std::int64_t width) {
  cfg.validate();
  if (x.value().rank() != 3 || x.dim(1) != height * width || x.dim(2) != cfg.dim)
    throw ShapeError("stl_forward: input " + to_string(x.shape()) + " does not match [B, " +
                     std::to_string(height * width) + ", " + std::to_string(cfg.dim) + "]");
  if (height % cfg.window != 0 || width % cfg.window != 0)
    throw ShapeError("stl_forward: " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by window " + std::to_string(cfg.window));
  const std::int64_t b = x.dim(0);
  const std::int64_t s = cfg.shift;

  Var<T> h = reshape(layer_norm(x, p.norm1), {b, height, width, cfg.dim});
  if (s > 0) h = cyclic_shift(h, -s, -s);
  std::optional<Tensor<T>> mask;
  if (s > 0) mask = build_shift_mask<T>(height, width, cfg.window, s);
  h = window_attention(window_partition(h, cfg.window), p.attn, cfg.heads, mask);
  h = window_reverse(h, cfg.window, height, width);
  if (s > 0) h = cyclic_shift(h, s, s);
  const Var<T> mid = add(x, reshape(h, x.shape()));

  const Var<T> mlp = linear(gelu(linear(layer_norm(mid, p.norm2), p.fc1)), p.fc2);
  return add(mid, mlp);
}

template <typename T>
std::vector<StlParams<T>> make_stb_params(ParameterList<T>& params, const std::string& prefix,
                                          const StbConfig& cfg, ParamInit& init) {
  if (cfg.depth < 2 || cfg.depth % 2 != 0)
    throw ShapeError("Swin block depth must be a positive even number, got " + std::to_string(cfg.depth));
  std::vector<StlParams<T>> layers;
  for (std::int64_t i = 0; i < cfg.depth; ++i)
    layers.push_back(make_stl_params(params, prefix + ".layers." + std::to_string(i), cfg.layer(i), init));
  return layers;
}

template <typename T>
Var<T> stb_forward(const Var<T>& x, const StbConfig& cfg, std::span<const StlParams<T>> layers,
                   std::int64_t height, std::int64_t width) {
  if (cfg.depth < 2 || cfg.depth % 2 != 0)
    throw ShapeError("Swin block depth must be a positive even number, got " + std::to_string(cfg.depth));
  if (static_cast<std::int64_t>(layers.size()) != cfg.depth)
    throw ShapeError("stb_forward: expected " + std::to_string(cfg.depth) + " layer parameter sets");
  Var<T> h = x;
  for (std::int64_t i = 0; i < cfg.depth; ++i)
    h = stl_forward(h, cfg.layer(i), layers[static_cast<std::size_t>(i)], height, width);
  return h;
}

#define SUNET_INSTANTIATE_SWIN(T)                                                                          \
  template StlParams<T> make_stl_params<T>(ParameterList<T>&, const std::string&, const StlConfig&,       \
                                           ParamInit&);                                                    \
  template Var<T> window_partition<T>(const Var<T>&, std::int64_t);                                        \
  template Var<T> window_reverse<T>(const Var<T>&, std::int64_t, std::int64_t, std::int64_t);              \
  template Var<T> cyclic_shift<T>(const Var<T>&, std::int64_t, std::int64_t);                              \
  template Tensor<T> build_shift_mask<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t);          \
  template Var<T> window_attention<T>(const Var<T>&, const WindowAttentionParams<T>&, std::int64_t,        \
                                      const std::optional<Tensor<T>>&);                                    \
  template Var<T> stl_forward<T>(const Var<T>&, const StlConfig&, const StlParams<T>&, std::int64_t,       \
                                 std::int64_t);                                                            \
  template std::vector<StlParams<T>> make_stb_params<T>(ParameterList<T>&, const std::string&,             \
                                                        const StbConfig&, ParamInit&);                     \
  template Var<T> stb_forward<T>(const Var<T>&, const StbConfig&, std::span<const StlParams<T>>,           \
                                 std::int64_t, std::int64_t);

SUNET_INSTANTIATE_SWIN(float)
SUNET_INSTANTIATE_SWIN(double)

}  // namespace sunet
