#pragma once

#include <cmath>
#include <functional>

#include "sunet/ops.hpp"
#include "sunet/swin.hpp"
#include "test_util.hpp"

namespace sunet::testing {

// Builds STL parameters and overwrites every tensor with U(-a, a) so that the
// attention logits are far from uniform.
inline StlParams<double> random_stl(ParameterList<double>& params, const StlConfig& cfg, std::uint64_t seed,
                             double a = 0.5) {
  ParamInit init(seed);
  auto p = make_stl_params(params, "stl", cfg, init);
  std::uint64_t s = seed * 1000;
  for (auto& item : params.items()) {
    Var<double> v = item.var;
    v.mutable_value() = random_tensor(v.shape(), ++s, -a, a);
  }
  return p;
}

// Dense single-head-at-a-time attention over `tokens` [N, C] in which token q
// may attend to token k iff allowed(q, k); rel(q, k) returns the bias-table row.
inline Tensor<double> dense_attention(const Tensor<double>& tokens, const WindowAttentionParams<double>& p,
                               std::int64_t heads, const std::function<bool(int, int)>& allowed,
                               const std::function<std::int64_t(int, int)>& rel) {
  const int n = static_cast<int>(tokens.dim(0)), c = static_cast<int>(tokens.dim(1));
  const int d = c / static_cast<int>(heads);
  const auto& wq = p.qkv.weight.value();
  const auto& bq = p.qkv.bias->value();
  std::vector<double> qkv(static_cast<std::size_t>(n) * 3 * c);
  for (int t = 0; t < n; ++t)
    for (int j = 0; j < 3 * c; ++j) {
      double s = bq[j];
      for (int i = 0; i < c; ++i) s += tokens.at({t, i}) * wq.at({i, j});
      qkv[static_cast<std::size_t>(t) * 3 * c + j] = s;
    }
  auto at = [&](int t, int which, int h, int j) { return qkv[static_cast<std::size_t>(t) * 3 * c + which * c + h * d + j]; };

  Tensor<double> mixed = Tensor<double>::zeros({n, c});
  for (int h = 0; h < heads; ++h)
    for (int q = 0; q < n; ++q) {
      std::vector<double> logit(n, 0.0);
      double mx = -INFINITY;
      for (int k = 0; k < n; ++k) {
        if (!allowed(q, k)) continue;
        double s = 0;
        for (int j = 0; j < d; ++j) s += at(q, 0, h, j) * at(k, 1, h, j);
        logit[k] = s / std::sqrt(static_cast<double>(d)) + p.rel_bias.value().at({rel(q, k), h});
        mx = std::max(mx, logit[k]);
      }
      double z = 0;
      for (int k = 0; k < n; ++k)
        if (allowed(q, k)) z += std::exp(logit[k] - mx);
      for (int k = 0; k < n; ++k) {
        if (!allowed(q, k)) continue;
        const double a = std::exp(logit[k] - mx) / z;
        for (int j = 0; j < d; ++j) mixed.at({q, h * d + j}) += a * at(k, 2, h, j);
      }
    }
  Tensor<double> out = Tensor<double>::zeros({n, c});
  const auto& wp = p.proj.weight.value();
  const auto& bp = p.proj.bias->value();
  for (int t = 0; t < n; ++t)
    for (int j = 0; j < c; ++j) {
      double s = bp[j];
      for (int i = 0; i < c; ++i) s += mixed.at({t, i}) * wp.at({i, j});
      out.at({t, j}) = s;
    }
  return out;
}

inline std::int64_t rel_row(int yq, int xq, int yk, int xk, int w) {
  return static_cast<std::int64_t>(yq - yk + w - 1) * (2 * w - 1) + (xq - xk + w - 1);
}

// Region of a coordinate for a shift s: the first s rows wrap around to the
// end, the rest are cut into bands of w starting at s.
inline int region(int y, int w, int s) { return s == 0 ? y / w : (y < s ? -1 : (y - s) / w); }


// Shifted-window attention through cyclic shift, partition, mask and reverse.
inline Tensor<double> shifted_window_attention(const Tensor<double>& x, const WindowAttentionParams<double>& p,
                                               std::int64_t heads, std::int64_t w, std::int64_t s) {
  const std::int64_t H = x.dim(1), W = x.dim(2);
  auto h = cyclic_shift(constant(x), -s, -s);
  h = window_attention<double>(window_partition(h, w), p, heads, build_shift_mask<double>(H, W, w, s));
  return cyclic_shift(window_reverse(h, w, H, W), s, s).value();
}

// The same attention computed densely: token q sees token k iff both lie in
// the same region of the shifted tiling.
inline Tensor<double> region_attention(const Tensor<double>& x, const WindowAttentionParams<double>& p,
                                       std::int64_t heads, int w, int s) {
  const int H = static_cast<int>(x.dim(1)), W = static_cast<int>(x.dim(2)), C = static_cast<int>(x.dim(3));
  return dense_attention(
             x.reshape({H * W, C}), p, heads,
             [&](int q, int k) {
               return region(q / W, w, s) == region(k / W, w, s) && region(q % W, w, s) == region(k % W, w, s);
             },
             [&](int q, int k) { return rel_row(q / W, q % W, k / W, k % W, w); })
      .reshape({1, H, W, C});
}

}  // namespace sunet::testing
