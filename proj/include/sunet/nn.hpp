#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "sunet/autograd.hpp"

namespace sunet {

template <typename T>
struct LinearParams {
  Var<T> weight;  // [in, out]
  std::optional<Var<T>> bias;  // [out]

  std::int64_t in_features() const { return weight.dim(0); }
  std::int64_t out_features() const { return weight.dim(1); }
};

template <typename T>
struct ConvParams {
  Var<T> kernel;  // [kh, kw, in, out]
  std::optional<Var<T>> bias;  // [out]
};

template <typename T>
struct NormParams {
  Var<T> gamma;  // [C]
  Var<T> beta;   // [C]
};

/// Seeded weight initializer. Draws are consumed in registration order, so a
/// fixed seed and build order reproduce every value bit-exactly.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : rng_(seed) {}

  /// Normal(0, std) resampled until within two standard deviations.
  template <typename T>
  Tensor<T> trunc_normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) {
      double d;
      do d = dist(rng_);
      while (std::abs(d) > 2.0 * stddev);
      x = static_cast<T>(d);
    }
    return Tensor<T>(std::move(shape), std::move(v));
  }

 private:
  std::mt19937_64 rng_;
};

inline constexpr double kInitStd = 0.02;

template <typename T>
LinearParams<T> make_linear(ParameterList<T>& params, const std::string& prefix, std::int64_t in,
                            std::int64_t out, bool bias, ParamInit& init) {
  LinearParams<T> p;
  p.weight = params.add(prefix + ".weight", init.trunc_normal<T>({in, out}, kInitStd));
  if (bias) p.bias = params.add(prefix + ".bias", Tensor<T>::zeros({out}));
  return p;
}

template <typename T>
ConvParams<T> make_conv(ParameterList<T>& params, const std::string& prefix, std::int64_t k, std::int64_t in,
                        std::int64_t out, ParamInit& init) {
  ConvParams<T> p;
  p.kernel = params.add(prefix + ".weight", init.trunc_normal<T>({k, k, in, out}, kInitStd));
  p.bias = params.add(prefix + ".bias", Tensor<T>::zeros({out}));
  return p;
}

template <typename T>
NormParams<T> make_norm(ParameterList<T>& params, const std::string& prefix, std::int64_t c) {
  return {params.add(prefix + ".weight", Tensor<T>::full({c}, T(1))),
          params.add(prefix + ".bias", Tensor<T>::zeros({c}))};
}

/// y[..., j] = sum_i x[..., i] W[i, j] + b[j]
template <typename T>
Var<T> linear(const Var<T>& x, const LinearParams<T>& p);

/// Stride-1 convolution over NHWC input with zero "same" padding.
/// Kernel extents must be odd.
template <typename T>
Var<T> conv2d(const Var<T>& x, const ConvParams<T>& p);

/// Normalizes over the last axis, then applies the per-channel affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const NormParams<T>& p, T eps = T(1e-5));

/// Exact GELU, x * Phi(x).
template <typename T>
Var<T> gelu(const Var<T>& x);

template <typename T>
Var<T> softmax(const Var<T>& x, std::int64_t axis = -1);

/// Bilinear resize of NHWC input by an integer factor, half-pixel centers,
/// sample coordinates clamped to the valid range.
template <typename T>
Var<T> bilinear_upsample(const Var<T>& x, std::int64_t scale = 2);

/// [B,H,W,C*r*r] -> [B,rH,rW,C]; channel c*r*r + dy*r + dx lands at (r*h+dy, r*w+dx).
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::int64_t r);

/// Inverse of pixel_shuffle.
template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, std::int64_t r);

}  // namespace sunet
