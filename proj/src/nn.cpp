#include "sunet/nn.hpp"

#include <algorithm>
#include <cmath>

#include "sunet/ops.hpp"

namespace sunet {

template <typename T>
Var<T> linear(const Var<T>& x, const LinearParams<T>& p) {
  const std::int64_t in = p.in_features();
  const std::int64_t out = p.out_features();
  if (x.value().rank() < 1 || x.dim(-1) != in)
    throw ShapeError("linear expects last extent " + std::to_string(in) + ", got " + to_string(x.shape()));
  if (p.bias && p.bias->value().size() != out) throw ShapeError("linear bias length must equal out features");
  const std::int64_t rows = x.value().size() / in;
  Shape shape = x.shape();
  shape.back() = out;
  Tensor<T> y = Tensor<T>::zeros(shape);
  T* yd = y.data().data();
  if (p.bias) {
    const T* bd = p.bias->value().data().data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy_n(bd, out, yd + r * out);
  }
  kernels::gemm_nn(rows, out, in, x.value().data().data(), p.weight.value().data().data(), yd);

  const Var<T> w = p.weight;
  const std::optional<Var<T>> b = p.bias;
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return make_op<T>(std::move(y), inputs, [x, w, b, rows, in, out](const Tensor<T>& g) {
    const T* gd = g.data().data();
    if (x.requires_grad())
      kernels::gemm_nt(rows, out, in, gd, w.value().data().data(), x.node().grad_buffer().data().data());
    if (w.requires_grad())
      kernels::gemm_tn(rows, out, in, x.value().data().data(), gd, w.node().grad_buffer().data().data());
    if (b && b->requires_grad()) {
      T* gb = b->node().grad_buffer().data().data();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < out; ++j) gb[j] += gd[r * out + j];
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const ConvParams<T>& p) {
  const Shape& ks = p.kernel.shape();
  if (x.value().rank() != 4 || ks.size() != 4) throw ShapeError("conv2d expects NHWC input and a rank-4 kernel");
  const std::int64_t kh = ks[0], kw = ks[1], cin = ks[2], cout = ks[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel extents must be odd for same padding");
  if (x.dim(3) != cin)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.dim(3)) + ", kernel expects " +
                     std::to_string(cin));
  if (p.bias && p.bias->value().size() != cout) throw ShapeError("conv2d bias length must equal out channels");
  const std::int64_t batch = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;

  Tensor<T> y = Tensor<T>::zeros({batch, h, w, cout});
  T* yd = y.data().data();
  const T* xd = x.value().data().data();
  const T* kd = p.kernel.value().data().data();
  if (p.bias) {
    const T* bd = p.bias->value().data().data();
    for (std::int64_t i = 0; i < batch * h * w; ++i) std::copy_n(bd, cout, yd + i * cout);
  }

  // Each kernel tap contributes a shifted [pixels, cin] x [cin, cout] product
  // over a contiguous run of pixels within one image row.
  auto for_each_run = [=](auto&& fn) {
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t oy = 0; oy < h; ++oy)
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t sy = oy + ky - ph;
          if (sy < 0 || sy >= h) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t x0 = std::max<std::int64_t>(0, pw - kx);
            const std::int64_t x1 = std::min<std::int64_t>(w, w + pw - kx);
            if (x1 <= x0) continue;
            const std::int64_t out_pix = (b * h + oy) * w + x0;
            const std::int64_t in_pix = (b * h + sy) * w + x0 + kx - pw;
            fn(out_pix, in_pix, x1 - x0, (ky * kw + kx) * cin * cout);
          }
        }
  };
  for_each_run([&](std::int64_t op, std::int64_t ip, std::int64_t n, std::int64_t tap) {
    kernels::gemm_nn(n, cout, cin, xd + ip * cin, kd + tap, yd + op * cout);
  });

  const Var<T> k = p.kernel;
  const std::optional<Var<T>> bias = p.bias;
  std::vector<Var<T>> inputs{x, k};
  if (bias) inputs.push_back(*bias);
  return make_op<T>(std::move(y), inputs, [x, k, bias, for_each_run, cin, cout](const Tensor<T>& g) {
    const T* gd = g.data().data();
    const T* xd = x.value().data().data();
    const T* kd = k.value().data().data();
    T* gx = x.requires_grad() ? x.node().grad_buffer().data().data() : nullptr;
    T* gk = k.requires_grad() ? k.node().grad_buffer().data().data() : nullptr;
    for_each_run([&](std::int64_t op, std::int64_t ip, std::int64_t n, std::int64_t tap) {
      if (gx) kernels::gemm_nt(n, cout, cin, gd + op * cout, kd + tap, gx + ip * cin);
      if (gk) kernels::gemm_tn(n, cout, cin, xd + ip * cin, gd + op * cout, gk + tap);
    });
    if (bias && bias->requires_grad()) {
      T* gb = bias->node().grad_buffer().data().data();
      const std::int64_t pixels = g.size() / cout;
      for (std::int64_t i = 0; i < pixels; ++i)
        for (std::int64_t j = 0; j < cout; ++j) gb[j] += gd[i * cout + j];
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const NormParams<T>& p, T eps) {
  const std::int64_t c = x.dim(-1);
  if (p.gamma.value().size() != c || p.beta.value().size() != c)
    throw ShapeError("layer_norm affine must have " + std::to_string(c) + " entries");
  const std::int64_t rows = x.value().size() / c;
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  Tensor<T> xhat = Tensor<T>::zeros(x.shape());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const T* xd = x.value().data().data();
  const T* gm = p.gamma.value().data().data();
  const T* bt = p.beta.value().data().data();
  T* yd = y.data().data();
  T* hd = xhat.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * c;
    double mu = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
    rstd[static_cast<std::size_t>(r)] = static_cast<T>(rs);
    for (std::int64_t j = 0; j < c; ++j) {
      const T nh = static_cast<T>((xr[j] - mu) * rs);
      hd[r * c + j] = nh;
      yd[r * c + j] = nh * gm[j] + bt[j];
    }
  }
  const Var<T> gamma = p.gamma, beta = p.beta;
  return make_op<T>(std::move(y), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, c](const Tensor<T>& g) {
    const T* gd = g.data().data();
    const T* hd = xhat.data().data();
    const T* gm = gamma.value().data().data();
    if (gamma.requires_grad() || beta.requires_grad()) {
      T* gg = gamma.requires_grad() ? gamma.node().grad_buffer().data().data() : nullptr;
      T* gb = beta.requires_grad() ? beta.node().grad_buffer().data().data() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j) {
          if (gg) gg[j] += gd[r * c + j] * hd[r * c + j];
          if (gb) gb[j] += gd[r * c + j];
        }
    }
    if (!x.requires_grad()) return;
    T* gx = x.node().grad_buffer().data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      double m1 = 0.0, m2 = 0.0;
      for (std::int64_t j = 0; j < c; ++j) {
        const double dh = static_cast<double>(gd[r * c + j]) * gm[j];
        m1 += dh;
        m2 += dh * hd[r * c + j];
      }
      m1 /= static_cast<double>(c);
      m2 /= static_cast<double>(c);
      const double rs = rstd[static_cast<std::size_t>(r)];
      for (std::int64_t j = 0; j < c; ++j) {
        const double dh = static_cast<double>(gd[r * c + j]) * gm[j];
        gx[r * c + j] += static_cast<T>(rs * (dh - m1 - hd[r * c + j] * m2));
      }
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Tensor<T> y = x.value();
  for (auto& v : y.data()) {
    const double d = v;
    v = static_cast<T>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
  }
  return make_op<T>(std::move(y), {x}, [x](const Tensor<T>& g) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto gx = x.node().grad_buffer().data();
    auto xd = x.value().data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double d = xd[i];
      const double cdf = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * d * d);
      gx[i] += static_cast<T>(gd[i] * (cdf + d * pdf));
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::int64_t axis) {
  const std::int64_t ax = normalize_axis(axis, x.value().rank());
  const std::int64_t n = x.shape()[ax];
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::int64_t i = ax + 1; i < x.value().rank(); ++i) inner *= x.shape()[i];
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* xd = x.value().data().data();
  T* yd = y.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T mx = xd[base];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      T s = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        yd[base + j * inner] = e;
        s += e;
      }
      for (std::int64_t j = 0; j < n; ++j) yd[base + j * inner] /= s;
    }
  Var<T> out = make_op<T>(std::move(y), {x}, nullptr);
  if (out.requires_grad()) {
    // The adjoint needs the output values; hold the node weakly to avoid a cycle.
    std::weak_ptr<Node<T>> self = out.node_ptr();
    out.node().backward = [x, self, outer, inner, n](const Tensor<T>& g) {
      auto node = self.lock();
      const T* yd = node->value.data().data();
      const T* gd = g.data().data();
      T* gx = x.node().grad_buffer().data().data();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * n * inner + i;
          T dot = 0;
          for (std::int64_t j = 0; j < n; ++j) dot += gd[base + j * inner] * yd[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j)
            gx[base + j * inner] += yd[base + j * inner] * (gd[base + j * inner] - dot);
        }
    };
  }
  return out;
}

namespace {

struct Tap {
  std::int64_t lo, hi;
  double frac;
};

std::vector<Tap> bilinear_taps(std::int64_t in, std::int64_t scale) {
  std::vector<Tap> taps(static_cast<std::size_t>(in * scale));
  for (std::int64_t o = 0; o < in * scale; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(scale) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(src));
    const std::int64_t hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> bilinear_upsample(const Var<T>& x, std::int64_t scale) {
  if (x.value().rank() != 4) throw ShapeError("bilinear_upsample expects NHWC input");
  if (scale < 1) throw ShapeError("bilinear_upsample scale must be >= 1");
  const std::int64_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::int64_t oh = h * scale, ow = w * scale;
  const auto ty = bilinear_taps(h, scale);
  const auto tx = bilinear_taps(w, scale);

  // Calls fn(out_offset, in_offset, weight) for each of the four taps of every output pixel.
  auto visit = [=](auto&& fn) {
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const Tap& py = ty[static_cast<std::size_t>(oy)];
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const Tap& px = tx[static_cast<std::size_t>(ox)];
          const std::int64_t o = ((b * oh + oy) * ow + ox) * c;
          const std::int64_t r0 = (b * h + py.lo) * w, r1 = (b * h + py.hi) * w;
          fn(o, (r0 + px.lo) * c, (1.0 - py.frac) * (1.0 - px.frac));
          fn(o, (r0 + px.hi) * c, (1.0 - py.frac) * px.frac);
          fn(o, (r1 + px.lo) * c, py.frac * (1.0 - px.frac));
          fn(o, (r1 + px.hi) * c, py.frac * px.frac);
        }
      }
  };
  Tensor<T> y = Tensor<T>::zeros({batch, oh, ow, c});
  T* yd = y.data().data();
  const T* xd = x.value().data().data();
  visit([&](std::int64_t o, std::int64_t i, double wt) {
    const T tw = static_cast<T>(wt);
    for (std::int64_t k = 0; k < c; ++k) yd[o + k] += tw * xd[i + k];
  });
  return make_op<T>(std::move(y), {x}, [x, visit, c](const Tensor<T>& g) {
    T* gx = x.node().grad_buffer().data().data();
    const T* gd = g.data().data();
    visit([&](std::int64_t o, std::int64_t i, double wt) {
      const T tw = static_cast<T>(wt);
      for (std::int64_t k = 0; k < c; ++k) gx[i + k] += tw * gd[o + k];
    });
  });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::int64_t r) {
  if (x.value().rank() != 4) throw ShapeError("pixel_shuffle expects NHWC input");
  const std::int64_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), cr = x.dim(3);
  if (r < 1 || cr % (r * r) != 0)
    throw ShapeError("pixel_shuffle: channels " + std::to_string(cr) + " not divisible by r^2 = " +
                     std::to_string(r * r));
  const std::int64_t c = cr / (r * r);
  Var<T> t = reshape(x, {batch, h, w, c, r, r});
  t = permute(t, {0, 1, 4, 2, 5, 3});
  return reshape(t, {batch, h * r, w * r, c});
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, std::int64_t r) {
  if (x.value().rank() != 4) throw ShapeError("pixel_unshuffle expects NHWC input");
  const std::int64_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (r < 1 || h % r != 0 || w % r != 0) throw ShapeError("pixel_unshuffle: spatial extents not divisible by r");
  Var<T> t = reshape(x, {batch, h / r, r, w / r, r, c});
  t = permute(t, {0, 1, 3, 5, 2, 4});
  return reshape(t, {batch, h / r, w / r, c * r * r});
}

#define SUNET_INSTANTIATE_NN(T)                                               \
  template Var<T> linear<T>(const Var<T>&, const LinearParams<T>&);           \
  template Var<T> conv2d<T>(const Var<T>&, const ConvParams<T>&);             \
  template Var<T> layer_norm<T>(const Var<T>&, const NormParams<T>&, T);      \
  template Var<T> gelu<T>(const Var<T>&);                                     \
  template Var<T> softmax<T>(const Var<T>&, std::int64_t);                    \
  template Var<T> bilinear_upsample<T>(const Var<T>&, std::int64_t);          \
  template Var<T> pixel_shuffle<T>(const Var<T>&, std::int64_t);              \
  template Var<T> pixel_unshuffle<T>(const Var<T>&, std::int64_t);

SUNET_INSTANTIATE_NN(float)
SUNET_INSTANTIATE_NN(double)

}  // namespace sunet
