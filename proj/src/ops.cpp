#include "sunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sunet {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace {

// Strides of `in` viewed under the broadcast shape `out` (0 on stretched axes).
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto cs = contiguous_strides(in);
  std::vector<std::int64_t> s(out.size(), 0);
  const std::size_t lead = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) s[lead + i] = in[i] == 1 ? 0 : cs[i];
  return s;
}

// Calls f(out_index, a_offset, b_offset) over every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t n = numel(out);
  const std::int64_t r = static_cast<std::int64_t>(out.size());
  std::vector<std::int64_t> idx(out.size(), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::int64_t d = r - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename T>
void accumulate(const Var<T>& v, const Tensor<T>& g) {
  if (!v.requires_grad()) return;
  auto& buf = v.node().grad_buffer();
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Sums `g` (shaped like the broadcast output) back onto an operand of shape `in`.
template <typename T>
void accumulate_reduced(const Var<T>& v, const Tensor<T>& g, const Shape& out) {
  if (!v.requires_grad()) return;
  if (v.shape() == out) {
    accumulate(v, g);
    return;
  }
  auto& buf = v.node().grad_buffer();
  const auto s = broadcast_strides(v.shape(), out);
  auto dst = buf.data();
  auto src = g.data();
  for_each_broadcast(out, s, s, [&](std::int64_t o, std::int64_t ia, std::int64_t) {
    dst[ia] += src[o];
  });
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op) {
  const Shape out = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  Tensor<T> y = Tensor<T>::zeros(out);
  auto yd = y.data();
  auto ad = a.value().data();
  auto bd = b.value().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < yd.size(); ++i)
      yd[i] = op == BinOp::kAdd ? ad[i] + bd[i] : op == BinOp::kSub ? ad[i] - bd[i] : ad[i] * bd[i];
  } else {
    for_each_broadcast(out, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      yd[o] = op == BinOp::kAdd ? ad[ia] + bd[ib] : op == BinOp::kSub ? ad[ia] - bd[ib] : ad[ia] * bd[ib];
    });
  }
  return make_op<T>(std::move(y), {a, b}, [a, b, op, out, sa, sb](const Tensor<T>& g) {
    if (op != BinOp::kMul) {
      accumulate_reduced(a, g, out);
      if (!b.requires_grad()) return;
      if (op == BinOp::kAdd) {
        accumulate_reduced(b, g, out);
      } else {
        Tensor<T> neg = g;
        for (auto& x : neg.data()) x = -x;
        accumulate_reduced(b, neg, out);
      }
      return;
    }
    auto gd = g.data();
    auto ad = a.value().data();
    auto bd = b.value().data();
    if (a.requires_grad()) {
      auto& ga = a.node().grad_buffer();
      auto gad = ga.data();
      for_each_broadcast(out, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        gad[ia] += gd[o] * bd[ib];
      });
    }
    if (b.requires_grad()) {
      auto& gb = b.node().grad_buffer();
      auto gbd = gb.data();
      for_each_broadcast(out, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        gbd[ib] += gd[o] * ad[ia];
      });
    }
  });
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kAdd);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kSub);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kMul);
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> y = a.value();
  for (auto& x : y.data()) x *= factor;
  return make_op<T>(std::move(y), {a}, [a, factor](const Tensor<T>& g) {
    auto& ga = a.node().grad_buffer();
    auto gad = ga.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gad.size(); ++i) gad[i] += factor * gd[i];
  });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> y = a.value();
  for (auto& x : y.data()) x = std::abs(x);
  return make_op<T>(std::move(y), {a}, [a](const Tensor<T>& g) {
    auto& ga = a.node().grad_buffer();
    auto gad = ga.data();
    auto gd = g.data();
    auto ad = a.value().data();
    for (std::size_t i = 0; i < gad.size(); ++i)
      gad[i] += ad[i] > 0 ? gd[i] : (ad[i] < 0 ? -gd[i] : T(0));
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  // Accumulate in double so float sums over large tensors stay stable.
  double s = 0.0;
  for (auto x : a.value().data()) s += x;
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(s)), {a}, [a](const Tensor<T>& g) {
    auto& ga = a.node().grad_buffer();
    for (auto& x : ga.data()) x += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.value().size())
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  Tensor<T> y = a.value().reshape(std::move(shape));
  return make_op<T>(std::move(y), {a}, [a](const Tensor<T>& g) {
    auto& ga = a.node().grad_buffer();
    auto gad = ga.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gad.size(); ++i) gad[i] += gd[i];
  });
}

namespace kernels {

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::int64_t>& axes) {
  const std::size_t r = a.shape().size();
  if (axes.size() != r) throw ShapeError("permute axes count must equal rank");
  std::vector<bool> seen(r, false);
  Shape out(r);
  const auto in_strides = contiguous_strides(a.shape());
  std::vector<std::int64_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    const auto ax = static_cast<std::size_t>(normalize_axis(axes[i], static_cast<std::int64_t>(r)));
    if (seen[ax]) throw ShapeError("permute axes must be a permutation");
    seen[ax] = true;
    out[i] = a.shape()[ax];
    src_strides[i] = in_strides[ax];
  }
  Tensor<T> y = Tensor<T>::zeros(out);
  auto yd = y.data();
  auto ad = a.data();
  for_each_broadcast(out, src_strides, src_strides,
                     [&](std::int64_t o, std::int64_t ia, std::int64_t) { yd[o] = ad[ia]; });
  return y;
}

}  // namespace kernels

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::int64_t>& axes) {
  Tensor<T> y = kernels::permute(a.value(), axes);
  std::vector<std::int64_t> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i)
    inverse[static_cast<std::size_t>(normalize_axis(axes[i], static_cast<std::int64_t>(axes.size())))] =
        static_cast<std::int64_t>(i);
  return make_op<T>(std::move(y), {a}, [a, inverse](const Tensor<T>& g) {
    accumulate(a, kernels::permute(g, inverse));
  });
}

template <typename T>
Var<T> narrow(const Var<T>& a, std::int64_t axis, std::int64_t start, std::int64_t length) {
  const std::int64_t ax = normalize_axis(axis, a.value().rank());
  const std::int64_t extent = a.shape()[ax];
  if (start < 0 || length < 1 || start + length > extent)
    throw ShapeError("narrow range out of bounds");
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= a.shape()[i];
  for (std::int64_t i = ax + 1; i < a.value().rank(); ++i) inner *= a.shape()[i];
  Shape out = a.shape();
  out[ax] = length;
  Tensor<T> y = Tensor<T>::zeros(out);
  auto yd = y.data();
  auto ad = a.value().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(ad.begin() + (o * extent + start) * inner, length * inner,
                yd.begin() + o * length * inner);
  return make_op<T>(std::move(y), {a}, [a, outer, inner, extent, start, length](const Tensor<T>& g) {
    auto& ga = a.node().grad_buffer();
    auto gad = ga.data();
    auto gd = g.data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < length * inner; ++i)
        gad[(o * extent + start) * inner + i] += gd[o * length * inner + i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::int64_t rank = parts[0].value().rank();
  const std::int64_t ax = normalize_axis(axis, rank);
  Shape out = parts[0].shape();
  out[ax] = 0;
  std::vector<std::int64_t> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<std::int64_t>(s.size()) != rank) throw ShapeError("concat rank mismatch");
    for (std::int64_t i = 0; i < rank; ++i)
      if (i != ax && s[i] != parts[0].shape()[i])
        throw ShapeError("concat extent mismatch: " + to_string(s) + " vs " + to_string(parts[0].shape()));
    extents.push_back(s[ax]);
    out[ax] += s[ax];
  }
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= out[i];
  for (std::int64_t i = ax + 1; i < rank; ++i) inner *= out[i];
  Tensor<T> y = Tensor<T>::zeros(out);
  auto yd = y.data();
  const std::int64_t total = out[ax];
  std::int64_t pos = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pd = parts[p].value().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(pd.begin() + o * extents[p] * inner, extents[p] * inner,
                  yd.begin() + (o * total + pos) * inner);
    pos += extents[p];
  }
  return make_op<T>(std::move(y), parts, [parts, extents, outer, inner, total](const Tensor<T>& g) {
    auto gd = g.data();
    std::int64_t pos = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (parts[p].requires_grad()) {
        auto& gp = parts[p].node().grad_buffer();
        auto gpd = gp.data();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < extents[p] * inner; ++i)
            gpd[o * extents[p] * inner + i] += gd[(o * total + pos) * inner + i];
      }
      pos += extents[p];
    }
  });
}

namespace {

template <typename T>
Tensor<T> roll_tensor(const Tensor<T>& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& shifts,
                      bool inverse) {
  const Shape& shape = a.shape();
  const std::int64_t r = a.rank();
  std::vector<std::int64_t> shift(static_cast<std::size_t>(r), 0);
  for (auto [axis, s] : shifts) {
    const auto ax = static_cast<std::size_t>(normalize_axis(axis, r));
    shift[ax] += inverse ? -s : s;
  }
  for (std::int64_t d = 0; d < r; ++d) {
    const std::int64_t n = shape[d];
    shift[d] = ((shift[d] % n) + n) % n;
  }
  const auto strides = contiguous_strides(shape);
  Tensor<T> y = Tensor<T>::zeros(shape);
  auto yd = y.data();
  auto ad = a.data();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  const std::int64_t n = a.size();
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t src = 0;
    for (std::int64_t d = 0; d < r; ++d) {
      std::int64_t i = idx[d] - shift[d];
      if (i < 0) i += shape[d];
      src += i * strides[d];
    }
    yd[o] = ad[src];
    for (std::int64_t d = r - 1; d >= 0; --d) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return y;
}

}  // namespace

template <typename T>
Var<T> roll(const Var<T>& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& axis_shifts) {
  Tensor<T> y = roll_tensor(a.value(), axis_shifts, false);
  return make_op<T>(std::move(y), {a}, [a, axis_shifts](const Tensor<T>& g) {
    accumulate(a, roll_tensor(g, axis_shifts, true));
  });
}

template <typename T>
Var<T> index_select(const Var<T>& a, const std::vector<std::int64_t>& indices) {
  if (a.value().rank() < 1 || indices.empty()) throw ShapeError("index_select needs rank >= 1 and indices");
  const std::int64_t rows = a.shape()[0];
  const std::int64_t row = a.value().size() / rows;
  for (auto i : indices)
    if (i < 0 || i >= rows) throw ShapeError("index_select index out of range");
  Shape out = a.shape();
  out[0] = static_cast<std::int64_t>(indices.size());
  Tensor<T> y = Tensor<T>::zeros(out);
  auto yd = y.data();
  auto ad = a.value().data();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(ad.begin() + indices[r] * row, row, yd.begin() + static_cast<std::int64_t>(r) * row);
  return make_op<T>(std::move(y), {a}, [a, indices, row](const Tensor<T>& g) {
    auto& ga = a.node().grad_buffer();
    auto gad = ga.data();
    auto gd = g.data();
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::int64_t j = 0; j < row; ++j)
        gad[indices[r] * row + j] += gd[static_cast<std::int64_t>(r) * row + j];
  });
}

namespace kernels {

std::int64_t& mac_counter() {
  thread_local std::int64_t count = 0;
  return count;
}

template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  mac_counter() += m * n * k;
  for (std::int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  mac_counter() += m * n * k;
  for (std::int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * n;
    T* ci = c + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      T s = 0;
      for (std::int64_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  mac_counter() += m * n * k;
  for (std::int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      T* cp = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template void gemm_nn<float>(std::int64_t, std::int64_t, std::int64_t, const float*, const float*, float*);
template void gemm_nn<double>(std::int64_t, std::int64_t, std::int64_t, const double*, const double*, double*);
template void gemm_nt<float>(std::int64_t, std::int64_t, std::int64_t, const float*, const float*, float*);
template void gemm_nt<double>(std::int64_t, std::int64_t, std::int64_t, const double*, const double*, double*);
template void gemm_tn<float>(std::int64_t, std::int64_t, std::int64_t, const float*, const float*, float*);
template void gemm_tn<double>(std::int64_t, std::int64_t, std::int64_t, const double*, const double*, double*);
template Tensor<float> permute<float>(const Tensor<float>&, const std::vector<std::int64_t>&);
template Tensor<double> permute<double>(const Tensor<double>&, const std::vector<std::int64_t>&);

}  // namespace kernels

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul operands need rank >= 2");
  const std::int64_t m = sa[sa.size() - 2], k = sa.back();
  const std::int64_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw ShapeError("matmul inner extents differ: " + to_string(sa) + " x " + to_string(sb));
  const bool shared_b = sb.size() == 2;
  if (!shared_b && (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())))
    throw ShapeError("matmul batch extents differ: " + to_string(sa) + " x " + to_string(sb));
  const std::int64_t batch = numel(Shape(sa.begin(), sa.end() - 2));
  Shape out(sa.begin(), sa.end() - 2);
  out.push_back(m);
  out.push_back(n);
  Tensor<T> y = Tensor<T>::zeros(out);
  const T* ad = a.value().data().data();
  const T* bd = b.value().data().data();
  T* yd = y.data().data();
  if (shared_b) {
    kernels::gemm_nn(batch * m, n, k, ad, bd, yd);
  } else {
    for (std::int64_t i = 0; i < batch; ++i)
      kernels::gemm_nn(m, n, k, ad + i * m * k, bd + i * k * n, yd + i * m * n);
  }
  return make_op<T>(std::move(y), {a, b}, [a, b, batch, m, n, k, shared_b](const Tensor<T>& g) {
    const T* gd = g.data().data();
    const T* ad = a.value().data().data();
    const T* bd = b.value().data().data();
    if (a.requires_grad()) {
      T* gad = a.node().grad_buffer().data().data();
      if (shared_b) {
        kernels::gemm_nt(batch * m, n, k, gd, bd, gad);
      } else {
        for (std::int64_t i = 0; i < batch; ++i)
          kernels::gemm_nt(m, n, k, gd + i * m * n, bd + i * k * n, gad + i * m * k);
      }
    }
    if (b.requires_grad()) {
      T* gbd = b.node().grad_buffer().data().data();
      if (shared_b) {
        kernels::gemm_tn(batch * m, n, k, ad, gd, gbd);
      } else {
        for (std::int64_t i = 0; i < batch; ++i)
          kernels::gemm_tn(m, n, k, ad + i * m * k, gd + i * m * n, gbd + i * k * n);
      }
    }
  });
}

#define SUNET_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale<T>(const Var<T>&, T);                                                     \
  template Var<T> abs<T>(const Var<T>&);                                                          \
  template Var<T> sum<T>(const Var<T>&);                                                          \
  template Var<T> mean<T>(const Var<T>&);                                                         \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                               \
  template Var<T> permute<T>(const Var<T>&, const std::vector<std::int64_t>&);                    \
  template Var<T> narrow<T>(const Var<T>&, std::int64_t, std::int64_t, std::int64_t);             \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::int64_t);                            \
  template Var<T> roll<T>(const Var<T>&, const std::vector<std::pair<std::int64_t, std::int64_t>>&); \
  template Var<T> index_select<T>(const Var<T>&, const std::vector<std::int64_t>&);               \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);

SUNET_INSTANTIATE_OPS(float)
SUNET_INSTANTIATE_OPS(double)

}  // namespace sunet
