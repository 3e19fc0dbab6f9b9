#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "sunet/autograd.hpp"

// Differentiable tensor primitives. Binary arithmetic broadcasts with
// numpy rules (shapes aligned from the right, extent 1 stretches).

namespace sunet {

Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);

template <typename T>
Var<T> abs(const Var<T>& a);
/// Sum of all elements as a rank-0 tensor.
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
/// out.shape[i] = a.shape[axes[i]].
template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::int64_t>& axes);
/// Sub-range [start, start+length) along `axis`.
template <typename T>
Var<T> narrow(const Var<T>& a, std::int64_t axis, std::int64_t start, std::int64_t length);
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::int64_t axis);
/// Toroidal roll: out[i] = a[(i - shift) mod n] along each listed axis.
template <typename T>
Var<T> roll(const Var<T>& a, const std::vector<std::pair<std::int64_t, std::int64_t>>& axis_shifts);
/// Rows of `a` along axis 0 picked by `indices`.
template <typename T>
Var<T> index_select(const Var<T>& a, const std::vector<std::int64_t>& indices);

/// Batched product a[..., M, K] x b[..., K, N]. Batch dims must match, or b is rank 2.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

namespace kernels {

/// Multiply-accumulates issued by the GEMM kernels on this thread since start
/// (or since the caller last reset it).
std::int64_t& mac_counter();

// Row-major GEMM variants; all accumulate into c.
// nn: c[M,N] += a[M,K] b[K,N]
template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c);
// nt: c[M,K] += a[M,N] b[K,N]^T
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c);
// tn: c[K,N] += a[M,K]^T b[M,N]
template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c);

/// Plain (non-differentiable) permutation of a contiguous tensor.
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::int64_t>& axes);

}  // namespace kernels

}  // namespace sunet
