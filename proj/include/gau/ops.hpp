#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gau/tensor.hpp"

// Differentiable tensor operations. Every op records its backward rule on the
// active tape when any input requires a gradient.
namespace gau::ops {

// Matrix products. Shapes: a[m x k] b[k x p] -> [m x p].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[m x k] b[p x k] -> a * b^T [m x p]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> transpose(const Tensor<T>& a);

// Binary elementwise ops. `b` either matches `a` exactly or has leading
// extents of 1 (e.g. a row [1 x d] against [n x d]).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);

// Column broadcasts: c has shape [n x 1] against a[n x d].
template <class T>
Tensor<T> add_col(const Tensor<T>& a, const Tensor<T>& c);
template <class T>
Tensor<T> sub_col(const Tensor<T>& a, const Tensor<T>& c);
template <class T>
Tensor<T> mul_col(const Tensor<T>& a, const Tensor<T>& c);

template <class T>
Tensor<T> scale_const(const Tensor<T>& x, double c);
template <class T>
Tensor<T> add_const(const Tensor<T>& x, double c);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> square(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> log(const Tensor<T>& x);
template <class T>
Tensor<T> exp(const Tensor<T>& x);
// x^(-1/2)
template <class T>
Tensor<T> rsqrt(const Tensor<T>& x);
template <class T>
Tensor<T> reciprocal(const Tensor<T>& x);
// Exact erf-based GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x);

enum class ReduceKind { sum, mean, var };

// Reduces over `axis`, keeping it with extent 1. `var` is the population
// variance (divides by the axis extent).
template <class T>
Tensor<T> reduce(const Tensor<T>& x, size_t axis, ReduceKind kind);
template <class T>
Tensor<T> sum_all(const Tensor<T>& x);

// Softmax over the last axis, stabilized by max subtraction.
template <class T>
Tensor<T> row_softmax(const Tensor<T>& x);

// Inverted dropout. The mask for element i is a hash of (key, i), so masks
// are reproducible and independent of evaluation order.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng);
template <class T>
Tensor<T> dropout_keyed(const Tensor<T>& x, double rate, Mode mode, uint64_t key);
// Rows are split into keys.size() equal consecutive blocks; block b uses
// keys[b]. Used so each sequence of a packed batch owns its mask stream.
template <class T>
Tensor<T> dropout_rows(const Tensor<T>& x, double rate, Mode mode,
                       std::span<const uint64_t> keys);

template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int32_t> ids);

// Mean cross entropy over targets != ignore_index. When `denominator` > 0 the
// summed loss is divided by it instead of the local count.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets,
                                int32_t ignore_index, double denominator = 0.0);

// Row slicing and concatenation on 2-D tensors.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, size_t begin, size_t count);
template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <class T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts);

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

}  // namespace gau::ops
