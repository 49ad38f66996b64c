#include "gau/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace gau::ops {

namespace {

template <class T>
using Storage = detail::Storage<T>;
template <class T>
using StoragePtr = std::shared_ptr<Storage<T>>;

template <class T>
Tensor<T> result(Shape shape, std::vector<T> values, bool requires_grad) {
#ifndef NDEBUG
  for (T v : values) {
    if (std::isnan(v)) throw NumericalError("NaN produced by forward op");
  }
#endif
  return make_output<T>(std::move(shape), std::move(values), requires_grad);
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (+)= op(A) * op(B), all row-major. op(A) is m x k, op(B) is k x n.
template <class T>
void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> cm(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) {
    run(Map(a, M, K), Map(b, K, N));
  } else if (!trans_a && trans_b) {
    run(Map(a, M, K), Map(b, N, K).transpose());
  } else if (trans_a && !trans_b) {
    run(Map(a, K, M).transpose(), Map(b, K, N));
  } else {
    run(Map(a, K, M).transpose(), Map(b, N, K).transpose());
  }
}

template <class T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

// Size of the repeating block when `b` broadcasts against `a` by leading-1
// extents, or throws.
template <class T>
size_t broadcast_block(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return a.size();
  size_t lead = 0;
  while (lead < sb.size() && sb[lead] == 1) ++lead;
  const size_t tail = sb.size() - lead;
  bool ok = tail <= sa.size();
  if (ok) {
    for (size_t i = 0; i < tail; ++i) {
      if (sb[lead + i] != sa[sa.size() - tail + i]) {
        ok = false;
        break;
      }
    }
  }
  if (!ok) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                         " are not broadcast-compatible");
  }
  return b.size();
}

template <class T>
void accumulate(Storage<T>& dst, std::span<const T> src) {
  dst.ensure_grad();
  for (size_t i = 0; i < src.size(); ++i) dst.grad[i] += src[i];
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <class T, class F, class D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, D deriv) {
  const bool rg = needs_grad<T>({&x});
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor<T> y = result<T>(x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> xs = x.storage(), ys = y.storage();
    record_op<T>(name, {&x}, y, [xs, ys, deriv] {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (size_t i = 0; i < xs->data.size(); ++i) {
        xs->grad[i] += ys->grad[i] * deriv(xs->data[i], ys->data[i]);
      }
    });
  }
  return y;
}

enum class Binary { add, sub, mul };

// Calls f(i, i % block) for i in [0, n) without a per-element division.
template <class F>
inline void for_blocks(size_t n, size_t block, F&& f) {
  for (size_t base = 0; base < n; base += block) {
    for (size_t j = 0; j < block; ++j) f(base + j, j);
  }
}

template <class T>
Tensor<T> binary(const char* name, Binary kind, const Tensor<T>& a, const Tensor<T>& b) {
  const size_t block = broadcast_block(a, b, name);
  const bool rg = needs_grad<T>({&a, &b});
  const auto da = a.data();
  const auto db = b.data();
  std::vector<T> out(a.size());
  switch (kind) {
    case Binary::add:
      for_blocks(out.size(), block, [&](size_t i, size_t j) { out[i] = da[i] + db[j]; });
      break;
    case Binary::sub:
      for_blocks(out.size(), block, [&](size_t i, size_t j) { out[i] = da[i] - db[j]; });
      break;
    case Binary::mul:
      for_blocks(out.size(), block, [&](size_t i, size_t j) { out[i] = da[i] * db[j]; });
      break;
  }
  Tensor<T> c = result<T>(a.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> as = a.storage(), bs = b.storage(), cs = c.storage();
    record_op<T>(name, {&a, &b}, c, [as, bs, cs, kind, block] {
      const T* g = cs->grad.data();
      const size_t n = cs->grad.size();
      if (as->requires_grad) {
        as->ensure_grad();
        T* ga = as->grad.data();
        const T* db = bs->data.data();
        if (kind == Binary::mul) {
          for_blocks(n, block, [&](size_t i, size_t j) { ga[i] += g[i] * db[j]; });
        } else {
          for (size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        T* gb = bs->grad.data();
        const T* da = as->data.data();
        switch (kind) {
          case Binary::add:
            for_blocks(n, block, [&](size_t i, size_t j) { gb[j] += g[i]; });
            break;
          case Binary::sub:
            for_blocks(n, block, [&](size_t i, size_t j) { gb[j] -= g[i]; });
            break;
          case Binary::mul:
            for_blocks(n, block, [&](size_t i, size_t j) { gb[j] += g[i] * da[i]; });
            break;
        }
      }
    });
  }
  return c;
}

template <class T>
Tensor<T> column(const char* name, Binary kind, const Tensor<T>& a, const Tensor<T>& c) {
  require_rank2(a, name);
  if (c.rank() != 2 || c.dim(0) != a.dim(0) || c.dim(1) != 1) {
    throw DimensionError(std::string(name) + ": column " + shape_str(c.shape()) +
                         " does not match " + shape_str(a.shape()));
  }
  const size_t rows = a.dim(0), cols = a.dim(1);
  const bool rg = needs_grad<T>({&a, &c});
  const auto da = a.data();
  const auto dc = c.data();
  std::vector<T> out(a.size());
  for (size_t i = 0; i < rows; ++i) {
    for (size_t j = 0; j < cols; ++j) {
      const T x = da[i * cols + j];
      out[i * cols + j] = kind == Binary::add ? x + dc[i] : kind == Binary::sub ? x - dc[i] : x * dc[i];
    }
  }
  Tensor<T> y = result<T>(a.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> as = a.storage(), cs = c.storage(), ys = y.storage();
    record_op<T>(name, {&a, &c}, y, [as, cs, ys, kind, rows, cols] {
      const auto& g = ys->grad;
      if (as->requires_grad) {
        as->ensure_grad();
        for (size_t i = 0; i < rows; ++i) {
          for (size_t j = 0; j < cols; ++j) {
            const size_t e = i * cols + j;
            as->grad[e] += kind == Binary::mul ? g[e] * cs->data[i] : g[e];
          }
        }
      }
      if (cs->requires_grad) {
        cs->ensure_grad();
        for (size_t i = 0; i < rows; ++i) {
          T acc = 0;
          for (size_t j = 0; j < cols; ++j) {
            const size_t e = i * cols + j;
            acc += kind == Binary::add ? g[e] : kind == Binary::sub ? -g[e] : g[e] * as->data[e];
          }
          cs->grad[i] += acc;
        }
      }
    });
  }
  return y;
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  const bool rg = needs_grad<T>({&a, &b});
  std::vector<T> out(m * p);
  gemm<T>(false, false, m, p, k, a.data().data(), b.data().data(), out.data(), false);
  Tensor<T> c = result<T>({m, p}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> as = a.storage(), bs = b.storage(), cs = c.storage();
    record_op<T>("matmul", {&a, &b}, c, [as, bs, cs, m, k, p] {
      if (as->requires_grad) {  // dA = dC * B^T
        as->ensure_grad();
        gemm<T>(false, true, m, k, p, cs->grad.data(), bs->data.data(), as->grad.data(), true);
      }
      if (bs->requires_grad) {  // dB = A^T * dC
        bs->ensure_grad();
        gemm<T>(true, false, k, p, m, as->data.data(), cs->grad.data(), bs->grad.data(), true);
      }
    });
  }
  return c;
}

template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ for " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  const size_t m = a.dim(0), k = a.dim(1), p = b.dim(0);
  const bool rg = needs_grad<T>({&a, &b});
  std::vector<T> out(m * p);
  gemm<T>(false, true, m, p, k, a.data().data(), b.data().data(), out.data(), false);
  Tensor<T> c = result<T>({m, p}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> as = a.storage(), bs = b.storage(), cs = c.storage();
    record_op<T>("matmul_nt", {&a, &b}, c, [as, bs, cs, m, k, p] {
      if (as->requires_grad) {  // dA = dC * B
        as->ensure_grad();
        gemm<T>(false, false, m, k, p, cs->grad.data(), bs->data.data(), as->grad.data(), true);
      }
      if (bs->requires_grad) {  // dB = dC^T * A
        bs->ensure_grad();
        gemm<T>(true, false, p, k, m, cs->grad.data(), as->data.data(), bs->grad.data(), true);
      }
    });
  }
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a, "transpose");
  const size_t r = a.dim(0), c = a.dim(1);
  const bool rg = needs_grad<T>({&a});
  std::vector<T> out(a.size());
  const auto d = a.data();
  for (size_t i = 0; i < r; ++i) {
    for (size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
  }
  Tensor<T> y = result<T>({c, r}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> as = a.storage(), ys = y.storage();
    record_op<T>("transpose", {&a}, y, [as, ys, r, c] {
      as->ensure_grad();
      for (size_t i = 0; i < r; ++i) {
        for (size_t j = 0; j < c; ++j) as->grad[i * c + j] += ys->grad[j * r + i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", Binary::add, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", Binary::sub, a, b);
}
template <class T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("hadamard", Binary::mul, a, b);
}

template <class T>
Tensor<T> add_col(const Tensor<T>& a, const Tensor<T>& c) {
  return column("add_col", Binary::add, a, c);
}
template <class T>
Tensor<T> sub_col(const Tensor<T>& a, const Tensor<T>& c) {
  return column("sub_col", Binary::sub, a, c);
}
template <class T>
Tensor<T> mul_col(const Tensor<T>& a, const Tensor<T>& c) {
  return column("mul_col", Binary::mul, a, c);
}

template <class T>
Tensor<T> scale_const(const Tensor<T>& x, double c) {
  const T k = static_cast<T>(c);
  return unary("scale_const", x, [k](T v) { return v * k; }, [k](T, T) { return k; });
}

template <class T>
Tensor<T> add_const(const Tensor<T>& x, double c) {
  const T k = static_cast<T>(c);
  return unary("add_const", x, [k](T v) { return v + k; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return unary("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> rsqrt(const Tensor<T>& x) {
  return unary(
      "rsqrt", x, [](T v) { return T(1) / std::sqrt(v); },
      [](T v, T y) { return T(-0.5) * y / v; });
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return unary(
      "reciprocal", x, [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return unary(
      "gelu", x,
      [](T v) { return static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2))); },
      [](T v, T) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * double(v) * v);
        return static_cast<T>(cdf + v * pdf);
      });
}

namespace {

// Eight independent partial sums break the add latency chain.
template <class T>
T contiguous_sum(const T* p, size_t n) {
  T acc[8] = {};
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (size_t k = 0; k < 8; ++k) acc[k] += p[i + k];
  }
  for (; i < n; ++i) acc[0] += p[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class T>
T contiguous_sq_dev(const T* p, size_t n, T mean) {
  T acc[8] = {};
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (size_t k = 0; k < 8; ++k) {
      const T dv = p[i + k] - mean;
      acc[k] += dv * dv;
    }
  }
  for (; i < n; ++i) acc[0] += (p[i] - mean) * (p[i] - mean);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class T>
T strided_sum(const T* p, size_t n, size_t stride) {
  T acc = 0;
  for (size_t l = 0; l < n; ++l) acc += p[l * stride];
  return acc;
}

}  // namespace

template <class T>
Tensor<T> reduce(const Tensor<T>& x, size_t axis, ReduceKind kind) {
  if (axis >= x.rank()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const size_t len = s[axis];
  Shape out_shape = s;
  out_shape[axis] = 1;

  const auto d = x.data();
  std::vector<T> out(outer * inner);
  std::vector<T> means;  // kept for the variance backward
  if (kind == ReduceKind::var) means.resize(outer * inner);
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const T acc = inner == 1 ? contiguous_sum(&d[o * len], len)
                               : strided_sum(&d[o * len * inner + in], len, inner);
      const size_t idx = o * inner + in;
      if (kind == ReduceKind::sum) {
        out[idx] = acc;
        continue;
      }
      const T mean = acc / static_cast<T>(len);
      if (kind == ReduceKind::mean) {
        out[idx] = mean;
        continue;
      }
      T sq = 0;
      if (inner == 1) {
        sq = contiguous_sq_dev(&d[o * len], len, mean);
      } else {
        for (size_t l = 0; l < len; ++l) {
          const T dv = d[(o * len + l) * inner + in] - mean;
          sq += dv * dv;
        }
      }
      means[idx] = mean;
      out[idx] = sq / static_cast<T>(len);
    }
  }
  const bool rg = needs_grad<T>({&x});
  Tensor<T> y = result<T>(std::move(out_shape), std::move(out), rg);
  if (rg) {
    StoragePtr<T> xs = x.storage(), ys = y.storage();
    record_op<T>("reduce", {&x}, y,
                 [xs, ys, kind, outer, inner, len, means = std::move(means)] {
                   xs->ensure_grad();
                   const T inv = T(1) / static_cast<T>(len);
                   T* gx = xs->grad.data();
                   const T* dx = xs->data.data();
                   for (size_t o = 0; o < outer; ++o) {
                     for (size_t in = 0; in < inner; ++in) {
                       const size_t idx = o * inner + in;
                       const T g = ys->grad[idx];
                       const size_t first = o * len * inner + in;
                       if (kind == ReduceKind::var) {
                         const T c = g * T(2) * inv, mean = means[idx];
                         for (size_t l = 0; l < len; ++l) {
                           const size_t e = first + l * inner;
                           gx[e] += c * (dx[e] - mean);
                         }
                       } else {
                         const T c = kind == ReduceKind::sum ? g : g * inv;
                         for (size_t l = 0; l < len; ++l) gx[first + l * inner] += c;
                       }
                     }
                   }
                 });
  }
  return y;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  return reduce(reshape(x, {x.size()}), 0, ReduceKind::sum);
}

template <class T>
Tensor<T> row_softmax(const Tensor<T>& x) {
  const size_t n = x.shape().back();
  const size_t rows = x.size() / n;
  const auto d = x.data();
  std::vector<T> out(x.size());
  for (size_t r = 0; r < rows; ++r) {
    const T* in = d.data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  const bool rg = needs_grad<T>({&x});
  Tensor<T> y = result<T>(x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> xs = x.storage(), ys = y.storage();
    record_op<T>("row_softmax", {&x}, y, [xs, ys, rows, n] {
      xs->ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const T* yv = ys->data.data() + r * n;
        const T* g = ys->grad.data() + r * n;
        T dot = 0;
        for (size_t j = 0; j < n; ++j) dot += g[j] * yv[j];
        T* gx = xs->grad.data() + r * n;
        for (size_t j = 0; j < n; ++j) gx[j] += yv[j] * (g[j] - dot);
      }
    });
  }
  return y;
}

namespace {

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

template <class T>
Tensor<T> apply_mask(const Tensor<T>& x, std::vector<T> mask) {
  const bool rg = needs_grad<T>({&x});
  std::vector<T> out(x.size());
  const auto d = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = d[i] * mask[i];
  Tensor<T> y = result<T>(x.shape(), std::move(out), rg);
  if (rg) {
    StoragePtr<T> xs = x.storage(), ys = y.storage();
    record_op<T>("dropout", {&x}, y, [xs, ys, mask = std::move(mask)] {
      xs->ensure_grad();
      for (size_t i = 0; i < mask.size(); ++i) xs->grad[i] += ys->grad[i] * mask[i];
    });
  }
  return y;
}

template <class T>
void fill_mask(std::span<T> mask, double rate, uint64_t key) {
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (size_t i = 0; i < mask.size(); ++i) {
    mask[i] = unit_double(derive_key(key, i)) < rate ? T(0) : keep;
  }
}

}  // namespace

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  check_rate(rate);
  return dropout_keyed(x, rate, mode, rng.next());
}

template <class T>
Tensor<T> dropout_keyed(const Tensor<T>& x, double rate, Mode mode, uint64_t key) {
  check_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return x;
  std::vector<T> mask(x.size());
  fill_mask<T>(mask, rate, key);
  return apply_mask(x, std::move(mask));
}

template <class T>
Tensor<T> dropout_rows(const Tensor<T>& x, double rate, Mode mode, std::span<const uint64_t> keys) {
  check_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return x;
  if (keys.empty() || x.dim(0) % keys.size() != 0) {
    throw DimensionError("dropout_rows: " + std::to_string(keys.size()) +
                         " keys do not evenly split " + shape_str(x.shape()));
  }
  std::vector<T> mask(x.size());
  const size_t block = x.size() / keys.size();
  for (size_t b = 0; b < keys.size(); ++b) {
    fill_mask<T>(std::span<T>(mask).subspan(b * block, block), rate, keys[b]);
  }
  return apply_mask(x, std::move(mask));
}

template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int32_t> ids) {
  require_rank2(table, "embedding_lookup");
  const size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  std::vector<T> out(ids.size() * d);
  const auto t = table.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding_lookup: id " + std::to_string(ids[i]) +
                           " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(t.data() + ids[i] * d, d, out.data() + i * d);
  }
  const bool rg = needs_grad<T>({&table});
  Tensor<T> y = result<T>({ids.size(), d}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> ts = table.storage(), ys = y.storage();
    std::vector<int32_t> idv(ids.begin(), ids.end());
    record_op<T>("embedding_lookup", {&table}, y, [ts, ys, d, idv = std::move(idv)] {
      ts->ensure_grad();
      for (size_t i = 0; i < idv.size(); ++i) {
        T* dst = ts->grad.data() + idv[i] * d;
        const T* src = ys->grad.data() + i * d;
        for (size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets,
                                int32_t ignore_index, double denominator) {
  require_rank2(logits, "softmax_cross_entropy");
  const size_t rows = logits.dim(0), v = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  size_t counted = 0;
  for (int32_t t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<size_t>(t) >= v) {
      throw DimensionError("softmax_cross_entropy: target " + std::to_string(t) +
                           " outside " + std::to_string(v) + " classes");
    }
    ++counted;
  }
  if (counted == 0) throw Error("softmax_cross_entropy: every target is ignored");
  const double denom = denominator > 0.0 ? denominator : static_cast<double>(counted);

  // Probabilities are kept for the backward pass.
  std::vector<T> probs(rows * v, T(0));
  const auto d = logits.data();
  double loss = 0.0;
  for (size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const T* in = d.data() + r * v;
    const T mx = *std::max_element(in, in + v);
    double total = 0.0;
    for (size_t j = 0; j < v; ++j) total += std::exp(double(in[j] - mx));
    const double log_z = std::log(total) + mx;
    loss += log_z - in[targets[r]];
    T* p = probs.data() + r * v;
    for (size_t j = 0; j < v; ++j) p[j] = static_cast<T>(std::exp(double(in[j]) - log_z));
  }
  const bool rg = needs_grad<T>({&logits});
  Tensor<T> y = result<T>({1}, {static_cast<T>(loss / denom)}, rg);
  if (rg) {
    StoragePtr<T> ls = logits.storage(), ys = y.storage();
    std::vector<int32_t> tv(targets.begin(), targets.end());
    record_op<T>("softmax_cross_entropy", {&logits}, y,
                 [ls, ys, rows, v, ignore_index, denom, tv = std::move(tv),
                  probs = std::move(probs)] {
                   ls->ensure_grad();
                   const T g = static_cast<T>(ys->grad[0] / denom);
                   for (size_t r = 0; r < rows; ++r) {
                     if (tv[r] == ignore_index) continue;
                     T* gx = ls->grad.data() + r * v;
                     const T* p = probs.data() + r * v;
                     for (size_t j = 0; j < v; ++j) gx[j] += g * p[j];
                     gx[tv[r]] -= g;
                   }
                 });
  }
  return y;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, size_t begin, size_t count) {
  require_rank2(x, "slice_rows");
  if (count == 0 || begin + count > x.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_str(x.shape()));
  }
  const size_t cols = x.dim(1);
  const auto d = x.data();
  std::vector<T> out(d.begin() + begin * cols, d.begin() + (begin + count) * cols);
  const bool rg = needs_grad<T>({&x});
  Tensor<T> y = result<T>({count, cols}, std::move(out), rg);
  if (rg) {
    StoragePtr<T> xs = x.storage(), ys = y.storage();
    record_op<T>("slice_rows", {&x}, y, [xs, ys, begin, cols] {
      xs->ensure_grad();
      T* dst = xs->grad.data() + begin * cols;
      for (size_t i = 0; i < ys->grad.size(); ++i) dst[i] += ys->grad[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const size_t cols = parts[0].dim(1);
  size_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    rg = rg || needs_grad<T>({&p});
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> y = result<T>({rows, cols}, std::move(out), rg);
  if (rg) {
    std::vector<StoragePtr<T>> inputs;
    for (const auto& p : parts) inputs.push_back(p.storage());
    StoragePtr<T> ys = y.storage();
    auto backward = [inputs, ys] {
      size_t offset = 0;
      for (const auto& in : inputs) {
        const size_t n = in->data.size();
        if (in->requires_grad) {
          in->ensure_grad();
          for (size_t i = 0; i < n; ++i) in->grad[i] += ys->grad[offset + i];
        }
        offset += n;
      }
    };
    typename Tape<T>::Entry entry{"concat_rows", inputs, ys, backward};
    active_tape<T>()->record(std::move(entry));
  }
  return y;
}

template <class T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const size_t rows = parts[0].dim(0);
  size_t cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    cols += p.dim(1);
    rg = rg || needs_grad<T>({&p});
  }
  std::vector<T> out(rows * cols);
  size_t offset = 0;
  for (const auto& p : parts) {
    const size_t pc = p.dim(1);
    for (size_t i = 0; i < rows; ++i) {
      std::copy_n(p.data().data() + i * pc, pc, out.data() + i * cols + offset);
    }
    offset += pc;
  }
  Tensor<T> y = result<T>({rows, cols}, std::move(out), rg);
  if (rg) {
    std::vector<StoragePtr<T>> inputs;
    for (const auto& p : parts) inputs.push_back(p.storage());
    StoragePtr<T> ys = y.storage();
    auto backward = [inputs, ys, rows, cols] {
      size_t off = 0;
      for (const auto& in : inputs) {
        const size_t pc = in->shape[1];
        if (in->requires_grad) {
          in->ensure_grad();
          for (size_t i = 0; i < rows; ++i) {
            for (size_t j = 0; j < pc; ++j) in->grad[i * pc + j] += ys->grad[i * cols + off + j];
          }
        }
        off += pc;
      }
    };
    typename Tape<T>::Entry entry{"concat_cols", inputs, ys, backward};
    active_tape<T>()->record(std::move(entry));
  }
  return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  const bool rg = needs_grad<T>({&x});
  std::vector<T> out(x.data().begin(), x.data().end());
  Tensor<T> y = result<T>(std::move(shape), std::move(out), rg);
  if (rg) {
    StoragePtr<T> xs = x.storage(), ys = y.storage();
    record_op<T>("reshape", {&x}, y, [xs, ys] { accumulate<T>(*xs, ys->grad); });
  }
  return y;
}

#define GAU_INSTANTIATE_OPS(T)                                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> transpose(const Tensor<T>&);                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add_col(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub_col(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul_col(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale_const(const Tensor<T>&, double);                                   \
  template Tensor<T> add_const(const Tensor<T>&, double);                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> square(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> log(const Tensor<T>&);                                                   \
  template Tensor<T> exp(const Tensor<T>&);                                                   \
  template Tensor<T> rsqrt(const Tensor<T>&);                                                 \
  template Tensor<T> reciprocal(const Tensor<T>&);                                            \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> reduce(const Tensor<T>&, size_t, ReduceKind);                            \
  template Tensor<T> sum_all(const Tensor<T>&);                                               \
  template Tensor<T> row_softmax(const Tensor<T>&);                                           \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, Rng&);                           \
  template Tensor<T> dropout_keyed(const Tensor<T>&, double, Mode, uint64_t);                 \
  template Tensor<T> dropout_rows(const Tensor<T>&, double, Mode, std::span<const uint64_t>); \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int32_t>);            \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int32_t>,        \
                                           int32_t, double);                                  \
  template Tensor<T> slice_rows(const Tensor<T>&, size_t, size_t);                            \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                 \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

GAU_INSTANTIATE_OPS(float)
GAU_INSTANTIATE_OPS(double)

#undef GAU_INSTANTIATE_OPS

}  // namespace gau::ops
