#include "gau/kernels.hpp"

#include <cmath>
#include <vector>

#include "gau/ops.hpp"

namespace gau {

namespace {

// Large negative logit for masked keys; finite so no NaN can appear.
constexpr double kMaskedLogit = -1e30;

size_t count_valid(std::span<const uint8_t> key_valid, size_t n_keys) {
  if (key_valid.empty()) return n_keys;
  if (key_valid.size() != n_keys) {
    throw DimensionError("key mask of length " + std::to_string(key_valid.size()) + " for " +
                         std::to_string(n_keys) + " keys");
  }
  size_t n = 0;
  for (uint8_t v : key_valid) n += v != 0;
  return n;
}

template <class T>
void check_qk(const Tensor<T>& q, const Tensor<T>& k, const char* op) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) {
    throw DimensionError(std::string(op) + ": incompatible q " + shape_str(q.shape()) + " and k " +
                         shape_str(k.shape()));
  }
}

template <class T>
Tensor<T> scaled_logits(const Tensor<T>& q, const Tensor<T>& k, double scale) {
  return ops::scale_const(ops::matmul_nt(q, k), scale);
}

// ReLU^2 of the 1/sqrt(d_h)-scaled logits with masked keys zeroed.
template <class T>
Tensor<T> relu2_scores(const Tensor<T>& q, const Tensor<T>& k, const AttentionKernelSpec& spec,
                       std::span<const uint8_t> key_valid) {
  Tensor<T> r = ops::square(ops::relu(scaled_logits(q, k, 1.0 / std::sqrt(double(spec.d_h)))));
  if (!key_valid.empty()) {
    std::vector<T> mask(key_valid.begin(), key_valid.end());
    for (auto& m : mask) m = m != T(0) ? T(1) : T(0);
    r = ops::hadamard(r, Tensor<T>::from({1, key_valid.size()}, std::move(mask)));
  }
  return r;
}

template <class T>
Tensor<T> masked_softmax(const Tensor<T>& logits, std::span<const uint8_t> key_valid) {
  if (key_valid.empty()) return ops::row_softmax(logits);
  std::vector<T> bias(key_valid.size());
  for (size_t j = 0; j < bias.size(); ++j) {
    bias[j] = key_valid[j] ? T(0) : static_cast<T>(kMaskedLogit);
  }
  return ops::row_softmax(ops::add(logits, Tensor<T>::from({1, key_valid.size()}, std::move(bias))));
}

}  // namespace

std::string_view to_string(KernelVariant v) {
  switch (v) {
    case KernelVariant::relu2_div:
      return "relu2_div";
    case KernelVariant::scaled_relu2:
      return "scaled_relu2";
    case KernelVariant::softmax:
      return "softmax";
    case KernelVariant::softmax_plus:
      return "softmax_plus";
  }
  return "?";
}

std::string_view to_string(ScoreDenom d) {
  switch (d) {
    case ScoreDenom::n2:
      return "n2";
    case ScoreDenom::n:
      return "n";
    case ScoreDenom::ns:
      return "ns";
    case ScoreDenom::s2:
      return "s2";
  }
  return "?";
}

KernelVariant parse_kernel_variant(std::string_view name) {
  for (auto v : {KernelVariant::relu2_div, KernelVariant::scaled_relu2, KernelVariant::softmax,
                 KernelVariant::softmax_plus}) {
    if (name == to_string(v)) return v;
  }
  throw ConfigError("unknown kernel variant '" + std::string(name) +
                    "' (expected relu2_div, scaled_relu2, softmax, softmax_plus)");
}

ScoreDenom parse_score_denom(std::string_view name) {
  for (auto d : {ScoreDenom::n2, ScoreDenom::n, ScoreDenom::ns, ScoreDenom::s2}) {
    if (name == to_string(d)) return d;
  }
  throw ConfigError("unknown score denominator '" + std::string(name) +
                    "' (expected n2, n, ns, s2)");
}

void AttentionKernelSpec::validate() const {
  if (s == 0) throw ConfigError("kernel.s must be positive");
  if (d_h == 0) throw ConfigError("kernel.d_h must be positive");
  if (!(base_len > 1.0)) throw ConfigError("kernel.base_len must exceed 1");
  if (!(eps > 0.0)) throw ConfigError("kernel.eps must be positive");
  if (denom.has_value() != (variant == KernelVariant::relu2_div)) {
    throw ConfigError("kernel.denom must be set exactly when kernel.variant is relu2_div");
  }
}

std::string AttentionKernelSpec::name() const {
  std::string out(to_string(variant));
  if (denom) out += "/" + std::string(to_string(*denom));
  return out;
}

double RoPEConfig::theta(size_t i) const {
  return std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
}

void RoPEConfig::validate() const {
  if (dim == 0 || dim % 2 != 0) {
    throw ConfigError("rope.dim must be a positive even number, got " + std::to_string(dim));
  }
  if (!(theta_base > 1.0)) throw ConfigError("rope.theta_base must exceed 1");
}

template <class T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const double> positions,
                     const RoPEConfig& cfg) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(1) != cfg.dim) {
    throw DimensionError("apply_rope: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(cfg.dim) + " features");
  }
  const size_t n = x.dim(0), d = cfg.dim, half = d / 2;
  const size_t p = positions.size();
  if (p == 0 || n % p != 0) {
    throw DimensionError("apply_rope: " + std::to_string(p) + " positions for " +
                         std::to_string(n) + " rows");
  }
  std::vector<double> theta(half);
  for (size_t i = 0; i < half; ++i) theta[i] = cfg.theta(i);
  std::vector<T> cos_t(p * half), sin_t(p * half);
  for (size_t m = 0; m < p; ++m) {
    for (size_t i = 0; i < half; ++i) {
      const double angle = positions[m] * theta[i];
      cos_t[m * half + i] = static_cast<T>(std::cos(angle));
      sin_t[m * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  const T* in = x.data().data();
  std::vector<T> out(x.size());
  for (size_t m = 0; m < n; ++m) {
    const T* c = &cos_t[(m % p) * half];
    const T* s = &sin_t[(m % p) * half];
    const T* r = in + m * d;
    T* o = out.data() + m * d;
    for (size_t i = 0; i < half; ++i) {
      o[2 * i] = r[2 * i] * c[i] - r[2 * i + 1] * s[i];
      o[2 * i + 1] = r[2 * i + 1] * c[i] + r[2 * i] * s[i];
    }
  }
  const bool rg = needs_grad<T>({&x});
  Tensor<T> y = make_output<T>(x.shape(), std::move(out), rg);
  if (rg) {
    auto xs = x.storage();
    auto ys = y.storage();
    record_op<T>("apply_rope", {&x}, y,
                 [xs, ys, n, d, half, p, cos_t = std::move(cos_t), sin_t = std::move(sin_t)] {
                   xs->ensure_grad();
                   const T* g = ys->grad.data();
                   T* gx = xs->grad.data();
                   for (size_t m = 0; m < n; ++m) {
                     const T* c = &cos_t[(m % p) * half];
                     const T* s = &sin_t[(m % p) * half];
                     for (size_t i = 0; i < half; ++i) {
                       const T ga = g[m * d + 2 * i], gb = g[m * d + 2 * i + 1];
                       gx[m * d + 2 * i] += ga * c[i] + gb * s[i];
                       gx[m * d + 2 * i + 1] += gb * c[i] - ga * s[i];
                     }
                   }
                 });
  }
  return y;
}

template <class T>
Tensor<T> attn_scores_relu2(const Tensor<T>& q, const Tensor<T>& k,
                            const AttentionKernelSpec& spec, std::span<const uint8_t> key_valid) {
  if (spec.variant != KernelVariant::relu2_div || !spec.denom) {
    throw ConfigError("attn_scores_relu2 requires kernel.variant relu2_div with a denominator");
  }
  check_qk(q, k, "attn_scores_relu2");
  const double n = static_cast<double>(count_valid(key_valid, k.dim(0)));
  if (n == 0) throw DimensionError("attn_scores_relu2: no valid keys");
  const double s = static_cast<double>(spec.s);
  double denom = 1.0;
  switch (*spec.denom) {
    case ScoreDenom::n2:
      denom = n * n;
      break;
    case ScoreDenom::n:
      denom = n;
      break;
    case ScoreDenom::ns:
      denom = n * s;
      break;
    case ScoreDenom::s2:
      denom = s * s;
      break;
  }
  return ops::scale_const(relu2_scores(q, k, spec, key_valid), 1.0 / denom);
}

template <class T>
Tensor<T> attn_scores_scaled_relu2(const Tensor<T>& q, const Tensor<T>& k, size_t n,
                                   const AttentionKernelSpec& spec,
                                   std::span<const uint8_t> key_valid) {
  if (spec.variant != KernelVariant::scaled_relu2) {
    throw ConfigError("attn_scores_scaled_relu2 requires kernel.variant scaled_relu2");
  }
  check_qk(q, k, "attn_scores_scaled_relu2");
  if (n == 0) throw DimensionError("attn_scores_scaled_relu2: n must be positive");
  Tensor<T> r = relu2_scores(q, k, spec, key_valid);
  Tensor<T> c = ops::reduce(r, 1, ops::ReduceKind::sum);
  const double ns = static_cast<double>(n) * static_cast<double>(spec.s);
  Tensor<T> denom = ops::scale_const(ops::add_const(c, spec.eps), ns);
  return ops::mul_col(r, ops::reciprocal(denom));
}

template <class T>
Tensor<T> attn_scores_softmax(const Tensor<T>& q, const Tensor<T>& k,
                              const AttentionKernelSpec& spec, std::span<const uint8_t> key_valid) {
  if (spec.variant != KernelVariant::softmax) {
    throw ConfigError("attn_scores_softmax requires kernel.variant softmax");
  }
  check_qk(q, k, "attn_scores_softmax");
  if (count_valid(key_valid, k.dim(0)) == 0) throw DimensionError("attn_scores_softmax: no valid keys");
  return masked_softmax(scaled_logits(q, k, 1.0 / std::sqrt(double(spec.d_h))), key_valid);
}

double softmax_plus_scale(size_t n, const AttentionKernelSpec& spec) {
  return std::log(static_cast<double>(n)) / std::log(spec.base_len) /
         std::sqrt(static_cast<double>(spec.d_h));
}

template <class T>
Tensor<T> attn_scores_softmax_plus(const Tensor<T>& q, const Tensor<T>& k, size_t n,
                                   const AttentionKernelSpec& spec,
                                   std::span<const uint8_t> key_valid) {
  if (spec.variant != KernelVariant::softmax_plus) {
    throw ConfigError("attn_scores_softmax_plus requires kernel.variant softmax_plus");
  }
  check_qk(q, k, "attn_scores_softmax_plus");
  if (n == 0) throw DimensionError("attn_scores_softmax_plus: n must be positive");
  return masked_softmax(scaled_logits(q, k, softmax_plus_scale(n, spec)), key_valid);
}

template <class T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k,
                           const AttentionKernelSpec& spec, std::span<const uint8_t> key_valid) {
  const size_t n = count_valid(key_valid, k.dim(0));
  if (n == 0) throw DimensionError("attention_scores: no valid keys");
  switch (spec.variant) {
    case KernelVariant::relu2_div:
      return attn_scores_relu2(q, k, spec, key_valid);
    case KernelVariant::scaled_relu2:
      return attn_scores_scaled_relu2(q, k, n, spec, key_valid);
    case KernelVariant::softmax:
      return attn_scores_softmax(q, k, spec, key_valid);
    case KernelVariant::softmax_plus:
      return attn_scores_softmax_plus(q, k, n, spec, key_valid);
  }
  throw ConfigError("unhandled kernel variant");
}

template <class T>
Tensor<T> var_norm(const Tensor<T>& x, double eps, bool rms_mode) {
  const size_t d = x.shape().back();
  if (d < 2) throw DimensionError("var_norm: last axis needs at least 2 features");
  const bool flat = x.rank() != 2;
  Tensor<T> x2 = flat ? ops::reshape(x, {x.size() / d, d}) : x;
  Tensor<T> spread = rms_mode ? ops::reduce(ops::square(x2), 1, ops::ReduceKind::mean)
                              : ops::reduce(x2, 1, ops::ReduceKind::var);
  Tensor<T> out = ops::mul_col(x2, ops::rsqrt(ops::add_const(spread, eps)));
  return flat ? ops::reshape(out, x.shape()) : out;
}

template <class T>
Tensor<T> swish(const Tensor<T>& x) {
  const auto in = x.data();
  std::vector<T> out(x.size());
  std::vector<T> sig(x.size());
  for (size_t i = 0; i < out.size(); ++i) {
    sig[i] = T(1) / (T(1) + std::exp(-in[i]));
    out[i] = in[i] * sig[i];
  }
  const bool rg = needs_grad<T>({&x});
  Tensor<T> y = make_output<T>(x.shape(), std::move(out), rg);
  if (rg) {
    auto xs = x.storage();
    auto ys = y.storage();
    record_op<T>("swish", {&x}, y, [xs, ys, sig = std::move(sig)] {
      xs->ensure_grad();
      for (size_t i = 0; i < sig.size(); ++i) {
        // d/dx x*sig(x) = sig + x*sig*(1-sig)
        const T s = sig[i];
        xs->grad[i] += ys->grad[i] * (s + xs->data[i] * s * (T(1) - s));
      }
    });
  }
  return y;
}

#define GAU_INSTANTIATE_KERNELS(T)                                                              \
  template Tensor<T> apply_rope(const Tensor<T>&, std::span<const double>, const RoPEConfig&);  \
  template Tensor<T> attn_scores_relu2(const Tensor<T>&, const Tensor<T>&,                      \
                                       const AttentionKernelSpec&, std::span<const uint8_t>);   \
  template Tensor<T> attn_scores_scaled_relu2(const Tensor<T>&, const Tensor<T>&, size_t,       \
                                              const AttentionKernelSpec&,                       \
                                              std::span<const uint8_t>);                        \
  template Tensor<T> attn_scores_softmax(const Tensor<T>&, const Tensor<T>&,                    \
                                         const AttentionKernelSpec&, std::span<const uint8_t>); \
  template Tensor<T> attn_scores_softmax_plus(const Tensor<T>&, const Tensor<T>&, size_t,       \
                                              const AttentionKernelSpec&,                       \
                                              std::span<const uint8_t>);                        \
  template Tensor<T> attention_scores(const Tensor<T>&, const Tensor<T>&,                       \
                                      const AttentionKernelSpec&, std::span<const uint8_t>);    \
  template Tensor<T> var_norm(const Tensor<T>&, double, bool);                                  \
  template Tensor<T> swish(const Tensor<T>&);

GAU_INSTANTIATE_KERNELS(float)
GAU_INSTANTIATE_KERNELS(double)

#undef GAU_INSTANTIATE_KERNELS

}  // namespace gau
