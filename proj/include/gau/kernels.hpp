#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "gau/tensor.hpp"

namespace gau {

enum class KernelVariant { relu2_div, scaled_relu2, softmax, softmax_plus };

// Denominator for the plain ReLU^2 kernel.
enum class ScoreDenom { n2, n, ns, s2 };

std::string_view to_string(KernelVariant v);
std::string_view to_string(ScoreDenom d);
KernelVariant parse_kernel_variant(std::string_view name);
ScoreDenom parse_score_denom(std::string_view name);

// Selects the attention normalization and carries its constants.
struct AttentionKernelSpec {
  KernelVariant variant = KernelVariant::softmax_plus;
  std::optional<ScoreDenom> denom;  // set iff variant == relu2_div
  size_t s = 128;                   // query/key width
  size_t d_h = 768;                 // hidden size; logits are scaled by 1/sqrt(d_h)
  double base_len = 512.0;          // softmax_plus log base (pretraining length)
  double eps = 1e-12;               // guards c_i = 0 in scaled_relu2

  void validate() const;

  // Human-readable tag, e.g. "relu2_div/ns" or "softmax_plus".
  std::string name() const;
};

// Interleaved-pair rotary embedding over `dim` features.
struct RoPEConfig {
  size_t dim = 128;
  double theta_base = 10000.0;

  // theta_i = theta_base^(-2i/dim)
  double theta(size_t i) const;
  void validate() const;
};

// Rotates each pair (x[2i], x[2i+1]) of row m by positions[m % P] * theta_i,
// where P = positions.size() must divide the row count (packed sequences).
template <class T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const double> positions,
                     const RoPEConfig& cfg);

// Score kernels take q[n x s], k[n_k x s] and an optional 0/1 key mask of
// length n_k (empty means every key is valid). Masked keys receive zero
// weight, and `n` in every scale counts only valid keys.

// ReLU^2(q k^T / sqrt(d_h)) / D, D in {n^2, n, n*s, s^2}. Rows are not
// normalized.
template <class T>
Tensor<T> attn_scores_relu2(const Tensor<T>& q, const Tensor<T>& k,
                            const AttentionKernelSpec& spec,
                            std::span<const uint8_t> key_valid = {});

// r_ij = ReLU^2(q_i . k_j / sqrt(d_h)), c_i = sum_j r_ij,
// a_ij = r_ij / ((c_i + eps) * n * s). Rows with any positive logit sum to
// 1/(n*s).
template <class T>
Tensor<T> attn_scores_scaled_relu2(const Tensor<T>& q, const Tensor<T>& k, size_t n,
                                   const AttentionKernelSpec& spec,
                                   std::span<const uint8_t> key_valid = {});

template <class T>
Tensor<T> attn_scores_softmax(const Tensor<T>& q, const Tensor<T>& k,
                              const AttentionKernelSpec& spec,
                              std::span<const uint8_t> key_valid = {});

// row_softmax((log n / log base_len) / sqrt(d_h) * q k^T)
template <class T>
Tensor<T> attn_scores_softmax_plus(const Tensor<T>& q, const Tensor<T>& k, size_t n,
                                   const AttentionKernelSpec& spec,
                                   std::span<const uint8_t> key_valid = {});

// Dispatches on spec.variant with n = number of valid keys.
template <class T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k,
                           const AttentionKernelSpec& spec,
                           std::span<const uint8_t> key_valid = {});

// Logit multiplier used by softmax_plus at length n.
double softmax_plus_scale(size_t n, const AttentionKernelSpec& spec);

// x / sqrt(VAR(x) + eps) per last-axis row, no mean subtraction and no
// learnable parameters. rms_mode uses the mean square instead of VAR.
template <class T>
Tensor<T> var_norm(const Tensor<T>& x, double eps = 1e-6, bool rms_mode = false);

// x * sigmoid(x)
template <class T>
Tensor<T> swish(const Tensor<T>& x);

}  // namespace gau
