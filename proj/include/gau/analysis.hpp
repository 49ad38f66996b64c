#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "gau/gau.hpp"
#include "gau/model.hpp"
#include "gau/tensor.hpp"

namespace gau {

inline constexpr double kDefaultRankTol = 1e-10;
inline constexpr double kDefaultSparsityTol = 1e-8;

// All singular values of a finite rank-2 tensor in descending order,
// computed in float64 from a Householder bidiagonalization and bisection on
// its Golub-Kahan tridiagonal form. Absolute accuracy is about
// eps * sigma_max, so singular values far below sqrt(eps) * sigma_max are
// still resolved.
template <class T>
std::vector<double> singular_values(const Tensor<T>& m);

// Number of singular values above rel_tol * sigma_max (0 for a zero matrix).
template <class T>
size_t numerical_rank(const Tensor<T>& m, double rel_tol = kDefaultRankTol);

// Fraction of entries with |value| <= abs_tol.
template <class T>
double sparsity(const Tensor<T>& m, double abs_tol = kDefaultSparsityTol);

// Shannon entropy (nats) of each row after renormalizing it to sum 1; rows
// summing to 0 have entropy 0, and 0 log 0 = 0. Negative entries throw.
template <class T>
std::vector<double> entropy_rows(const Tensor<T>& a);

struct AttnStats {
  std::string kernel;
  size_t n = 0;
  size_t s = 0;
  uint64_t seed = 0;
  size_t rank = 0;
  double rank_ratio = 0.0;
  double sparsity = 0.0;
  // NaN for matrices with negative entries (the raw qk scores).
  double entropy_mean = 0.0;
  double entropy_min = 0.0;
  double entropy_max = 0.0;
  double entropy_uniform_ref = 0.0;  // ln n
};

// Score matrices analysed by the report: "qk" (raw q k^T), "softmax",
// "softmax_plus", "relu2" (ReLU^2 / (n s)) and "scaled_relu2". Logits are
// scaled by 1/sqrt(d_scale) as in the attention kernels.
const std::vector<std::string>& analysis_kernels();
Tensor<double> analysis_scores(const std::string& kernel, const Tensor<double>& q,
                               const Tensor<double>& k, size_t d_scale, double base_len);

AttnStats attn_stats(const std::string& kernel, size_t s, uint64_t seed, const Tensor<double>& a,
                     double rank_tol = kDefaultRankTol,
                     double sparsity_tol = kDefaultSparsityTol);

struct AttnReportConfig {
  std::vector<std::string> kernels = {"qk", "softmax", "relu2"};
  std::vector<size_t> lengths = {512};
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
  size_t s = 128;
  size_t d_scale = 0;  // logit scale 1/sqrt(d_scale); 0 means s
  double base_len = 512.0;
  double rank_tol = kDefaultRankTol;
  double sparsity_tol = kDefaultSparsityTol;
  std::string source = "random-init";  // provenance label for the report header

  void validate() const;
};

// Produces q, k (n x s each) for one (length, seed) cell.
using QkSource = std::function<QueryKey<double>(size_t n, uint64_t seed)>;

// i.i.d. standard normal q and k, shared by every kernel of a cell.
QueryKey<double> random_qk(size_t n, size_t s, uint64_t seed);

// q, k of GAU layer `layer` of a trained model on a window of `stream`
// whose start depends on (n, seed).
QkSource trained_qk_source(const ModelParams<float>& params, const ModelConfig& cfg,
                           std::vector<int32_t> stream, size_t layer);

// One row per (kernel, length, seed), in that nesting order.
std::vector<AttnStats> attn_report(const AttnReportConfig& cfg, const QkSource& source);

// A '#' comment line with tolerances and provenance, then the CSV header
// kernel,n,s,seed,rank,rank_ratio,sparsity,entropy_mean,entropy_min,entropy_max,entropy_uniform_ref
void write_attn_csv(std::ostream& out, const AttnReportConfig& cfg,
                    const std::vector<AttnStats>& rows);

}  // namespace gau
