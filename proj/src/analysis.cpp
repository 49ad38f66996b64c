#include "gau/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>

#include "gau/errors.hpp"
#include "gau/kernels.hpp"
#include "gau/ops.hpp"

namespace gau {

namespace {

struct Dense {
  size_t rows = 0, cols = 0;
  std::vector<double> v;  // row-major

  double& operator()(size_t i, size_t j) { return v[i * cols + j]; }
};

template <class T>
Dense to_dense(const Tensor<T>& m, const char* op) {
  if (m.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(m.shape()));
  }
  const size_t r = m.dim(0), c = m.dim(1);
  const auto d = m.data();
  for (size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(static_cast<double>(d[i]))) {
      throw NumericalError(std::string(op) + ": non-finite entry at (" + std::to_string(i / c) +
                           ", " + std::to_string(i % c) + ")");
    }
  }
  // Work on the tall orientation; singular values are unchanged.
  Dense out;
  if (r >= c) {
    out.rows = r;
    out.cols = c;
    out.v.assign(d.begin(), d.end());
  } else {
    out.rows = c;
    out.cols = r;
    out.v.resize(d.size());
    for (size_t i = 0; i < r; ++i) {
      for (size_t j = 0; j < c; ++j) out.v[j * r + i] = static_cast<double>(d[i * c + j]);
    }
  }
  return out;
}

// Reduces a (rows >= cols) to upper bidiagonal form; returns the diagonal
// and superdiagonal.
void bidiagonalize(Dense& a, std::vector<double>& diag, std::vector<double>& super) {
  const size_t m = a.rows, n = a.cols;
  diag.assign(n, 0.0);
  super.assign(n > 0 ? n - 1 : 0, 0.0);
  std::vector<double> h(std::max(m, n)), w(n);
  for (size_t k = 0; k < n; ++k) {
    // Left reflector zeroes a[k+1:, k].
    double norm = 0.0;
    for (size_t i = k; i < m; ++i) norm = std::hypot(norm, a(i, k));
    if (norm > 0.0) {
      const double alpha = a(k, k) > 0 ? -norm : norm;
      for (size_t i = k; i < m; ++i) h[i] = a(i, k);
      h[k] -= alpha;
      double hh = 0.0;
      for (size_t i = k; i < m; ++i) hh += h[i] * h[i];
      const double tau = 2.0 / hh;
      std::fill(w.begin() + static_cast<long>(k), w.end(), 0.0);
      for (size_t i = k; i < m; ++i) {
        const double hi = h[i];
        const double* row = &a.v[i * n];
        for (size_t j = k + 1; j < n; ++j) w[j] += hi * row[j];
      }
      for (size_t i = k; i < m; ++i) {
        const double f = tau * h[i];
        double* row = &a.v[i * n];
        for (size_t j = k + 1; j < n; ++j) row[j] -= f * w[j];
      }
      diag[k] = alpha;
    }
    if (k + 1 >= n) break;
    // Right reflector zeroes a[k, k+2:].
    norm = 0.0;
    for (size_t j = k + 1; j < n; ++j) norm = std::hypot(norm, a(k, j));
    if (norm > 0.0) {
      const double beta = a(k, k + 1) > 0 ? -norm : norm;
      for (size_t j = k + 1; j < n; ++j) h[j] = a(k, j);
      h[k + 1] -= beta;
      double hh = 0.0;
      for (size_t j = k + 1; j < n; ++j) hh += h[j] * h[j];
      const double tau = 2.0 / hh;
      for (size_t i = k + 1; i < m; ++i) {
        double* row = &a.v[i * n];
        double dot = 0.0;
        for (size_t j = k + 1; j < n; ++j) dot += row[j] * h[j];
        const double f = tau * dot;
        for (size_t j = k + 1; j < n; ++j) row[j] -= f * h[j];
      }
      super[k] = beta;
    }
  }
}

// Symmetric tridiagonal with zero diagonal and off-diagonal
// (d0, e0, d1, e1, ..., d_{n-1}); its eigenvalues are +-sigma_i.
class GolubKahan {
 public:
  GolubKahan(const std::vector<double>& diag, const std::vector<double>& super) {
    const size_t n = diag.size();
    off2_.reserve(2 * n);
    double bound = 0.0, prev = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double d = std::abs(diag[i]);
      const double e = i + 1 < n ? std::abs(super[i]) : 0.0;
      off2_.push_back(d * d);
      if (i + 1 < n) off2_.push_back(e * e);
      bound = std::max({bound, prev + d, d + e});
      prev = e;
    }
    bound_ = bound;
    double max2 = 0.0;
    for (double b : off2_) max2 = std::max(max2, b);
    pivmin_ = std::numeric_limits<double>::min() * std::max(1.0, max2);
    size_ = 2 * n;
  }

  double bound() const { return bound_; }

  // Number of eigenvalues strictly below x (Sturm count of the LDL^T pivots).
  size_t count_below(double x) const {
    size_t count = 0;
    double q = -x;
    if (std::abs(q) < pivmin_) q = -pivmin_;
    if (q < 0) ++count;
    for (size_t i = 1; i < size_; ++i) {
      q = -x - off2_[i - 1] / q;
      if (std::abs(q) < pivmin_) q = -pivmin_;
      if (q < 0) ++count;
    }
    return count;
  }

  // Singular values at or above x > 0.
  size_t count_at_least(double x) const { return size_ - count_below(x); }

  // k-th largest singular value (k = 0 is the largest).
  double singular_value(size_t k) const {
    double lo = 0.0, hi = bound_;
    // Invariant: at least k+1 values are >= lo and at most k are >= hi.
    // The reduction is only accurate to about eps * bound, so stop there.
    const double width = 4 * std::numeric_limits<double>::epsilon() * bound_;
    while (hi - lo > width) {
      const double mid = 0.5 * (lo + hi);
      if (count_at_least(mid) > k) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    return 0.5 * (lo + hi);
  }

 private:
  std::vector<double> off2_;
  double bound_ = 0.0;
  double pivmin_ = 0.0;
  size_t size_ = 0;
};

GolubKahan reduce(Dense a) {
  std::vector<double> diag, super;
  bidiagonalize(a, diag, super);
  return GolubKahan(diag, super);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

template <class T>
std::vector<double> singular_values(const Tensor<T>& m) {
  const GolubKahan gk = reduce(to_dense(m, "singular_values"));
  const size_t n = std::min(m.dim(0), m.dim(1));
  std::vector<double> out(n);
  for (size_t k = 0; k < n; ++k) out[k] = gk.singular_value(k);
  return out;
}

template <class T>
size_t numerical_rank(const Tensor<T>& m, double rel_tol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
    throw ConfigError("numerical_rank: rel_tol must lie in (0, 1), got " + std::to_string(rel_tol));
  }
  const GolubKahan gk = reduce(to_dense(m, "numerical_rank"));
  if (gk.bound() == 0.0) return 0;
  const double sigma_max = gk.singular_value(0);
  return gk.count_at_least(rel_tol * sigma_max);
}

template <class T>
double sparsity(const Tensor<T>& m, double abs_tol) {
  if (!(abs_tol >= 0.0)) throw ConfigError("sparsity: abs_tol must be >= 0");
  const auto d = m.data();
  size_t small = 0;
  for (T v : d) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericalError("sparsity: non-finite entry");
    if (std::abs(static_cast<double>(v)) <= abs_tol) ++small;
  }
  return static_cast<double>(small) / static_cast<double>(d.size());
}

template <class T>
std::vector<double> entropy_rows(const Tensor<T>& a) {
  if (a.rank() != 2) {
    throw DimensionError("entropy_rows: expected a matrix, got " + shape_str(a.shape()));
  }
  const size_t rows = a.dim(0), cols = a.dim(1);
  const auto d = a.data();
  std::vector<double> h(rows, 0.0);
  for (size_t i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (size_t j = 0; j < cols; ++j) {
      const double v = static_cast<double>(d[i * cols + j]);
      if (!std::isfinite(v)) throw NumericalError("entropy_rows: non-finite entry");
      if (v < 0.0) {
        throw NumericalError("entropy_rows: negative entry " + fmt(v) + " at (" +
                             std::to_string(i) + ", " + std::to_string(j) + ")");
      }
      sum += v;
    }
    if (sum <= 0.0) continue;
    double acc = 0.0;
    for (size_t j = 0; j < cols; ++j) {
      const double p = static_cast<double>(d[i * cols + j]) / sum;
      if (p > 0.0) acc -= p * std::log(p);
    }
    h[i] = acc;
  }
  return h;
}

const std::vector<std::string>& analysis_kernels() {
  static const std::vector<std::string> names = {"qk", "softmax", "softmax_plus", "relu2",
                                                 "scaled_relu2"};
  return names;
}

Tensor<double> analysis_scores(const std::string& kernel, const Tensor<double>& q,
                               const Tensor<double>& k, size_t d_scale, double base_len) {
  if (kernel == "qk") return ops::matmul_nt(q, k);
  AttentionKernelSpec spec;
  spec.s = q.rank() == 2 ? q.dim(1) : 0;
  spec.d_h = d_scale;
  spec.base_len = base_len;
  if (kernel == "softmax") {
    spec.variant = KernelVariant::softmax;
  } else if (kernel == "softmax_plus") {
    spec.variant = KernelVariant::softmax_plus;
  } else if (kernel == "relu2") {
    spec.variant = KernelVariant::relu2_div;
    spec.denom = ScoreDenom::ns;
  } else if (kernel == "scaled_relu2") {
    spec.variant = KernelVariant::scaled_relu2;
  } else {
    std::string known;
    for (const auto& n : analysis_kernels()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown analysis kernel '" + kernel + "' (expected one of " + known + ")");
  }
  return attention_scores(q, k, spec);
}

AttnStats attn_stats(const std::string& kernel, size_t s, uint64_t seed, const Tensor<double>& a,
                     double rank_tol, double sparsity_tol) {
  AttnStats st;
  st.kernel = kernel;
  st.n = a.dim(0);
  st.s = s;
  st.seed = seed;
  st.rank = numerical_rank(a, rank_tol);
  st.rank_ratio = static_cast<double>(st.rank) / static_cast<double>(st.n);
  st.sparsity = sparsity(a, sparsity_tol);
  st.entropy_uniform_ref = std::log(static_cast<double>(a.dim(1)));
  const auto d = a.data();
  if (std::any_of(d.begin(), d.end(), [](double v) { return v < 0.0; })) {
    st.entropy_mean = st.entropy_min = st.entropy_max = std::numeric_limits<double>::quiet_NaN();
  } else {
    const auto h = entropy_rows(a);
    st.entropy_mean = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
    st.entropy_min = *std::min_element(h.begin(), h.end());
    st.entropy_max = *std::max_element(h.begin(), h.end());
  }
  return st;
}

void AttnReportConfig::validate() const {
  if (kernels.empty()) throw ConfigError("analysis.kernels must not be empty");
  for (const auto& k : kernels) {
    const auto& known = analysis_kernels();
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError("analysis.kernels: unknown kernel '" + k + "'");
    }
  }
  if (lengths.empty()) throw ConfigError("analysis.lengths must not be empty");
  for (size_t n : lengths) {
    if (n == 0) throw ConfigError("analysis.lengths entries must be positive");
  }
  if (seeds.empty()) throw ConfigError("analysis.seeds must not be empty");
  if (s == 0) throw ConfigError("analysis.s must be positive");
  if (!(base_len > 1.0)) throw ConfigError("analysis.base_len must exceed 1");
  if (!(rank_tol > 0.0 && rank_tol < 1.0)) throw ConfigError("analysis.rank_tol must lie in (0, 1)");
  if (!(sparsity_tol >= 0.0)) throw ConfigError("analysis.sparsity_tol must be >= 0");
}

QueryKey<double> random_qk(size_t n, size_t s, uint64_t seed) {
  Rng rng(derive_key(derive_key(seed, 0xA7A1), n));
  QueryKey<double> qk{Tensor<double>::randn({n, s}, rng, 1.0),
                      Tensor<double>::randn({n, s}, rng, 1.0)};
  return qk;
}

QkSource trained_qk_source(const ModelParams<float>& params, const ModelConfig& cfg,
                           std::vector<int32_t> stream, size_t layer) {
  if (layer >= cfg.num_layers) {
    throw ConfigError("analysis.layer " + std::to_string(layer) + " out of range for " +
                      std::to_string(cfg.num_layers) + " layers");
  }
  return [&params, cfg, stream = std::move(stream), layer](size_t n, uint64_t seed) {
    if (n > cfg.max_len) {
      throw DimensionError("analysis length " + std::to_string(n) + " exceeds model.max_len " +
                           std::to_string(cfg.max_len));
    }
    if (stream.size() < n) {
      throw DimensionError("analysis length " + std::to_string(n) + " exceeds the " +
                           std::to_string(stream.size()) + "-token text");
    }
    Rng rng(derive_key(derive_key(seed, 0xA7A2), n));
    const size_t start[] = {static_cast<size_t>(rng.below(stream.size() - n + 1))};
    MaskingConfig none;
    none.mask_prob = 0.0;
    const Batch batch = make_mlm_windows(stream, start, n, none, cfg.vocab_size, seed);
    const auto states = layer_states(params, cfg, batch);
    std::vector<double> positions(n);
    std::iota(positions.begin(), positions.end(), 0.0);
    const auto qk = gau_qk(states[layer], params.layers[layer], cfg.block, positions);
    auto widen = [](const Tensor<float>& t) {
      const auto d = t.data();
      return Tensor<double>::from(t.shape(), std::vector<double>(d.begin(), d.end()));
    };
    return QueryKey<double>{widen(qk.q), widen(qk.k)};
  };
}

std::vector<AttnStats> attn_report(const AttnReportConfig& cfg, const QkSource& source) {
  cfg.validate();
  std::vector<AttnStats> rows;
  for (const auto& kernel : cfg.kernels) {
    for (size_t n : cfg.lengths) {
      for (uint64_t seed : cfg.seeds) {
        const auto qk = source(n, seed);
        const size_t s = qk.q.dim(1);
        const size_t d_scale = cfg.d_scale == 0 ? s : cfg.d_scale;
        const auto a = analysis_scores(kernel, qk.q, qk.k, d_scale, cfg.base_len);
        rows.push_back(attn_stats(kernel, s, seed, a, cfg.rank_tol, cfg.sparsity_tol));
      }
    }
  }
  return rows;
}

void write_attn_csv(std::ostream& out, const AttnReportConfig& cfg,
                    const std::vector<AttnStats>& rows) {
  out << "# source=" << cfg.source << " rank_rel_tol=" << fmt(cfg.rank_tol)
      << " sparsity_abs_tol=" << fmt(cfg.sparsity_tol) << " entropy=nats\n";
  out << "kernel,n,s,seed,rank,rank_ratio,sparsity,entropy_mean,entropy_min,entropy_max,"
         "entropy_uniform_ref\n";
  for (const auto& r : rows) {
    out << r.kernel << ',' << r.n << ',' << r.s << ',' << r.seed << ',' << r.rank << ','
        << fmt(r.rank_ratio) << ',' << fmt(r.sparsity) << ',' << fmt(r.entropy_mean) << ','
        << fmt(r.entropy_min) << ',' << fmt(r.entropy_max) << ',' << fmt(r.entropy_uniform_ref)
        << '\n';
  }
}

template std::vector<double> singular_values(const Tensor<float>&);
template std::vector<double> singular_values(const Tensor<double>&);
template size_t numerical_rank(const Tensor<float>&, double);
template size_t numerical_rank(const Tensor<double>&, double);
template double sparsity(const Tensor<float>&, double);
template double sparsity(const Tensor<double>&, double);
template std::vector<double> entropy_rows(const Tensor<float>&);
template std::vector<double> entropy_rows(const Tensor<double>&);

}  // namespace gau
