#include "gau/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace gau {

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           std::span<Tensor<double>> leaves, const GradCheckOptions& options) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  double loss_scale = 1.0;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn();
    loss_scale = std::max(1.0, std::abs(loss.item()));
    tape.backward(loss);
  }
  // Rounding in f(x+eps) - f(x-eps) grows with |f|, so the floor does too.
  const double floor = options.abs_floor * loss_scale;

  auto eval = [&] { return loss_fn().item(); };  // no active tape: nothing recorded

  GradCheckReport report;
  for (size_t t = 0; t < leaves.size(); ++t) {
    Tensor<double>& leaf = leaves[t];
    const std::vector<double> analytic =
        leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                        : std::vector<double>(leaf.size(), 0.0);
    const size_t n = leaf.size();
    const size_t probes =
        options.max_entries_per_tensor == 0 ? n : std::min(n, options.max_entries_per_tensor);
    auto values = leaf.mutable_data();
    for (size_t p = 0; p < probes; ++p) {
      const size_t i = probes == n ? p : (p * n) / probes;
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double up = eval();
      values[i] = saved - options.eps;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++report.entries_checked;
      if (err > report.max_rel_error || std::isnan(err)) {
        report.max_rel_error = std::isnan(err) ? INFINITY : err;
        report.tensor_index = t;
        report.entry_index = i;
        report.analytic = analytic[i];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double eps) {
  Tensor<double> leaves[] = {x};
  GradCheckOptions options;
  options.eps = eps;
  return grad_check([&] { return f(leaves[0]); }, leaves, options).max_rel_error;
}

}  // namespace gau
