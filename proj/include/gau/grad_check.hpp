#pragma once

#include <functional>
#include <span>
#include <string>

#include "gau/tensor.hpp"

namespace gau {

struct GradCheckReport {
  double max_rel_error = 0.0;
  size_t tensor_index = 0;  // leaf holding the worst entry
  size_t entry_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  size_t entries_checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Entries whose analytic and numeric gradients are both below
  // abs_floor * max(1, |loss|) are compared in absolute terms.
  double abs_floor = 1e-6;
  // Upper bound on probed entries per leaf; 0 probes every entry. Probed
  // entries are spread evenly over the tensor.
  size_t max_entries_per_tensor = 0;
};

// Compares reverse-mode gradients of `loss_fn` with respect to `leaves`
// against central differences (f(x+eps) - f(x-eps)) / 2eps. `loss_fn` must
// rebuild the graph from the current leaf values on every call.
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           std::span<Tensor<double>> leaves, const GradCheckOptions& options = {});

// Single-input convenience form; returns the max relative error.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double eps = 1e-5);

}  // namespace gau
