#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gau/kernels.hpp"

namespace gau {

// Two GAU blocks (d_ff = 2 d_h) against one MHSA + FFN block (d_ff = 4 d_h),
// which have the same 12 d_h^2 headline parameters.
struct BenchConfig {
  std::vector<size_t> lengths = {256, 512, 1024};
  size_t repeats = 5;
  size_t warmup = 3;
  size_t d_h = 128;
  size_t s = 32;
  size_t heads = 4;
  KernelVariant gau_kernel = KernelVariant::softmax_plus;
  double dropout = 0.1;
  uint64_t seed = 0;
  // Tracked-bytes budget per run; exceeding it yields an OOM row. 0: none.
  size_t mem_limit_bytes = 0;

  void validate() const;
};

struct BenchRow {
  size_t n = 0;
  std::string model;  // "gau_x2" or "mhsa_ffn"
  uint64_t headline_params = 0;
  uint64_t exact_params = 0;
  double time_ms = 0.0;    // median forward + backward wall time
  size_t peak_bytes = 0;   // live tensor bytes at peak, parameters included
  double peak_rel_gau = 0.0;
  bool oom = false;
};

// Rows in (length, model) order; the gau_x2 row of each length comes first.
std::vector<BenchRow> run_bench(const BenchConfig& cfg);

// n,model,headline_params,exact_params,fwd_bwd_ms,peak_mem_bytes,peak_mem_rel_gau,status
void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);

}  // namespace gau
