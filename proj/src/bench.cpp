#include "gau/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <new>
#include <numeric>
#include <ostream>

#include "gau/errors.hpp"
#include "gau/gau.hpp"
#include "gau/ops.hpp"

namespace gau {

void BenchConfig::validate() const {
  if (lengths.empty()) throw ConfigError("bench.lengths must not be empty");
  for (size_t n : lengths) {
    if (n == 0) throw ConfigError("bench.lengths entries must be positive");
  }
  if (repeats == 0) throw ConfigError("bench.repeats must be positive");
  if (d_h == 0 || s == 0 || heads == 0) throw ConfigError("bench.d_h, bench.s and bench.heads must be positive");
  if (d_h % heads != 0) throw ConfigError("bench.heads must divide bench.d_h");
  if (s % 2 != 0) throw ConfigError("bench.s must be even (RoPE rotates pairs)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("bench.dropout must lie in [0, 1)");
}

namespace {

using Clock = std::chrono::steady_clock;

// Runs `step` warmup + repeats times; returns the median time of the timed
// runs and the largest tracked peak seen across all of them.
std::pair<double, size_t> measure(const BenchConfig& cfg, const std::function<void()>& step) {
  auto& tracker = MemoryTracker::instance();
  size_t peak = 0;
  std::vector<double> times;
  for (size_t i = 0; i < cfg.warmup + cfg.repeats; ++i) {
    tracker.reset_peak();
    const auto t0 = Clock::now();
    step();
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    peak = std::max(peak, tracker.peak());
    if (i >= cfg.warmup) times.push_back(ms);
  }
  std::sort(times.begin(), times.end());
  const size_t m = times.size();
  const double median = m % 2 ? times[m / 2] : 0.5 * (times[m / 2 - 1] + times[m / 2]);
  return {median, peak};
}

struct LimitScope {
  explicit LimitScope(size_t limit) : saved(MemoryTracker::instance().limit()) {
    MemoryTracker::instance().set_limit(limit);
  }
  ~LimitScope() { MemoryTracker::instance().set_limit(saved); }
  size_t saved;
};

BenchRow bench_one(const BenchConfig& cfg, size_t n, bool gau_model) {
  BenchRow row;
  row.n = n;
  row.model = gau_model ? "gau_x2" : "mhsa_ffn";
  const uint64_t d = cfg.d_h;
  if (gau_model) {
    const auto c = count_params(BlockKind::gau, d, 2 * d, cfg.s, cfg.heads);
    row.headline_params = 2 * c.headline;
    row.exact_params = 2 * c.exact;
  } else {
    const auto a = count_params(BlockKind::mhsa, d, 4 * d, cfg.s, cfg.heads);
    const auto f = count_params(BlockKind::ffn, d, 4 * d, cfg.s, cfg.heads);
    row.headline_params = a.headline + f.headline;
    row.exact_params = a.exact + f.exact;
  }
  std::vector<double> positions(n);
  std::iota(positions.begin(), positions.end(), 0.0);
  const uint64_t key = derive_key(cfg.seed, n);
  PackedBatch batch;
  batch.seq_len = n;
  batch.positions = positions;
  batch.mode = Mode::train;
  batch.seq_keys = std::span<const uint64_t>(&key, 1);

  LimitScope limit(cfg.mem_limit_bytes);
  try {
    Rng rng(derive_key(cfg.seed, 0xBE0C));
    const auto x = Tensor<float>::randn({n, cfg.d_h}, rng, 1.0);
    const auto probe = Tensor<float>::randn({n, cfg.d_h}, rng, 1.0);
    std::function<void()> step;
    BlockConfig gcfg;
    std::vector<GauParams<float>> gau_params;
    BaselineConfig bcfg;
    std::vector<BaselineParams<float>> base_params;
    if (gau_model) {
      gcfg.d_h = cfg.d_h;
      gcfg.d_ff = 2 * cfg.d_h;
      gcfg.s = cfg.s;
      gcfg.kernel.variant = cfg.gau_kernel;
      if (cfg.gau_kernel == KernelVariant::relu2_div) gcfg.kernel.denom = ScoreDenom::ns;
      gcfg.kernel.s = cfg.s;
      gcfg.kernel.d_h = cfg.d_h;
      gcfg.rope = RoPEConfig{cfg.s, 10000.0};
      gcfg.hidden_dropout = gcfg.attn_dropout = cfg.dropout;
      gcfg.validate();
      for (int l = 0; l < 2; ++l) gau_params.push_back(GauParams<float>::init(gcfg, rng, 0.02));
      step = [&] {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        PackedBatch b = batch;
        b.layer_salt = 1;
        Tensor<float> h = gau_forward(x, gau_params[0], gcfg, b).out;
        b.layer_salt = 2;
        h = gau_forward(h, gau_params[1], gcfg, b).out;
        tape.backward(ops::sum_all(ops::hadamard(h, probe)));
      };
    } else {
      bcfg.d_h = cfg.d_h;
      bcfg.d_ff = 4 * cfg.d_h;
      bcfg.heads = cfg.heads;
      bcfg.kernel = AttentionKernelSpec{KernelVariant::softmax, std::nullopt, cfg.d_h / cfg.heads,
                                        cfg.d_h / cfg.heads, 512.0, 1e-12};
      bcfg.hidden_dropout = bcfg.attn_dropout = cfg.dropout;
      bcfg.validate();
      base_params.push_back(BaselineParams<float>::init(bcfg, rng, 0.02));
      step = [&] {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        Tensor<float> h = mhsa_ffn_forward(x, base_params[0], bcfg, batch).out;
        tape.backward(ops::sum_all(ops::hadamard(h, probe)));
      };
    }
    const auto [ms, peak] = measure(cfg, step);
    row.time_ms = ms;
    row.peak_bytes = peak;
  } catch (const OutOfMemoryError&) {
    row.oom = true;
  } catch (const std::bad_alloc&) {
    row.oom = true;
  }
  return row;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  cfg.validate();
  std::vector<BenchRow> rows;
  for (size_t n : cfg.lengths) {
    BenchRow g = bench_one(cfg, n, true);
    BenchRow b = bench_one(cfg, n, false);
    if (!g.oom) {
      g.peak_rel_gau = 1.0;
      if (!b.oom) b.peak_rel_gau = double(b.peak_bytes) / double(g.peak_bytes);
    }
    rows.push_back(g);
    rows.push_back(b);
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "n,model,headline_params,exact_params,fwd_bwd_ms,peak_mem_bytes,peak_mem_rel_gau,status\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.n << ',' << r.model << ',' << r.headline_params << ',' << r.exact_params << ',';
    if (r.oom) {
      out << ",,,OOM\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%.3f", r.time_ms);
    out << buf << ',' << r.peak_bytes << ',';
    if (r.peak_rel_gau > 0.0) {
      std::snprintf(buf, sizeof buf, "%.4f", r.peak_rel_gau);
      out << buf;
    }
    out << ",ok\n";
  }
}

}  // namespace gau
