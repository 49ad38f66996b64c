// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria. argv[1] (optional) is a scratch directory for
// the training runs; it defaults to ./acceptance_runs.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "gau/analysis.hpp"
#include "gau/checkpoint.hpp"
#include "gau/gau.hpp"
#include "gau/grad_check.hpp"
#include "gau/kernels.hpp"
#include "gau/ops.hpp"
#include "gau/run_config.hpp"
#include "gau/text.hpp"
#include "gau/train.hpp"

namespace fs = std::filesystem;
using namespace gau;
using TD = Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_work;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

TD randn(Shape shape, Rng& rng, double stddev = 1.0) { return TD::randn(std::move(shape), rng, stddev); }

TD weighted_sum(const TD& y, const TD& w) { return ops::sum_all(ops::hadamard(y, w)); }

std::vector<double> iota(size_t n) {
  std::vector<double> p(n);
  std::iota(p.begin(), p.end(), 0.0);
  return p;
}

// Runs the CLI, throwing with its stderr on a nonzero exit.
void cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  if (code != 0) {
    std::string joined;
    for (const auto& a : args) joined += a + " ";
    throw std::runtime_error("gau_cli " + joined + "exited " + std::to_string(code) + ": " + err.str());
  }
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("missing " + path.string());
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(f, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

size_t column(const std::vector<std::string>& header, const std::string& name) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error("no column " + name);
  return size_t(it - header.begin());
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void write_json(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

// ---------------------------------------------------------------- gradients

struct GradCase {
  std::string name;
  std::function<double(uint64_t seed)> run;  // max relative error
};

double check(const std::function<TD()>& loss, std::vector<TD>& leaves) {
  return grad_check(loss, leaves).max_rel_error;
}

double op_case(uint64_t seed, size_t which) {
  Rng rng(seed);
  std::vector<TD> x = {randn({3, 4}, rng), randn({3, 4}, rng), randn({1, 4}, rng), randn({3, 1}, rng),
                       randn({4, 5}, rng)};
  auto positive = [](const TD& t) { return ops::add_const(ops::square(t), 0.5); };
  const uint64_t keys[] = {seed * 3 + 1, seed * 3 + 2, seed * 3 + 3};
  const int32_t ids[] = {0, 2, 1, 2};
  const int32_t targets[] = {1, kIgnoreIndex, 3};
  const std::vector<std::function<TD()>> ops_list = {
      [&] { return ops::matmul(x[0], x[4]); },
      [&] { return ops::matmul_nt(x[0], x[1]); },
      [&] { return ops::transpose(x[0]); },
      [&] { return ops::add(x[0], x[1]); },
      [&] { return ops::sub(x[0], x[2]); },
      [&] { return ops::hadamard(x[0], x[1]); },
      [&] { return ops::hadamard(x[0], x[2]); },
      [&] { return ops::add_col(x[0], x[3]); },
      [&] { return ops::sub_col(x[0], x[3]); },
      [&] { return ops::mul_col(x[0], x[3]); },
      [&] { return ops::scale_const(x[0], -1.7); },
      [&] { return ops::add_const(x[0], 0.3); },
      [&] { return ops::relu(x[0]); },
      [&] { return ops::square(x[0]); },
      [&] { return ops::sigmoid(x[0]); },
      [&] { return ops::log(positive(x[0])); },
      [&] { return ops::exp(x[0]); },
      [&] { return ops::rsqrt(positive(x[0])); },
      [&] { return ops::reciprocal(positive(x[0])); },
      [&] { return ops::gelu(x[0]); },
      [&] { return ops::reduce(x[0], 0, ops::ReduceKind::sum); },
      [&] { return ops::reduce(x[0], 1, ops::ReduceKind::mean); },
      [&] { return ops::reduce(x[0], 1, ops::ReduceKind::var); },
      [&] { return ops::reduce(x[0], 0, ops::ReduceKind::var); },
      [&] { return ops::row_softmax(x[0]); },
      [&] { return ops::dropout_keyed(x[0], 0.3, Mode::train, keys[0]); },
      [&] { return ops::dropout_rows(x[0], 0.4, Mode::train, std::span<const uint64_t>(keys, 3)); },
      [&] {
        Rng r(seed);
        return ops::dropout(x[0], 0.25, Mode::train, r);
      },
      [&] { return ops::embedding_lookup(x[0], ids); },
      [&] { return ops::softmax_cross_entropy(x[0], targets, kIgnoreIndex); },
      [&] { return ops::slice_rows(x[0], 1, 2); },
      [&] {
        const TD parts[] = {x[0], x[2]};
        return ops::concat_rows<double>(parts);
      },
      [&] {
        const TD parts[] = {x[0], x[3]};
        return ops::concat_cols<double>(parts);
      },
      [&] { return ops::reshape(x[0], Shape{2, 6}); },
  };
  if (which >= ops_list.size()) return -1.0;
  const TD probe = ops_list[which]();
  Rng wr(seed + 100);
  const TD w = randn(probe.shape(), wr);
  return check([&] { return weighted_sum(ops_list[which](), w); }, x);
}

AttentionKernelSpec spec_for(KernelVariant v, std::optional<ScoreDenom> d, size_t s, size_t d_h) {
  AttentionKernelSpec spec;
  spec.variant = v;
  spec.denom = d;
  spec.s = s;
  spec.d_h = d_h;
  spec.base_len = 4;
  return spec;
}

double kernel_case(uint64_t seed, const AttentionKernelSpec& spec, bool masked) {
  Rng rng(seed);
  std::vector<TD> x = {randn({5, 4}, rng), randn({6, 4}, rng)};
  const TD w = randn({5, 6}, rng);
  const uint8_t valid[] = {1, 1, 0, 1, 1, 0};
  std::span<const uint8_t> kv = masked ? std::span<const uint8_t>(valid, 6) : std::span<const uint8_t>();
  return check([&] { return weighted_sum(attention_scores(x[0], x[1], spec, kv), w); }, x);
}

BlockConfig block_cfg(KernelVariant v) {
  BlockConfig cfg;
  cfg.d_h = 8;
  cfg.d_ff = 16;
  cfg.s = 4;
  cfg.kernel = spec_for(v, v == KernelVariant::relu2_div ? std::optional(ScoreDenom::ns) : std::nullopt,
                        4, 8);
  cfg.kernel.base_len = 3;
  cfg.rope = RoPEConfig{4, 10000.0};
  cfg.hidden_dropout = 0.1;
  cfg.attn_dropout = 0.1;
  return cfg;
}

double gau_case(uint64_t seed, KernelVariant v) {
  Rng rng(seed);
  const BlockConfig cfg = block_cfg(v);
  auto p = GauParams<double>::init(cfg, rng, 0.5);
  const auto pos = iota(4);
  const uint64_t keys[] = {seed * 11, seed * 11 + 1};
  const uint8_t valid[] = {1, 1, 1, 1, 1, 1, 1, 0};
  PackedBatch batch;
  batch.num_seqs = 2;
  batch.seq_len = 4;
  batch.positions = pos;
  batch.key_valid = valid;
  batch.mode = Mode::train;
  batch.seq_keys = keys;
  std::vector<TD> leaves = {randn({8, 8}, rng)};
  const TD w = randn({8, 8}, rng);
  for (auto& [name, t] : p.named("")) leaves.push_back(*t);  // handles share storage with p
  return check([&] { return weighted_sum(gau_forward(leaves[0], p, cfg, batch).out, w); }, leaves);
}

double baseline_case(uint64_t seed) {
  Rng rng(seed);
  BaselineConfig cfg;
  cfg.d_h = 8;
  cfg.d_ff = 32;
  cfg.heads = 2;
  cfg.kernel = spec_for(KernelVariant::softmax, std::nullopt, 4, 4);
  cfg.hidden_dropout = 0.1;
  cfg.attn_dropout = 0.1;
  auto p = BaselineParams<double>::init(cfg, rng, 0.5);
  const auto pos = iota(4);
  const uint64_t key = seed * 13;
  PackedBatch batch;
  batch.seq_len = 4;
  batch.positions = pos;
  batch.mode = Mode::train;
  batch.seq_keys = std::span<const uint64_t>(&key, 1);
  std::vector<TD> leaves = {randn({4, 8}, rng)};
  const TD w = randn({4, 8}, rng);
  for (auto& [name, t] : p.named("")) leaves.push_back(*t);
  return check([&] { return weighted_sum(mhsa_ffn_forward(leaves[0], p, cfg, batch).out, w); }, leaves);
}

double model_case(uint64_t seed, bool tied) {
  ModelConfig mc;
  mc.num_layers = 2;
  mc.vocab_size = 12;
  mc.max_len = 16;
  mc.tie_embeddings = tied;
  mc.init_std = 0.5;
  mc.block = block_cfg(KernelVariant::softmax_plus);
  mc.block.kernel.base_len = 6;
  auto params = ModelParams<double>::init(mc, seed);
  std::vector<int32_t> stream;
  Rng rng(seed);
  for (int i = 0; i < 40; ++i) stream.push_back(kNumReserved + int32_t(rng.below(7)));
  const size_t starts[] = {0, 9};
  const Batch b = make_mlm_windows(stream, starts, 6, MaskingConfig{0.5, 0.8, 0.1}, 12, seed);
  std::vector<TD> leaves;
  for (auto& [name, t] : params.named()) leaves.push_back(*t);
  return check([&] { return model_forward(params, mc, b, ForwardOptions{Mode::train, false, 0.0}).loss; },
               leaves);
}

Outcome gradients() {
  const auto t0 = Clock::now();
  std::vector<GradCase> cases;
  for (size_t i = 0; op_case(1, i) >= 0.0; ++i) {
    cases.push_back({"op#" + std::to_string(i), [i](uint64_t s) { return op_case(s, i); }});
  }
  const size_t num_ops = cases.size();
  for (auto d : {ScoreDenom::n2, ScoreDenom::n, ScoreDenom::ns, ScoreDenom::s2}) {
    for (bool masked : {false, true}) {
      const auto spec = spec_for(KernelVariant::relu2_div, d, 4, 6);
      cases.push_back({spec.name() + (masked ? "+mask" : ""),
                       [spec, masked](uint64_t s) { return kernel_case(s, spec, masked); }});
    }
  }
  for (auto v : {KernelVariant::scaled_relu2, KernelVariant::softmax, KernelVariant::softmax_plus}) {
    for (bool masked : {false, true}) {
      const auto spec = spec_for(v, std::nullopt, 4, 6);
      cases.push_back({spec.name() + (masked ? "+mask" : ""),
                       [spec, masked](uint64_t s) { return kernel_case(s, spec, masked); }});
    }
  }
  cases.push_back({"rope", [](uint64_t s) {
                     Rng rng(s);
                     std::vector<TD> x = {randn({4, 8}, rng)};
                     const TD w = randn({4, 8}, rng);
                     const double pos[] = {0, 1, 5, 17};
                     return check([&] { return weighted_sum(apply_rope(x[0], pos, RoPEConfig{8, 100.0}), w); },
                                  x);
                   }});
  for (bool rms : {false, true}) {
    cases.push_back({rms ? "rms_norm" : "var_norm", [rms](uint64_t s) {
                       Rng rng(s);
                       std::vector<TD> x = {randn({3, 6}, rng)};
                       const TD w = randn({3, 6}, rng);
                       return check([&] { return weighted_sum(var_norm(x[0], 1e-6, rms), w); }, x);
                     }});
  }
  cases.push_back({"swish", [](uint64_t s) {
                     Rng rng(s);
                     std::vector<TD> x = {randn({3, 6}, rng)};
                     const TD w = randn({3, 6}, rng);
                     return check([&] { return weighted_sum(swish(x[0]), w); }, x);
                   }});
  for (auto v : {KernelVariant::relu2_div, KernelVariant::scaled_relu2, KernelVariant::softmax,
                 KernelVariant::softmax_plus}) {
    cases.push_back({"gau_block/" + std::string(to_string(v)), [v](uint64_t s) { return gau_case(s, v); }});
  }
  cases.push_back({"mhsa_ffn_block", [](uint64_t s) { return baseline_case(s); }});
  for (bool tied : {true, false}) {
    cases.push_back({tied ? "model_2layer_tied" : "model_2layer_untied",
                     [tied](uint64_t s) { return model_case(s, tied); }});
  }

  double worst = 0.0;
  std::string worst_name;
  size_t failures = 0;
  for (const auto& c : cases) {
    for (uint64_t seed : {1u, 2u, 3u}) {
      const double err = c.run(seed);
      if (!(err < 1e-4)) {
        ++failures;
        std::cerr << "  gradient mismatch: " << c.name << " seed " << seed << " rel err " << err << "\n";
      }
      if (!(err <= worst)) {
        worst = err;
        worst_name = c.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures == 0 && secs < 60.0;
  o.detail = std::to_string(cases.size()) + " cases (" + std::to_string(num_ops) +
             " ops) x 3 seeds, worst rel err " + fmt("%.2e", worst) + " (" + worst_name + "), " +
             fmt("%.1f s", secs);
  return o;
}

// ---------------------------------------------------------------- kernels

Outcome softmax_plus_identity() {
  double worst = 0.0;
  for (uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    const TD q = randn({512, 32}, rng), k = randn({512, 32}, rng);
    AttentionKernelSpec spec = spec_for(KernelVariant::softmax_plus, std::nullopt, 32, 32);
    spec.base_len = 512;
    AttentionKernelSpec plain = spec;
    plain.variant = KernelVariant::softmax;
    const TD a = attn_scores_softmax_plus(q, k, 512, spec);
    const TD b = attn_scores_softmax(q, k, plain);
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  }
  Rng rng(9);
  const TD q1 = randn({1, 8}, rng), k1 = randn({1, 8}, rng);
  AttentionKernelSpec spec = spec_for(KernelVariant::softmax_plus, std::nullopt, 8, 8);
  spec.base_len = 512;
  const TD one = attn_scores_softmax_plus(q1, k1, 1, spec);
  const bool one_hot = one.shape() == Shape{1, 1} && one.at(0) == 1.0;
  return {worst <= 1e-12 && one_hot,
          "max |softmax_plus - softmax| at n=512: " + fmt("%.2e", worst) + "; n=1 gives " +
              (one_hot ? "[[1]]" : "something else")};
}

double dot_row(const TD& a, size_t i, const TD& b, size_t j) {
  const size_t d = a.shape()[1];
  double s = 0;
  for (size_t c = 0; c < d; ++c) s += a.at(i * d + c) * b.at(j * d + c);
  return s;
}

Outcome rope_properties() {
  const RoPEConfig cfg{64, 10000.0};
  double norm_err = 0.0, shift_err = 0.0;
  bool identity = true;
  for (uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    const TD x = randn({8, 64}, rng);
    std::vector<double> pos(8);
    for (auto& p : pos) p = double(rng.below(4096));
    const TD r = apply_rope(x, pos, cfg);
    for (size_t i = 0; i < 8; ++i) {
      const double n0 = std::sqrt(dot_row(x, i, x, i)), n1 = std::sqrt(dot_row(r, i, r, i));
      norm_err = std::max(norm_err, std::abs(n1 - n0) / n0);
    }
    const std::vector<double> zeros(8, 0.0);
    const TD same = apply_rope(x, zeros, cfg);
    for (size_t i = 0; i < x.size(); ++i) identity = identity && same.at(i) == x.at(i);

    const TD q = randn({1, 64}, rng), k = randn({1, 64}, rng);
    for (double delta : {0.0, 1.0, 5.0, 100.0}) {
      const double p0[] = {0.0}, pd[] = {delta};
      const double ref = dot_row(apply_rope(q, p0, cfg), 0, apply_rope(k, pd, cfg), 0);
      for (double m : {0.0, 3.0, 17.0}) {
        const double pm[] = {m}, pmd[] = {m + delta};
        const double got = dot_row(apply_rope(q, pm, cfg), 0, apply_rope(k, pmd, cfg), 0);
        shift_err = std::max(shift_err, std::abs(got - ref) / std::max(1.0, std::abs(ref)));
      }
    }
  }
  return {norm_err <= 1e-6 && shift_err <= 1e-6 && identity,
          "norm rel err " + fmt("%.1e", norm_err) + ", shift err " + fmt("%.1e", shift_err) +
              ", m=0 " + (identity ? "exact identity" : "NOT identity")};
}

Outcome rank_structure() {
  const auto t0 = Clock::now();
  bool qk_ok = true, sm_ok = true;
  size_t min_sm = 512, ordered = 0;
  std::string qk_ranks;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto qk = random_qk(512, 128, seed);
    const size_t rs = numerical_rank(analysis_scores("softmax", qk.q, qk.k, 128, 512));
    const size_t rr = numerical_rank(analysis_scores("relu2", qk.q, qk.k, 128, 512));
    ordered += rs >= rr;
    if (seed < 5) {
      const size_t rq = numerical_rank(ops::matmul_nt(qk.q, qk.k));
      qk_ok = qk_ok && rq == 128;
      qk_ranks += (qk_ranks.empty() ? "" : "/") + std::to_string(rq);
      sm_ok = sm_ok && double(rs) >= 0.95 * 512;
      min_sm = std::min(min_sm, rs);
    }
  }
  const double secs = seconds_since(t0);
  return {qk_ok && sm_ok && ordered >= 18 && secs < 120.0,
          "rank(QK^T) " + qk_ranks + " (ratio " + fmt("%.4f", 128.0 / 512) + "), min softmax rank " +
              std::to_string(min_sm) + "/512, softmax >= relu2 on " + std::to_string(ordered) +
              "/20 seeds, " + fmt("%.1f s", secs)};
}

Outcome parameter_identity() {
  bool ok = true;
  std::string detail;
  for (uint64_t d : {4u, 64u, 768u}) {
    for (uint64_t heads : {1u, 4u}) {
      const auto g = count_params(BlockKind::gau, d, 2 * d, 4, heads);
      const auto a = count_params(BlockKind::mhsa, d, 4 * d, 4, heads);
      const auto f = count_params(BlockKind::ffn, d, 4 * d, 4, heads);
      // Independent tallies: GAU W_u, W_v (d x 2d) and W_o (2d x d); MHSA
      // Q, K, V, O (d x d each); FFN two d x 4d matrices.
      const uint64_t gau_ref = 3 * d * (2 * d), mhsa_ref = 4 * d * d, ffn_ref = 2 * d * (4 * d);
      ok = ok && g.headline == gau_ref && a.headline == mhsa_ref && f.headline == ffn_ref &&
           2 * g.headline == a.headline + f.headline && 2 * g.headline == 12 * d * d;
    }
    detail += (detail.empty() ? "" : ", ") + std::string("d_h=") + std::to_string(d) + ": " +
              std::to_string(12 * d * d);
  }
  return {ok, "2*GAU == MHSA+FFN == 12 d_h^2 (" + detail + ")"};
}

Outcome normalization() {
  double sm_err = 0.0, sr_err = 0.0, ratio_err = 0.0;
  size_t sr_rows = 0;
  for (size_t n : {1u, 7u, 128u, 512u}) {
    Rng rng(n);
    const size_t s = 16;
    const TD q = randn({n, s}, rng), k = randn({n, s}, rng);
    for (auto v : {KernelVariant::softmax, KernelVariant::softmax_plus}) {
      AttentionKernelSpec spec = spec_for(v, std::nullopt, s, s);
      spec.base_len = 512;
      const TD a = attention_scores(q, k, spec);
      for (size_t i = 0; i < n; ++i) {
        double sum = 0;
        for (size_t j = 0; j < n; ++j) sum += a.at(i * n + j);
        sm_err = std::max(sm_err, std::abs(sum - 1.0));
      }
    }
    const auto sr_spec = spec_for(KernelVariant::scaled_relu2, std::nullopt, s, s);
    const TD a = attention_scores(q, k, sr_spec);
    const TD logits = ops::matmul_nt(q, k);
    for (size_t i = 0; i < n; ++i) {
      bool positive = false;
      double sum = 0;
      for (size_t j = 0; j < n; ++j) {
        positive = positive || logits.at(i * n + j) > 0;
        sum += a.at(i * n + j);
      }
      if (!positive) continue;
      ++sr_rows;
      sr_err = std::max(sr_err, std::abs(sum - 1.0 / double(n * s)));
    }
    // relu2_div: A_D * D is the same matrix for every denominator D.
    const double dn = double(n), ds = double(s);
    const std::map<ScoreDenom, double> denom = {
        {ScoreDenom::n2, dn * dn}, {ScoreDenom::n, dn}, {ScoreDenom::ns, dn * ds}, {ScoreDenom::s2, ds * ds}};
    const TD ref = attention_scores(q, k, spec_for(KernelVariant::relu2_div, ScoreDenom::n, s, s));
    for (const auto& [d, value] : denom) {
      const TD other = attention_scores(q, k, spec_for(KernelVariant::relu2_div, d, s, s));
      for (size_t i = 0; i < other.size(); ++i) {
        const double expect = ref.at(i) * denom.at(ScoreDenom::n) / value;
        ratio_err = std::max(ratio_err, std::abs(other.at(i) - expect) / std::max(1e-300, std::abs(expect)));
      }
    }
  }
  return {sm_err <= 1e-9 && sr_err <= 1e-9 && ratio_err <= 1e-12,
          "softmax-family row-sum err " + fmt("%.1e", sm_err) + ", scaled relu2 |sum - 1/(ns)| " +
              fmt("%.1e", sr_err) + " over " + std::to_string(sr_rows) + " rows, relu2_div ratio err " +
              fmt("%.1e", ratio_err)};
}

Outcome entropy() {
  double uniform_err = 0.0, onehot = 0.0, excess = -1.0;
  for (size_t n : {2u, 4u, 512u}) {
    const TD u = TD::full({1, n}, 1.0 / double(n));
    uniform_err = std::max(uniform_err, std::abs(entropy_rows(u)[0] - std::log(double(n))));
    std::vector<double> hot(n, 0.0);
    hot[n / 2] = 1.0;
    const TD h = TD::from({1, n}, hot);
    onehot = std::max(onehot, std::abs(entropy_rows(h)[0]));
    Rng rng(n);
    const TD q = randn({n, 16}, rng, 3.0), k = randn({n, 16}, rng, 3.0);
    for (const auto& kernel : {"softmax", "softmax_plus", "relu2", "scaled_relu2"}) {
      for (double e : entropy_rows(analysis_scores(kernel, q, k, 16, 512))) {
        excess = std::max(excess, e - std::log(double(n)));
      }
    }
  }
  return {uniform_err <= 1e-12 && onehot == 0.0 && excess <= 1e-12,
          "uniform |H - ln n| " + fmt("%.1e", uniform_err) + ", one-hot H " + fmt("%g", onehot) +
              ", max(H - ln n) " + fmt("%.1e", excess)};
}

// ---------------------------------------------------------------- training

struct EvalPair {
  double initial_loss, final_loss, initial_acc, final_acc;
};

EvalPair read_eval(const fs::path& dir) {
  const auto rows = read_csv(dir / "eval.csv");
  if (rows.size() < 3) throw std::runtime_error("eval.csv of " + dir.string() + " is too short");
  const size_t acc = column(rows[0], "masked_acc"), loss = column(rows[0], "loss");
  return {std::stod(rows[1][loss]), std::stod(rows.back()[loss]), std::stod(rows[1][acc]),
          std::stod(rows.back()[acc])};
}

const char* kToyConfig = R"({
  "seed": 0,
  "corpus": {"synthetic_bytes": 1048576, "synthetic_seed": 1},
  "model": {"num_layers": 4, "d_h": 128, "d_ff": 256, "s": 32},
  "kernel": {"variant": "softmax_plus"},
  "train": {"steps": 2000, "batch_size": 32, "peak_lr": 1e-3, "length": {"strategy": "fixed", "lengths": [64]}}
}
)";

Outcome toy_training() {
  const fs::path cfg = g_work / "toy.json";
  write_json(cfg, kToyConfig);
  double secs[2];
  for (int r = 0; r < 2; ++r) {
    const auto t0 = Clock::now();
    cli({"train", "--config", cfg.string(), "--out", (g_work / ("toy_run" + std::to_string(r))).string()});
    secs[r] = seconds_since(t0);
  }
  const fs::path a = g_work / "toy_run0", b = g_work / "toy_run1";
  const bool same = file_bytes(a / "metrics.csv") == file_bytes(b / "metrics.csv") &&
                    file_bytes(a / "eval.csv") == file_bytes(b / "eval.csv") &&
                    file_bytes(a / "checkpoint.bin") == file_bytes(b / "checkpoint.bin");
  const EvalPair e = read_eval(a);
  const double vocab = double(Vocab::load(a / "vocab.txt").size());
  const double chance = 1.0 / vocab;
  const bool acc_ok = e.final_acc > 3.0 * chance;
  const bool loss_ok = e.final_loss < 0.6 * e.initial_loss;
  const double slowest = std::max(secs[0], secs[1]);
  return {acc_ok && loss_ok && same && slowest < 600.0,
          "held-out acc " + fmt("%.4f", e.final_acc) + " vs chance " + fmt("%.5f", chance) + " (x" +
              fmt("%.0f", e.final_acc / chance) + "), loss " + fmt("%.3f", e.initial_loss) + " -> " +
              fmt("%.3f", e.final_loss) + " (" + fmt("%.1f%%", 100.0 * e.final_loss / e.initial_loss) +
              "), runs " + (same ? "identical" : "DIFFER") + ", " + fmt("%.0f s", secs[0]) + " + " +
              fmt("%.0f s", secs[1])};
}

const char* kTwinConfig = R"({
  "seed": 0,
  "model": {"num_layers": 2, "d_h": 96, "d_ff": 192, "s": 32, "max_len": 512},
  "kernel": {"base_len": 128},
  "train": {"steps": 800, "batch_size": 16, "peak_lr": 1e-3, "length": {"strategy": "fixed", "lengths": [128]}}
}
)";

Outcome length_generalization() {
  const fs::path cfg = g_work / "twin.json";
  write_json(cfg, kTwinConfig);
  const fs::path sp = g_work / "twin_softmax_plus", rd = g_work / "twin_relu2_ns";
  cli({"train", "--config", cfg.string(), "--override", "kernel.variant=softmax_plus", "--out", sp.string()});
  cli({"train", "--config", cfg.string(), "--override", "kernel.variant=relu2_div", "--override",
       "kernel.denom=ns", "--out", rd.string()});
  const fs::path out = g_work / "twin_eval";
  cli({"eval-lengths", "--run", sp.string(), "--run", rd.string(), "--lengths", "64,128,256", "--out",
       out.string()});
  const auto rows = read_csv(out / "eval_lengths.csv");
  const size_t kernel = column(rows[0], "kernel"), len = column(rows[0], "eval_len"),
               acc = column(rows[0], "masked_acc");
  std::map<std::pair<std::string, size_t>, double> table;
  for (size_t i = 1; i < rows.size(); ++i) table[{rows[i][kernel], std::stoul(rows[i][len])}] = std::stod(rows[i][acc]);
  const bool shape_ok = rows.size() == 7 && table.size() == 6;
  std::string detail = std::to_string(rows.size() - 1) + " rows;";
  for (const auto& name : {"softmax_plus", "relu2_div/ns"}) {
    detail += std::string(" ") + name + " acc";
    for (size_t n : {64u, 128u, 256u}) {
      auto it = table.find({name, n});
      detail += (n == 64 ? " " : "/") + (it == table.end() ? std::string("?") : fmt("%.4f", it->second));
    }
    detail += ";";
  }
  bool reported = false;
  auto a128 = table.find({"softmax_plus", 128}), a256 = table.find({"softmax_plus", 256});
  if (a128 != table.end() && a256 != table.end() && a128->second > 0) {
    detail += " softmax_plus 128->256 relative drop " +
              fmt("%.2f%%", 100.0 * (a128->second - a256->second) / a128->second);
    reported = true;
  }
  return {shape_ok && reported, detail};
}

Outcome engineering() {
  // Checkpoint round trip through a short real training run.
  CorpusSettings cs;
  cs.synthetic_bytes = 60000;
  const TokenCorpus corpus = load_run_corpus(cs);
  ModelConfig mc;
  mc.num_layers = 2;
  mc.vocab_size = corpus.vocab.size();
  mc.max_len = 64;
  mc.block = block_cfg(KernelVariant::softmax_plus);
  mc.block.d_h = 16;
  mc.block.d_ff = 32;
  mc.block.s = 8;
  mc.block.kernel.s = 8;
  mc.block.kernel.d_h = 16;
  mc.block.rope = RoPEConfig{8, 10000.0};
  TrainConfig tc;
  tc.total_steps = 5;
  tc.batch_size = 8;
  tc.length = LengthStrategy::fixed_length(32);
  tc.eval_seqs = 8;
  Trainer t1(mc, tc, corpus);
  for (int i = 0; i < 3; ++i) t1.train_step();
  const fs::path ck = g_work / "roundtrip.bin";
  t1.save(ck);
  Trainer t2(mc, tc, corpus);
  t2.load(ck);
  const auto e1 = encode_checkpoint(t1.checkpoint()), e2 = encode_checkpoint(t2.checkpoint());
  const auto disk = file_bytes(ck);
  const bool bit_exact = e1 == e2 && std::string(e1.begin(), e1.end()) == disk;
  t1.train_step();
  t2.train_step();
  const bool continues = encode_checkpoint(t1.checkpoint()) == encode_checkpoint(t2.checkpoint());

  // Gradient accumulation: 8x1 vs 4x2 vs 2x4 sequences per update.
  double accum_err = 0.0;
  TrainConfig big = tc;
  const auto ra = train_loop(mc, big, corpus);
  for (size_t micro : {4u, 2u}) {
    TrainConfig acc = tc;
    acc.batch_size = micro;
    acc.grad_accum_steps = 8 / micro;
    const auto rb = train_loop(mc, acc, corpus);
    for (size_t i = 0; i < ra.rows.size() && i < rb.rows.size(); ++i) {
      accum_err = std::max(accum_err, std::abs(rb.rows[i].loss - ra.rows[i].loss) / ra.rows[i].loss);
    }
    if (rb.rows.size() != ra.rows.size()) accum_err = INFINITY;
  }

  // Benchmark shape and memory trend.
  const fs::path bench_dir = g_work / "bench";
  cli({"bench", "--lengths", "256,512,1024", "--out", bench_dir.string()});
  const auto rows = read_csv(bench_dir / "bench.csv");
  const size_t cn = column(rows[0], "n"), cm = column(rows[0], "model"), cp = column(rows[0], "peak_mem_bytes"),
               ch = column(rows[0], "headline_params"), cs_ = column(rows[0], "status");
  std::map<size_t, std::map<std::string, std::pair<double, std::string>>> by_len;
  bool params_match = rows.size() == 7;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    by_len[std::stoul(r[cn])][r[cm]] = {r[cp].empty() ? 0.0 : std::stod(r[cp]), r[cs_]};
    params_match = params_match && r[ch] == rows[1 + (i - 1) / 2 * 2][ch];
  }
  bool mem_ok = true;
  std::string trend;
  for (const auto& [n, m] : by_len) {
    const auto& g = m.at("gau_x2");
    const auto& b = m.at("mhsa_ffn");
    if (g.second != "ok" || b.second != "ok") {
      if (n >= 512) mem_ok = mem_ok && g.second == "ok";
      trend += " n=" + std::to_string(n) + " " + g.second + "/" + b.second;
      continue;
    }
    if (n >= 512) mem_ok = mem_ok && g.first <= b.first;
    trend += " n=" + std::to_string(n) + " baseline " + fmt("%.1f%%", 100.0 * b.first / g.first);
  }
  return {bit_exact && continues && accum_err <= 1e-5 && params_match && mem_ok,
          std::string("checkpoint ") + (bit_exact && continues ? "bit-exact" : "MISMATCH") +
              ", accumulation rel loss err " + fmt("%.1e", accum_err) + ", bench peak vs GAU:" + trend};
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  g_work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs");
  fs::create_directories(g_work);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"01 gradient suite", gradients},
      {"02 softmax_plus identity", softmax_plus_identity},
      {"03 rope properties", rope_properties},
      {"04 attention rank structure", rank_structure},
      {"05 parameter identity", parameter_identity},
      {"06 normalization contracts", normalization},
      {"07 entropy", entropy},
      {"08 toy mlm training", toy_training},
      {"09 length generalization", length_generalization},
      {"10 engineering contracts", engineering},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed;
}
