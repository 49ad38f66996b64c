#include "gau/gau.hpp"

#include <cmath>

#include "gau/ops.hpp"

namespace gau {

namespace {

void check_rate(double rate, const char* key) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError(std::string(key) + " must lie in [0, 1), got " + std::to_string(rate));
  }
}

template <class T>
void check_input(const Tensor<T>& x, size_t d_h, const PackedBatch& batch, const char* op) {
  if (x.rank() != 2 || x.dim(1) != d_h) {
    throw DimensionError(std::string(op) + ": input " + shape_str(x.shape()) + " is not n x " +
                         std::to_string(d_h));
  }
  if (batch.num_seqs == 0 || batch.seq_len == 0 || x.dim(0) != batch.num_seqs * batch.seq_len) {
    throw DimensionError(std::string(op) + ": input rows " + std::to_string(x.dim(0)) +
                         " do not match " + std::to_string(batch.num_seqs) + " sequences of " +
                         std::to_string(batch.seq_len));
  }
  if (batch.positions.size() != batch.seq_len) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(batch.seq_len) +
                         " positions, got " + std::to_string(batch.positions.size()));
  }
  if (!batch.key_valid.empty() && batch.key_valid.size() != x.dim(0)) {
    throw DimensionError(std::string(op) + ": key mask length does not match input rows");
  }
}

// Per-sequence dropout keys for one dropout site.
std::vector<uint64_t> site_keys(const PackedBatch& batch, uint64_t site) {
  std::vector<uint64_t> keys(batch.num_seqs, 0);
  if (batch.mode != Mode::train) return keys;
  if (batch.seq_keys.size() != batch.num_seqs) {
    throw ConfigError("train-mode forward needs one dropout key per sequence");
  }
  for (size_t b = 0; b < batch.num_seqs; ++b) {
    keys[b] = derive_key(derive_key(batch.seq_keys[b], batch.layer_salt), site);
  }
  return keys;
}

bool needs_keys(const PackedBatch& batch, double a, double b) {
  return batch.mode == Mode::train && (a > 0.0 || b > 0.0);
}

std::span<const uint8_t> seq_mask(const PackedBatch& batch, size_t b) {
  if (batch.key_valid.empty()) return {};
  return batch.key_valid.subspan(b * batch.seq_len, batch.seq_len);
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  Tensor<T> centred = ops::sub_col(x, ops::reduce(x, 1, ops::ReduceKind::mean));
  Tensor<T> var = ops::reduce(centred, 1, ops::ReduceKind::var);
  Tensor<T> normed = ops::mul_col(centred, ops::rsqrt(ops::add_const(var, eps)));
  return ops::add(ops::hadamard(normed, gain), bias);
}

}  // namespace

void BlockConfig::validate() const {
  if (d_h == 0 || d_ff == 0 || s == 0) throw ConfigError("block dimensions must be positive");
  if (s > d_ff) throw ConfigError("block.s must not exceed block.d_ff");
  check_rate(hidden_dropout, "dropout.hidden");
  check_rate(attn_dropout, "dropout.attention");
  kernel.validate();
  if (kernel.s != s || kernel.d_h != d_h) {
    throw ConfigError("kernel.s/kernel.d_h must match the block's s and d_h");
  }
  if (rope_enabled) {
    rope.validate();
    if (rope.dim != s) throw ConfigError("rope.dim must equal block.s");
  }
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

template <class T>
GauParams<T> GauParams<T>::init(const BlockConfig& cfg, Rng& rng, double init_std) {
  GauParams p;
  p.w_u = Tensor<T>::randn({cfg.d_h, cfg.d_ff}, rng, init_std, true);
  p.w_v = Tensor<T>::randn({cfg.d_h, cfg.d_ff}, rng, init_std, true);
  p.w_o = Tensor<T>::randn({cfg.d_ff, cfg.d_h}, rng, init_std, true);
  p.w_z = Tensor<T>::randn({cfg.d_h, cfg.s}, rng, init_std, true);
  auto around_one = [&] {
    Tensor<T> t = Tensor<T>::randn({cfg.s}, rng, init_std, true);
    for (auto& v : t.mutable_data()) v += T(1);
    return t;
  };
  p.gamma_q = around_one();
  p.beta_q = Tensor<T>::zeros({cfg.s}, true);
  p.gamma_k = around_one();
  p.beta_k = Tensor<T>::zeros({cfg.s}, true);
  return p;
}

template <class T>
NamedTensors<T> GauParams<T>::named(const std::string& prefix) {
  return {{prefix + "w_u", &w_u},         {prefix + "w_v", &w_v},
          {prefix + "w_o", &w_o},         {prefix + "w_z", &w_z},
          {prefix + "gamma_q", &gamma_q}, {prefix + "beta_q", &beta_q},
          {prefix + "gamma_k", &gamma_k}, {prefix + "beta_k", &beta_k}};
}

template <class T>
Tensor<T> glu_forward(const Tensor<T>& x, const GluParams<T>& params) {
  Tensor<T> u = swish(ops::matmul(x, params.w_u));
  Tensor<T> v = swish(ops::matmul(x, params.w_v));
  return ops::matmul(ops::hadamard(u, v), params.w_o);
}

template <class T>
QueryKey<T> gau_qk(const Tensor<T>& x, const GauParams<T>& params, const BlockConfig& cfg,
                   std::span<const double> positions) {
  Tensor<T> z = swish(ops::matmul(x, params.w_z));
  Tensor<T> q = ops::add(ops::hadamard(z, params.gamma_q), params.beta_q);
  Tensor<T> k = ops::add(ops::hadamard(z, params.gamma_k), params.beta_k);
  if (cfg.rope_enabled) {
    q = apply_rope(q, positions, cfg.rope);
    if (cfg.rope_both) k = apply_rope(k, positions, cfg.rope);
  }
  return {q, k};
}

template <class T>
GauOutput<T> gau_forward(const Tensor<T>& x, const GauParams<T>& params, const BlockConfig& cfg,
                         const PackedBatch& batch) {
  cfg.validate();
  check_input(x, cfg.d_h, batch, "gau_forward");
  const size_t L = batch.seq_len;
  const bool keyed = needs_keys(batch, cfg.hidden_dropout, cfg.attn_dropout);
  const auto attn_keys = keyed ? site_keys(batch, 1) : std::vector<uint64_t>(batch.num_seqs);
  const auto hidden_keys = keyed ? site_keys(batch, 2) : std::vector<uint64_t>(batch.num_seqs);

  auto [q, k] = gau_qk(x, params, cfg, batch.positions);
  Tensor<T> u = swish(ops::matmul(x, params.w_u));
  Tensor<T> v = swish(ops::matmul(x, params.w_v));

  GauOutput<T> result;
  std::vector<Tensor<T>> mixed;
  mixed.reserve(batch.num_seqs);
  for (size_t b = 0; b < batch.num_seqs; ++b) {
    Tensor<T> qb = batch.num_seqs == 1 ? q : ops::slice_rows(q, b * L, L);
    Tensor<T> kb = batch.num_seqs == 1 ? k : ops::slice_rows(k, b * L, L);
    Tensor<T> vb = batch.num_seqs == 1 ? v : ops::slice_rows(v, b * L, L);
    Tensor<T> a = attention_scores(qb, kb, cfg.kernel, seq_mask(batch, b));
    a = ops::dropout_keyed(a, cfg.attn_dropout, batch.mode, attn_keys[b]);
    mixed.push_back(ops::matmul(a, vb));
    result.attn.push_back(std::move(a));
  }
  Tensor<T> av = batch.num_seqs == 1 ? mixed[0] : ops::concat_rows<T>(mixed);
  Tensor<T> o = ops::matmul(ops::hadamard(u, av), params.w_o);
  o = ops::dropout_rows<T>(o, cfg.hidden_dropout, batch.mode, hidden_keys);
  result.out = cfg.post_norm ? var_norm(ops::add(x, o), cfg.norm_eps, cfg.rms_mode) : o;
  return result;
}

template <class T>
GauOutput<T> gau_forward(const Tensor<T>& x, const GauParams<T>& params, const BlockConfig& cfg,
                         std::span<const double> positions, Mode mode, Rng& rng) {
  const uint64_t key = rng.next();
  PackedBatch batch;
  batch.num_seqs = 1;
  batch.seq_len = x.rank() == 2 ? x.dim(0) : 0;
  batch.positions = positions;
  batch.mode = mode;
  batch.seq_keys = std::span<const uint64_t>(&key, 1);
  return gau_forward(x, params, cfg, batch);
}

void BaselineConfig::validate() const {
  if (d_h == 0 || d_ff == 0 || heads == 0) throw ConfigError("baseline dimensions must be positive");
  if (d_h % heads != 0) {
    throw ConfigError("baseline.heads (" + std::to_string(heads) + ") must divide d_h (" +
                      std::to_string(d_h) + ")");
  }
  check_rate(hidden_dropout, "dropout.hidden");
  check_rate(attn_dropout, "dropout.attention");
  kernel.validate();
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

template <class T>
BaselineParams<T> BaselineParams<T>::init(const BaselineConfig& cfg, Rng& rng, double init_std) {
  cfg.validate();
  BaselineParams p;
  const size_t head_dim = cfg.d_h / cfg.heads;
  for (size_t h = 0; h < cfg.heads; ++h) {
    p.w_q.push_back(Tensor<T>::randn({cfg.d_h, head_dim}, rng, init_std, true));
    p.w_k.push_back(Tensor<T>::randn({cfg.d_h, head_dim}, rng, init_std, true));
    p.w_v.push_back(Tensor<T>::randn({cfg.d_h, head_dim}, rng, init_std, true));
  }
  p.w_attn_out = Tensor<T>::randn({cfg.d_h, cfg.d_h}, rng, init_std, true);
  p.w_u = Tensor<T>::randn({cfg.d_h, cfg.d_ff}, rng, init_std, true);
  p.w_o = Tensor<T>::randn({cfg.d_ff, cfg.d_h}, rng, init_std, true);
  if (cfg.layer_norm) {
    p.ln1_gain = Tensor<T>::full({cfg.d_h}, T(1), true);
    p.ln1_bias = Tensor<T>::zeros({cfg.d_h}, true);
    p.ln2_gain = Tensor<T>::full({cfg.d_h}, T(1), true);
    p.ln2_bias = Tensor<T>::zeros({cfg.d_h}, true);
  }
  return p;
}

template <class T>
NamedTensors<T> BaselineParams<T>::named(const std::string& prefix) {
  NamedTensors<T> out;
  for (size_t h = 0; h < w_q.size(); ++h) {
    const std::string head = prefix + "head" + std::to_string(h) + ".";
    out.emplace_back(head + "w_q", &w_q[h]);
    out.emplace_back(head + "w_k", &w_k[h]);
    out.emplace_back(head + "w_v", &w_v[h]);
  }
  out.emplace_back(prefix + "w_attn_out", &w_attn_out);
  out.emplace_back(prefix + "w_u", &w_u);
  out.emplace_back(prefix + "w_o", &w_o);
  if (ln1_gain.defined()) {
    out.emplace_back(prefix + "ln1_gain", &ln1_gain);
    out.emplace_back(prefix + "ln1_bias", &ln1_bias);
    out.emplace_back(prefix + "ln2_gain", &ln2_gain);
    out.emplace_back(prefix + "ln2_bias", &ln2_bias);
  }
  return out;
}

template <class T>
GauOutput<T> mhsa_ffn_forward(const Tensor<T>& x, const BaselineParams<T>& params,
                              const BaselineConfig& cfg, const PackedBatch& batch) {
  cfg.validate();
  check_input(x, cfg.d_h, batch, "mhsa_ffn_forward");
  if (params.w_q.size() != cfg.heads) {
    throw DimensionError("mhsa_ffn_forward: parameters hold " + std::to_string(params.w_q.size()) +
                         " heads, config expects " + std::to_string(cfg.heads));
  }
  const size_t L = batch.seq_len;
  const bool keyed = needs_keys(batch, cfg.hidden_dropout, cfg.attn_dropout);
  const auto hidden_keys = keyed ? site_keys(batch, 2) : std::vector<uint64_t>(batch.num_seqs);
  const auto ffn_keys = keyed ? site_keys(batch, 3) : std::vector<uint64_t>(batch.num_seqs);

  auto normalize = [&](const Tensor<T>& t, const Tensor<T>& gain, const Tensor<T>& bias) {
    return cfg.layer_norm ? layer_norm(t, gain, bias, cfg.norm_eps)
                          : var_norm(t, cfg.norm_eps, cfg.rms_mode);
  };

  GauOutput<T> result;
  std::vector<Tensor<T>> heads;
  for (size_t h = 0; h < cfg.heads; ++h) {
    Tensor<T> q = ops::matmul(x, params.w_q[h]);
    Tensor<T> k = ops::matmul(x, params.w_k[h]);
    Tensor<T> v = ops::matmul(x, params.w_v[h]);
    std::vector<Tensor<T>> rows;
    for (size_t b = 0; b < batch.num_seqs; ++b) {
      Tensor<T> qb = batch.num_seqs == 1 ? q : ops::slice_rows(q, b * L, L);
      Tensor<T> kb = batch.num_seqs == 1 ? k : ops::slice_rows(k, b * L, L);
      Tensor<T> vb = batch.num_seqs == 1 ? v : ops::slice_rows(v, b * L, L);
      Tensor<T> a = attention_scores(qb, kb, cfg.kernel, seq_mask(batch, b));
      if (keyed) {
        const uint64_t key = derive_key(derive_key(batch.seq_keys[b], batch.layer_salt), 16 + h);
        a = ops::dropout_keyed(a, cfg.attn_dropout, batch.mode, key);
      }
      rows.push_back(ops::matmul(a, vb));
      result.attn.push_back(std::move(a));
    }
    heads.push_back(batch.num_seqs == 1 ? rows[0] : ops::concat_rows<T>(rows));
  }
  Tensor<T> attn_out = ops::matmul(heads.size() == 1 ? heads[0] : ops::concat_cols<T>(heads),
                                   params.w_attn_out);
  attn_out = ops::dropout_rows<T>(attn_out, cfg.hidden_dropout, batch.mode, hidden_keys);
  Tensor<T> x_a = normalize(ops::add(x, attn_out), params.ln1_gain, params.ln1_bias);

  Tensor<T> ffn = ops::matmul(ops::gelu(ops::matmul(x_a, params.w_u)), params.w_o);
  ffn = ops::dropout_rows<T>(ffn, cfg.hidden_dropout, batch.mode, ffn_keys);
  result.out = normalize(ops::add(x_a, ffn), params.ln2_gain, params.ln2_bias);
  return result;
}

template <class T>
Tensor<T> mhsa_ffn_forward(const Tensor<T>& x, const BaselineParams<T>& params,
                           const BaselineConfig& cfg, Mode mode, Rng& rng) {
  const uint64_t key = rng.next();
  std::vector<double> positions(x.rank() == 2 ? x.dim(0) : 0);
  for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<double>(i);
  PackedBatch batch;
  batch.seq_len = positions.size();
  batch.positions = positions;
  batch.mode = mode;
  batch.seq_keys = std::span<const uint64_t>(&key, 1);
  return mhsa_ffn_forward(x, params, cfg, batch).out;
}

ParamCount count_params(BlockKind kind, uint64_t d_h, uint64_t d_ff, uint64_t s, uint64_t heads) {
  if (d_h == 0 || d_ff == 0 || s == 0 || heads == 0) {
    throw ConfigError("count_params: dimensions must be positive");
  }
  switch (kind) {
    case BlockKind::gau:
      return {3 * d_h * d_ff, 3 * d_h * d_ff + d_h * s + 4 * s};
    case BlockKind::mhsa: {
      if (d_h % heads != 0) throw ConfigError("count_params: heads must divide d_h");
      const uint64_t per_head = 3 * d_h * (d_h / heads);
      return {4 * d_h * d_h, heads * per_head + d_h * d_h};
    }
    case BlockKind::ffn:
      return {2 * d_h * d_ff, 2 * d_h * d_ff};
  }
  return {};
}

template <class T>
uint64_t count_elements(const NamedTensors<T>& tensors) {
  uint64_t total = 0;
  for (const auto& [name, t] : tensors) total += t->size();
  return total;
}

#define GAU_INSTANTIATE_BLOCKS(T)                                                             \
  template struct GauParams<T>;                                                               \
  template struct BaselineParams<T>;                                                          \
  template Tensor<T> glu_forward(const Tensor<T>&, const GluParams<T>&);                      \
  template QueryKey<T> gau_qk(const Tensor<T>&, const GauParams<T>&, const BlockConfig&,          \
                             std::span<const double>);                                        \
  template GauOutput<T> gau_forward(const Tensor<T>&, const GauParams<T>&, const BlockConfig&, \
                                    const PackedBatch&);                                      \
  template GauOutput<T> gau_forward(const Tensor<T>&, const GauParams<T>&, const BlockConfig&, \
                                    std::span<const double>, Mode, Rng&);                     \
  template GauOutput<T> mhsa_ffn_forward(const Tensor<T>&, const BaselineParams<T>&,          \
                                         const BaselineConfig&, const PackedBatch&);          \
  template Tensor<T> mhsa_ffn_forward(const Tensor<T>&, const BaselineParams<T>&,             \
                                      const BaselineConfig&, Mode, Rng&);                     \
  template uint64_t count_elements(const NamedTensors<T>&);

GAU_INSTANTIATE_BLOCKS(float)
GAU_INSTANTIATE_BLOCKS(double)

#undef GAU_INSTANTIATE_BLOCKS

}  // namespace gau
