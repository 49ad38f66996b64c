#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gau/kernels.hpp"
#include "gau/tensor.hpp"

namespace gau {

// Named parameter reference used by the optimizer and checkpoints.
template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

struct BlockConfig {
  size_t d_h = 128;
  size_t d_ff = 256;
  size_t s = 32;
  AttentionKernelSpec kernel;  // kernel.s and kernel.d_h mirror s and d_h
  double hidden_dropout = 0.1;
  double attn_dropout = 0.1;
  RoPEConfig rope{32, 10000.0};
  bool rope_enabled = true;
  // Rotate K as well as Q. Off reproduces a Q-only rotation.
  bool rope_both = true;
  double norm_eps = 1e-6;
  bool rms_mode = false;
  // out = var_norm(x + O) when set; otherwise the raw block output O.
  bool post_norm = true;

  void validate() const;
};

template <class T>
struct GauParams {
  Tensor<T> w_u;      // d_h x d_ff
  Tensor<T> w_v;      // d_h x d_ff
  Tensor<T> w_o;      // d_ff x d_h
  Tensor<T> w_z;      // d_h x s
  Tensor<T> gamma_q;  // s
  Tensor<T> beta_q;   // s
  Tensor<T> gamma_k;  // s
  Tensor<T> beta_k;   // s

  // Weights ~ N(0, init_std^2); per-dim scales ~ N(1, init_std^2), offsets 0.
  static GauParams init(const BlockConfig& cfg, Rng& rng, double init_std);
  NamedTensors<T> named(const std::string& prefix);
};

// Minimal GLU weights: O = (swish(x W_u) * swish(x W_v)) W_o.
template <class T>
struct GluParams {
  Tensor<T> w_u;
  Tensor<T> w_v;
  Tensor<T> w_o;
};

template <class T>
struct GauOutput {
  Tensor<T> out;
  std::vector<Tensor<T>> attn;  // one n x n matrix per sequence
};

// Several equal-length sequences stacked along rows.
struct PackedBatch {
  size_t num_seqs = 1;
  size_t seq_len = 0;
  std::span<const double> positions;  // seq_len entries, shared by all sequences
  std::span<const uint8_t> key_valid;  // num_seqs * seq_len entries, or empty
  Mode mode = Mode::eval;
  // One dropout key per sequence; required in train mode with nonzero rates.
  std::span<const uint64_t> seq_keys;
  uint64_t layer_salt = 0;
};

template <class T>
Tensor<T> glu_forward(const Tensor<T>& x, const GluParams<T>& params);

template <class T>
struct QueryKey {
  Tensor<T> q;
  Tensor<T> k;
};

// The rotated queries and keys a GAU feeds to its attention kernel. x holds
// one or more packed sequences sharing `positions`.
template <class T>
QueryKey<T> gau_qk(const Tensor<T>& x, const GauParams<T>& params, const BlockConfig& cfg,
                   std::span<const double> positions);

template <class T>
GauOutput<T> gau_forward(const Tensor<T>& x, const GauParams<T>& params, const BlockConfig& cfg,
                         const PackedBatch& batch);

// Single-sequence form: x is n x d_h, positions has n entries.
template <class T>
GauOutput<T> gau_forward(const Tensor<T>& x, const GauParams<T>& params, const BlockConfig& cfg,
                         std::span<const double> positions, Mode mode, Rng& rng);

struct BaselineConfig {
  size_t d_h = 128;
  size_t d_ff = 512;
  size_t heads = 4;
  AttentionKernelSpec kernel{KernelVariant::softmax, std::nullopt, 128, 128, 512.0, 1e-12};
  double hidden_dropout = 0.1;
  double attn_dropout = 0.1;
  double norm_eps = 1e-6;
  bool rms_mode = false;
  // Classic LayerNorm (mean-centred, learned gain and bias) instead of var_norm.
  bool layer_norm = false;

  void validate() const;
};

template <class T>
struct BaselineParams {
  std::vector<Tensor<T>> w_q;  // per head, d_h x d_h/H
  std::vector<Tensor<T>> w_k;
  std::vector<Tensor<T>> w_v;
  Tensor<T> w_attn_out;  // d_h x d_h
  Tensor<T> w_u;         // d_h x d_ff
  Tensor<T> w_o;         // d_ff x d_h
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // d_h each; used with layer_norm only

  static BaselineParams init(const BaselineConfig& cfg, Rng& rng, double init_std);
  NamedTensors<T> named(const std::string& prefix);
};

// MHSA followed by the vanilla FFN, each with residual + normalization.
template <class T>
GauOutput<T> mhsa_ffn_forward(const Tensor<T>& x, const BaselineParams<T>& params,
                              const BaselineConfig& cfg, const PackedBatch& batch);

template <class T>
Tensor<T> mhsa_ffn_forward(const Tensor<T>& x, const BaselineParams<T>& params,
                           const BaselineConfig& cfg, Mode mode, Rng& rng);

enum class BlockKind { gau, mhsa, ffn };

struct ParamCount {
  uint64_t headline = 0;  // 3 d_h d_ff, 4 d_h^2, 2 d_h d_ff
  uint64_t exact = 0;     // every tensor of the block as built here
};

ParamCount count_params(BlockKind kind, uint64_t d_h, uint64_t d_ff, uint64_t s, uint64_t heads);

template <class T>
uint64_t count_elements(const NamedTensors<T>& tensors);

}  // namespace gau
