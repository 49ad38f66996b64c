#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gau/gau.hpp"
#include "gau/tensor.hpp"

namespace gau {

inline constexpr int32_t kIgnoreIndex = -1;

struct ModelConfig {
  size_t num_layers = 4;
  BlockConfig block;  // d_h, d_ff, s, kernel, RoPE, dropout rates
  size_t vocab_size = 0;
  size_t max_len = 512;
  bool tie_embeddings = true;
  double init_std = 0.02;

  void validate() const;
};

enum class LengthKind { fixed, diff };

// Sequence length per training step: one fixed L, or a draw per step from a
// weighted list ("diff").
struct LengthStrategy {
  LengthKind kind = LengthKind::fixed;
  std::vector<size_t> lengths{128};
  std::vector<double> weights;  // empty: uniform

  static LengthStrategy fixed_length(size_t length);
  // {L/8, L/4, L/2, L}, uniform.
  static LengthStrategy diff(size_t length);

  size_t max_length() const;
  size_t sample(uint64_t key) const;
  void validate() const;
};

struct MaskingConfig {
  double mask_prob = 0.15;
  double mask_token_frac = 0.8;    // replaced by [MASK]
  double random_token_frac = 0.1;  // replaced by a random token; the rest stay

  void validate() const;
};

struct TrainConfig {
  double peak_lr = 3e-4;
  double warmup_proportion = 0.1;
  size_t total_steps = 1000;
  size_t batch_size = 32;  // sequences per micro-batch
  size_t grad_accum_steps = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  double weight_decay = 0.01;
  // Parameters whose name contains any of these substrings skip weight decay.
  std::vector<std::string> no_decay{"gamma_", "beta_", "embedding"};
  MaskingConfig masking;
  LengthStrategy length;
  uint64_t seed = 0;
  size_t eval_every = 0;  // 0: evaluate at the end only
  size_t eval_seqs = 64;

  void validate() const;
};

// Equal-length sequences stored row-major (num_seqs x seq_len).
struct Batch {
  size_t num_seqs = 0;
  size_t seq_len = 0;
  std::vector<int32_t> input_ids;
  std::vector<int32_t> target_ids;  // kIgnoreIndex except at masked positions
  std::vector<uint8_t> key_valid;   // 0 at padding; empty when there is none
  std::vector<double> positions;    // 0..seq_len-1
  std::vector<uint64_t> seq_keys;   // per-sequence dropout keys

  size_t masked_count() const;
  Batch slice(size_t first, size_t count) const;
};

// Windows of `seq_len` tokens starting at `starts`, then BERT-style masking
// keyed by `key`. Windows running past the stream end are padded.
Batch make_mlm_windows(std::span<const int32_t> stream, std::span<const size_t> starts,
                       size_t seq_len, const MaskingConfig& masking, size_t vocab_size,
                       uint64_t key);

// The full (batch_size * grad_accum_steps)-sequence batch for one training
// step. Deterministic in (cfg.seed, step).
Batch make_mlm_batch(std::span<const int32_t> stream, const TrainConfig& cfg, size_t vocab_size,
                     size_t step);

template <class T>
struct ModelParams {
  Tensor<T> embedding;  // vocab x d_h
  std::vector<GauParams<T>> layers;
  std::optional<Tensor<T>> output;  // d_h x vocab when embeddings are untied

  static ModelParams init(const ModelConfig& cfg, uint64_t seed);
  NamedTensors<T> named();
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  // Logits for every position instead of only the masked ones.
  bool full_logits = false;
  // Divides the summed loss when > 0 (used to normalize micro-batches by the
  // masked count of the whole accumulated batch).
  double loss_denominator = 0.0;
};

template <class T>
struct ForwardResult {
  Tensor<T> loss;    // scalar; zero without graph when nothing is masked
  Tensor<T> logits;  // (masked rows | num_seqs x seq_len) x vocab
  size_t masked = 0;
  size_t correct = 0;  // argmax hits among masked positions
};

template <class T>
ForwardResult<T> model_forward(const ModelParams<T>& params, const ModelConfig& cfg,
                               const Batch& batch, const ForwardOptions& options = {});

// Hidden state entering each layer (index num_layers is the final output).
template <class T>
std::vector<Tensor<T>> layer_states(const ModelParams<T>& params, const ModelConfig& cfg,
                                    const Batch& batch);

// Linear warmup to peak over warmup_proportion * total_steps, then linear
// decay to zero at total_steps.
double lr_at(size_t step, const TrainConfig& cfg);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  std::vector<std::string> no_decay;

  static AdamWConfig from(const TrainConfig& cfg);
};

template <class T>
class AdamW {
 public:
  AdamW(NamedTensors<T> params, AdamWConfig cfg);

  // p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p. Throws
  // NumericalError naming the parameter on a non-finite gradient.
  void step(double lr);

  uint64_t steps() const { return t_; }
  void set_steps(uint64_t t) { t_ = t; }
  bool decays(const std::string& name) const;

  // Moment tensors named "adam.m.<param>" / "adam.v.<param>".
  NamedTensors<T> state();
  void zero_grad();

 private:
  NamedTensors<T> params_;
  std::vector<Tensor<T>> m_, v_;
  AdamWConfig cfg_;
  uint64_t t_ = 0;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;  // mean cross entropy over masked tokens
  size_t masked = 0;
};

// Masked-token top-1 accuracy on `num_seqs` evenly spaced windows of
// `eval_len` tokens. Masking is keyed by `key` so different models and
// lengths see comparable draws.
template <class T>
EvalResult eval_mlm_accuracy(const ModelParams<T>& params, const ModelConfig& cfg,
                             std::span<const int32_t> stream, size_t eval_len, size_t num_seqs,
                             const MaskingConfig& masking, uint64_t key);

}  // namespace gau
