#include "gau/model.hpp"

#include <algorithm>
#include <cmath>

#include "gau/errors.hpp"
#include "gau/ops.hpp"
#include "gau/text.hpp"

namespace gau {

namespace {

void check_probability(double p, const char* key) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError(std::string(key) + ": must be in [0, 1], got " + std::to_string(p));
  }
}

// Key streams derived from a step key.
enum : uint64_t { kLengthStream = 1, kWindowStream = 2, kMaskStream = 3, kDropoutStream = 4 };

}  // namespace

void ModelConfig::validate() const {
  if (num_layers == 0) throw ConfigError("model.num_layers: must be positive");
  if (vocab_size <= static_cast<size_t>(kNumReserved)) {
    throw ConfigError("model.vocab_size: must exceed " + std::to_string(kNumReserved));
  }
  if (max_len == 0) throw ConfigError("model.max_len: must be positive");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std: must be positive");
  block.validate();
}

LengthStrategy LengthStrategy::fixed_length(size_t length) {
  return LengthStrategy{LengthKind::fixed, {length}, {}};
}

LengthStrategy LengthStrategy::diff(size_t length) {
  return LengthStrategy{LengthKind::diff, {length / 8, length / 4, length / 2, length}, {}};
}

size_t LengthStrategy::max_length() const {
  return lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
}

size_t LengthStrategy::sample(uint64_t key) const {
  if (kind == LengthKind::fixed || lengths.size() == 1) return lengths.front();
  const double u = unit_double(mix64(key));
  double total = 0;
  for (size_t i = 0; i < lengths.size(); ++i) total += weights.empty() ? 1.0 : weights[i];
  double acc = 0;
  for (size_t i = 0; i < lengths.size(); ++i) {
    acc += (weights.empty() ? 1.0 : weights[i]) / total;
    if (u < acc) return lengths[i];
  }
  return lengths.back();
}

void LengthStrategy::validate() const {
  if (lengths.empty()) throw ConfigError("train.length.lengths: must not be empty");
  for (size_t l : lengths) {
    if (l == 0) throw ConfigError("train.length.lengths: lengths must be positive");
  }
  if (kind == LengthKind::fixed && lengths.size() != 1) {
    throw ConfigError("train.length.lengths: the fixed strategy takes exactly one length");
  }
  if (!weights.empty()) {
    if (weights.size() != lengths.size()) {
      throw ConfigError("train.length.weights: must have one weight per length");
    }
    double total = 0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ConfigError("train.length.weights: weights must be non-negative");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("train.length.weights: weights must not all be zero");
  }
}

void MaskingConfig::validate() const {
  check_probability(mask_prob, "train.mask_prob");
  check_probability(mask_token_frac, "train.mask_token_frac");
  check_probability(random_token_frac, "train.random_token_frac");
  if (mask_token_frac + random_token_frac > 1.0 + 1e-12) {
    throw ConfigError("train.mask_token_frac + train.random_token_frac: must not exceed 1");
  }
}

void TrainConfig::validate() const {
  if (!(peak_lr >= 0.0)) throw ConfigError("train.peak_lr: must be non-negative");
  if (!(warmup_proportion > 0.0 && warmup_proportion < 1.0)) {
    throw ConfigError("train.warmup_proportion: must be in (0, 1)");
  }
  if (batch_size == 0) throw ConfigError("train.batch_size: must be positive");
  if (grad_accum_steps == 0) throw ConfigError("train.grad_accum_steps: must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("train.adam_beta1: must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("train.adam_beta2: must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps: must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be non-negative");
  if (eval_seqs == 0) throw ConfigError("train.eval_seqs: must be positive");
  masking.validate();
  length.validate();
}

size_t Batch::masked_count() const {
  return static_cast<size_t>(
      std::count_if(target_ids.begin(), target_ids.end(), [](int32_t t) { return t != kIgnoreIndex; }));
}

Batch Batch::slice(size_t first, size_t count) const {
  if (first + count > num_seqs || count == 0) {
    throw DimensionError("Batch::slice: sequences [" + std::to_string(first) + ", " +
                         std::to_string(first + count) + ") of " + std::to_string(num_seqs));
  }
  Batch out;
  out.num_seqs = count;
  out.seq_len = seq_len;
  const size_t b = first * seq_len, e = (first + count) * seq_len;
  out.input_ids.assign(input_ids.begin() + b, input_ids.begin() + e);
  out.target_ids.assign(target_ids.begin() + b, target_ids.begin() + e);
  if (!key_valid.empty()) out.key_valid.assign(key_valid.begin() + b, key_valid.begin() + e);
  out.positions = positions;
  out.seq_keys.assign(seq_keys.begin() + first, seq_keys.begin() + first + count);
  return out;
}

Batch make_mlm_windows(std::span<const int32_t> stream, std::span<const size_t> starts,
                       size_t seq_len, const MaskingConfig& masking, size_t vocab_size,
                       uint64_t key) {
  if (stream.empty()) throw Error("make_mlm_batch: empty token stream");
  if (seq_len == 0 || starts.empty()) throw DimensionError("make_mlm_batch: empty batch");
  if (vocab_size <= static_cast<size_t>(kNumReserved)) {
    throw ConfigError("make_mlm_batch: vocab_size must exceed the reserved ids");
  }
  Batch batch;
  batch.num_seqs = starts.size();
  batch.seq_len = seq_len;
  const size_t total = batch.num_seqs * seq_len;
  batch.input_ids.resize(total, kPadId);
  batch.target_ids.assign(total, kIgnoreIndex);
  bool padded = false;
  for (size_t b = 0; b < batch.num_seqs; ++b) {
    for (size_t j = 0; j < seq_len; ++j) {
      const size_t src = starts[b] + j;
      if (src < stream.size()) {
        batch.input_ids[b * seq_len + j] = stream[src];
      } else {
        padded = true;
      }
    }
  }
  if (padded) {
    batch.key_valid.resize(total);
    for (size_t i = 0; i < total; ++i) batch.key_valid[i] = batch.input_ids[i] != kPadId;
  }
  batch.positions.resize(seq_len);
  for (size_t j = 0; j < seq_len; ++j) batch.positions[j] = static_cast<double>(j);

  const uint64_t mask_key = derive_key(key, kMaskStream);
  const uint64_t regular = vocab_size - kNumReserved;
  for (size_t i = 0; i < total; ++i) {
    const int32_t id = batch.input_ids[i];
    // [UNK] is ordinary text; the structural tokens are never predicted.
    if (id == kPadId || id == kMaskId || id == kClsId || id == kSepId) continue;
    const uint64_t k = derive_key(mask_key, i);
    if (unit_double(mix64(k)) >= masking.mask_prob) continue;
    batch.target_ids[i] = id;
    const double u = unit_double(mix64(k + 1));
    if (u < masking.mask_token_frac) {
      batch.input_ids[i] = kMaskId;
    } else if (u < masking.mask_token_frac + masking.random_token_frac) {
      batch.input_ids[i] = kNumReserved + static_cast<int32_t>(mix64(k + 2) % regular);
    }
  }
  const uint64_t dropout_key = derive_key(key, kDropoutStream);
  batch.seq_keys.resize(batch.num_seqs);
  for (size_t b = 0; b < batch.num_seqs; ++b) batch.seq_keys[b] = derive_key(dropout_key, b);
  return batch;
}

Batch make_mlm_batch(std::span<const int32_t> stream, const TrainConfig& cfg, size_t vocab_size,
                     size_t step) {
  const uint64_t key = derive_key(cfg.seed, step);
  const size_t seq_len = cfg.length.sample(derive_key(key, kLengthStream));
  const size_t num_seqs = cfg.batch_size * cfg.grad_accum_steps;
  Rng rng(derive_key(key, kWindowStream));
  const size_t span = stream.size() > seq_len ? stream.size() - seq_len + 1 : 1;
  std::vector<size_t> starts(num_seqs);
  for (auto& s : starts) s = rng.below(span);
  return make_mlm_windows(stream, starts, seq_len, cfg.masking, vocab_size, key);
}

template <class T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams p;
  Rng rng(derive_key(seed, 0x1417));
  p.embedding = Tensor<T>::randn({cfg.vocab_size, cfg.block.d_h}, rng, cfg.init_std, true);
  for (size_t l = 0; l < cfg.num_layers; ++l) {
    p.layers.push_back(GauParams<T>::init(cfg.block, rng, cfg.init_std));
  }
  if (!cfg.tie_embeddings) {
    p.output = Tensor<T>::randn({cfg.block.d_h, cfg.vocab_size}, rng, cfg.init_std, true);
  }
  return p;
}

template <class T>
NamedTensors<T> ModelParams<T>::named() {
  NamedTensors<T> out{{"embedding", &embedding}};
  for (size_t l = 0; l < layers.size(); ++l) {
    for (auto& entry : layers[l].named("layer" + std::to_string(l) + ".")) out.push_back(entry);
  }
  if (output) out.emplace_back("output", &*output);
  return out;
}

namespace {

template <class T>
void check_batch(const ModelConfig& cfg, const Batch& batch) {
  if (batch.seq_len > cfg.max_len) {
    throw DimensionError("sequence length " + std::to_string(batch.seq_len) +
                         " exceeds model.max_len " + std::to_string(cfg.max_len));
  }
  if (batch.input_ids.size() != batch.num_seqs * batch.seq_len ||
      batch.target_ids.size() != batch.input_ids.size() || batch.positions.size() != batch.seq_len) {
    throw DimensionError("model_forward: inconsistent batch layout");
  }
}

template <class T>
Tensor<T> encode(const ModelParams<T>& params, const ModelConfig& cfg, const Batch& batch,
                 Mode mode, std::vector<Tensor<T>>* states) {
  check_batch<T>(cfg, batch);
  for (int32_t id : batch.input_ids) {
    if (id < 0 || static_cast<size_t>(id) >= cfg.vocab_size) {
      throw DimensionError("model_forward: token id " + std::to_string(id) +
                           " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
  if (mode == Mode::train && batch.seq_keys.size() != batch.num_seqs) {
    throw DimensionError("model_forward: train mode needs one dropout key per sequence");
  }
  Tensor<T> h = var_norm(ops::embedding_lookup(params.embedding, batch.input_ids),
                         cfg.block.norm_eps, cfg.block.rms_mode);
  PackedBatch packed;
  packed.num_seqs = batch.num_seqs;
  packed.seq_len = batch.seq_len;
  packed.positions = batch.positions;
  packed.key_valid = batch.key_valid;
  packed.mode = mode;
  packed.seq_keys = batch.seq_keys;
  for (size_t l = 0; l < params.layers.size(); ++l) {
    if (states) states->push_back(h);
    packed.layer_salt = l + 1;
    h = gau_forward(h, params.layers[l], cfg.block, packed).out;
  }
  if (states) states->push_back(h);
  return h;
}

}  // namespace

template <class T>
ForwardResult<T> model_forward(const ModelParams<T>& params, const ModelConfig& cfg,
                               const Batch& batch, const ForwardOptions& options) {
  Tensor<T> h = encode<T>(params, cfg, batch, options.mode, nullptr);

  std::vector<int32_t> rows, targets;
  for (size_t i = 0; i < batch.target_ids.size(); ++i) {
    if (options.full_logits || batch.target_ids[i] != kIgnoreIndex) {
      rows.push_back(static_cast<int32_t>(i));
      targets.push_back(batch.target_ids[i]);
    }
  }
  ForwardResult<T> result;
  result.masked = batch.masked_count();
  if (rows.empty()) {
    result.loss = Tensor<T>::scalar(T(0));
    return result;
  }
  Tensor<T> selected = options.full_logits ? h : ops::embedding_lookup(h, rows);
  result.logits = params.output ? ops::matmul(selected, *params.output)
                                : ops::matmul_nt(selected, params.embedding);
  if (result.masked > 0) {
    result.loss = ops::softmax_cross_entropy(result.logits, targets, kIgnoreIndex,
                                             options.loss_denominator);
  } else {
    result.loss = Tensor<T>::scalar(T(0));
  }
  const size_t vocab = cfg.vocab_size;
  auto logits = result.logits.data();
  for (size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == kIgnoreIndex) continue;
    const auto row = logits.subspan(r * vocab, vocab);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    result.correct += best == targets[r];
  }
  if (options.full_logits) {
    result.logits = ops::reshape(result.logits, {batch.num_seqs, batch.seq_len, vocab});
  }
  return result;
}

template <class T>
std::vector<Tensor<T>> layer_states(const ModelParams<T>& params, const ModelConfig& cfg,
                                    const Batch& batch) {
  std::vector<Tensor<T>> states;
  encode(params, cfg, batch, Mode::eval, &states);
  return states;
}

double lr_at(size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                      std::to_string(cfg.total_steps));
  }
  if (cfg.total_steps == 0) return 0.0;
  const double total = static_cast<double>(cfg.total_steps);
  const double warmup = cfg.warmup_proportion * total;
  const double s = static_cast<double>(step);
  if (s <= warmup) return cfg.peak_lr * s / warmup;
  return cfg.peak_lr * (total - s) / (total - warmup);
}

AdamWConfig AdamWConfig::from(const TrainConfig& cfg) {
  return AdamWConfig{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay, cfg.no_decay};
}

template <class T>
AdamW<T>::AdamW(NamedTensors<T> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(std::move(cfg)) {
  for (auto& [name, p] : params_) {
    m_.push_back(Tensor<T>::zeros(p->shape()));
    v_.push_back(Tensor<T>::zeros(p->shape()));
  }
}

template <class T>
bool AdamW<T>::decays(const std::string& name) const {
  for (const auto& pattern : cfg_.no_decay) {
    if (name.find(pattern) != std::string::npos) return false;
  }
  return true;
}

template <class T>
void AdamW<T>::step(double lr) {
  for (auto& [name, p] : params_) {
    if (!p->has_grad()) continue;
    const auto g = p->grad();
    for (size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i]))) {
        throw NumericalError("non-finite gradient in parameter '" + name + "' at index " +
                             std::to_string(i) + " (step " + std::to_string(t_ + 1) + ")");
      }
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& [name, p] = params_[k];
    const double decay = decays(name) ? cfg_.weight_decay : 0.0;
    auto w = p->mutable_data();
    auto m = m_[k].mutable_data();
    auto v = v_[k].mutable_data();
    const bool has_grad = p->has_grad();
    const auto g = has_grad ? p->grad() : std::span<const T>();
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = has_grad ? double(g[i]) : 0.0;
      const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double wi = double(w[i]);
      w[i] = static_cast<T>(wi - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps) - lr * decay * wi);
    }
  }
}

template <class T>
NamedTensors<T> AdamW<T>::state() {
  NamedTensors<T> out;
  for (size_t k = 0; k < params_.size(); ++k) out.emplace_back("adam.m." + params_[k].first, &m_[k]);
  for (size_t k = 0; k < params_.size(); ++k) out.emplace_back("adam.v." + params_[k].first, &v_[k]);
  return out;
}

template <class T>
void AdamW<T>::zero_grad() {
  for (auto& [name, p] : params_) p->zero_grad();
}

template <class T>
EvalResult eval_mlm_accuracy(const ModelParams<T>& params, const ModelConfig& cfg,
                             std::span<const int32_t> stream, size_t eval_len, size_t num_seqs,
                             const MaskingConfig& masking, uint64_t key) {
  if (eval_len > cfg.max_len) {
    throw DimensionError("eval length " + std::to_string(eval_len) + " exceeds model.max_len " +
                         std::to_string(cfg.max_len));
  }
  if (num_seqs == 0) throw ConfigError("eval: number of sequences must be positive");
  const size_t span = stream.size() > eval_len ? stream.size() - eval_len : 0;
  std::vector<size_t> starts(num_seqs);
  for (size_t i = 0; i < num_seqs; ++i) {
    starts[i] = num_seqs == 1 ? 0 : (i * span) / (num_seqs - 1);
  }
  // One batch builds the masks so they do not depend on the chunking below.
  const Batch all = make_mlm_windows(stream, starts, eval_len, masking, cfg.vocab_size, key);
  constexpr size_t kChunk = 16;
  EvalResult result;
  double loss_sum = 0.0;
  size_t correct = 0;
  for (size_t first = 0; first < num_seqs; first += kChunk) {
    const Batch chunk = all.slice(first, std::min(kChunk, num_seqs - first));
    const size_t masked = chunk.masked_count();
    if (masked == 0) continue;
    auto fwd = model_forward(params, cfg, chunk, ForwardOptions{Mode::eval, false, 0.0});
    loss_sum += double(fwd.loss.item()) * double(masked);
    correct += fwd.correct;
    result.masked += masked;
  }
  if (result.masked > 0) {
    result.accuracy = double(correct) / double(result.masked);
    result.loss = loss_sum / double(result.masked);
  }
  return result;
}

#define GAU_INSTANTIATE_MODEL(T)                                                                  \
  template struct ModelParams<T>;                                                                 \
  template class AdamW<T>;                                                                        \
  template ForwardResult<T> model_forward(const ModelParams<T>&, const ModelConfig&, const Batch&, \
                                          const ForwardOptions&);                                 \
  template std::vector<Tensor<T>> layer_states(const ModelParams<T>&, const ModelConfig&,         \
                                               const Batch&);                                     \
  template EvalResult eval_mlm_accuracy(const ModelParams<T>&, const ModelConfig&,                \
                                        std::span<const int32_t>, size_t, size_t,                 \
                                        const MaskingConfig&, uint64_t);

GAU_INSTANTIATE_MODEL(float)
GAU_INSTANTIATE_MODEL(double)

}  // namespace gau
