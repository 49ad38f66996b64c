#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "gau/checkpoint.hpp"
#include "gau/model.hpp"
#include "gau/text.hpp"

namespace gau {

struct MetricsRow {
  size_t step = 0;  // 1-based index of the completed update
  double loss = 0.0;
  double lr = 0.0;
  double masked_acc = 0.0;
  size_t seq_len = 0;
};

struct EvalRow {
  size_t step = 0;
  size_t eval_len = 0;
  EvalResult result;
};

// Owns parameters and optimizer state for one training run. Every step is a
// pure function of (config, corpus, step index, state), so a resumed run
// reproduces an uninterrupted one bit for bit.
class Trainer {
 public:
  Trainer(ModelConfig model_cfg, TrainConfig train_cfg, const TokenCorpus& corpus);

  size_t step() const { return step_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  ModelParams<float>& params() { return params_; }
  const ModelParams<float>& params() const { return params_; }

  // Runs update step()+1. Returns nothing when the batch had no maskable
  // token, in which case parameters are unchanged but the step counts.
  std::optional<MetricsRow> train_step();

  // Held-out split (the training stream when there is none), keyed so
  // repeated calls are identical.
  EvalResult evaluate(size_t eval_len) const;
  size_t default_eval_len() const { return train_cfg_.length.max_length(); }

  std::vector<CheckpointTensor> checkpoint() const;
  void save(const std::filesystem::path& path) const;
  // Restores parameters, optimizer moments and the step counter. Tensor
  // names and shapes must match this trainer's configuration.
  void load(const std::filesystem::path& path);

 private:
  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  const TokenCorpus& corpus_;
  ModelParams<float> params_;
  AdamW<float> optimizer_;
  size_t step_ = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::optional<std::filesystem::path> resume;
  std::function<void(const MetricsRow&)> on_step;
  std::function<void(const EvalRow&)> on_eval;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::vector<EvalRow> evals;
  EvalResult initial_eval;  // before the first update of this run
  EvalResult final_eval;
};

// Writes metrics.csv, eval.csv, vocab.txt and checkpoint.bin under out_dir.
TrainResult train_loop(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const TokenCorpus& corpus, const TrainOptions& options = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace gau
