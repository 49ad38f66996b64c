#include "gau/train.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "gau/errors.hpp"

namespace gau {

namespace {

constexpr uint64_t kEvalStream = 0xE7A1;

const char* const kStepTensor = "meta.step";
const char* const kAdamStepTensor = "meta.adam_step";

}  // namespace

Trainer::Trainer(ModelConfig model_cfg, TrainConfig train_cfg, const TokenCorpus& corpus)
    : model_cfg_(std::move(model_cfg)),
      train_cfg_(std::move(train_cfg)),
      corpus_(corpus),
      params_((model_cfg_.validate(), train_cfg_.validate(),
               ModelParams<float>::init(model_cfg_, train_cfg_.seed))),
      optimizer_(params_.named(), AdamWConfig::from(train_cfg_)) {
  if (corpus_.vocab.size() != model_cfg_.vocab_size) {
    throw ConfigError("model.vocab_size: " + std::to_string(model_cfg_.vocab_size) +
                      " does not match the corpus vocabulary of " +
                      std::to_string(corpus_.vocab.size()));
  }
  if (train_cfg_.length.max_length() > model_cfg_.max_len) {
    throw ConfigError("train.length: longest training length " +
                      std::to_string(train_cfg_.length.max_length()) + " exceeds model.max_len " +
                      std::to_string(model_cfg_.max_len));
  }
  if (corpus_.train.empty()) throw ConfigError("corpus: training split is empty");
}

std::optional<MetricsRow> Trainer::train_step() {
  if (step_ >= train_cfg_.total_steps) {
    throw Error("train_step: already at total_steps " + std::to_string(train_cfg_.total_steps));
  }
  const Batch full = make_mlm_batch(corpus_.train, train_cfg_, model_cfg_.vocab_size, step_);
  const size_t masked = full.masked_count();
  ++step_;
  if (masked == 0) return std::nullopt;

  optimizer_.zero_grad();
  double loss = 0.0;
  size_t correct = 0;
  const size_t micro = train_cfg_.batch_size;
  for (size_t first = 0; first < full.num_seqs; first += micro) {
    const Batch part = full.slice(first, micro);
    if (part.masked_count() == 0) continue;
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto fwd = model_forward(params_, model_cfg_, part,
                             ForwardOptions{Mode::train, false, static_cast<double>(masked)});
    loss += static_cast<double>(fwd.loss.item());
    correct += fwd.correct;
    tape.backward(fwd.loss);
  }
  const double lr = lr_at(step_, train_cfg_);
  optimizer_.step(lr);
  return MetricsRow{step_, loss, lr, double(correct) / double(masked), full.seq_len};
}

EvalResult Trainer::evaluate(size_t eval_len) const {
  const auto& stream = corpus_.heldout.empty() ? corpus_.train : corpus_.heldout;
  return eval_mlm_accuracy(params_, model_cfg_, stream, eval_len, train_cfg_.eval_seqs,
                           train_cfg_.masking, derive_key(train_cfg_.seed, kEvalStream));
}

std::vector<CheckpointTensor> Trainer::checkpoint() const {
  auto& self = const_cast<Trainer&>(*this);  // named() hands out mutable pointers
  std::vector<CheckpointTensor> out;
  for (auto& [name, t] : self.params_.named()) out.push_back(to_checkpoint(name, *t));
  for (auto& [name, t] : self.optimizer_.state()) out.push_back(to_checkpoint(name, *t));
  out.push_back(to_checkpoint(kStepTensor, Tensor<double>::from({1}, {double(step_)})));
  out.push_back(
      to_checkpoint(kAdamStepTensor, Tensor<double>::from({1}, {double(optimizer_.steps())})));
  return out;
}

void Trainer::save(const std::filesystem::path& path) const {
  const auto entries = checkpoint();
  write_checkpoint(path, entries);
}

void Trainer::load(const std::filesystem::path& path) {
  const auto entries = read_checkpoint(path);
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto find = [&](const std::string& name) -> const CheckpointTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointError("checkpoint " + path.string() + " has no tensor '" + name + "'");
    }
    return *it->second;
  };
  NamedTensors<float> targets = params_.named();
  for (auto& entry : optimizer_.state()) targets.push_back(entry);
  if (entries.size() != targets.size() + 2) {
    throw CheckpointError("checkpoint " + path.string() + " holds " + std::to_string(entries.size()) +
                          " tensors; this configuration expects " + std::to_string(targets.size() + 2));
  }
  for (auto& [name, t] : targets) restore_tensor(find(name), *t);
  auto scalar = [&](const char* name) {
    Tensor<double> v = Tensor<double>::zeros({1});
    restore_tensor(find(name), v);
    return static_cast<size_t>(v.item());
  };
  const size_t step = scalar(kStepTensor);
  if (step > train_cfg_.total_steps) {
    throw CheckpointError("checkpoint step " + std::to_string(step) + " exceeds train.total_steps " +
                          std::to_string(train_cfg_.total_steps));
  }
  step_ = step;
  optimizer_.set_steps(scalar(kAdamStepTensor));
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss,lr,masked_acc,seq_len\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%zu\n", r.step, r.loss, r.lr, r.masked_acc,
                  r.seq_len);
    out << buf;
  }
  if (!out) throw IoError("error writing " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,loss,lr,masked_acc,seq_len") {
    throw IoError(path.string() + ": unexpected metrics header '" + line + "'");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricsRow r;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%zu", &r.step, &r.loss, &r.lr, &r.masked_acc,
                    &r.seq_len) != 5) {
      throw IoError(path.string() + ": malformed metrics row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

namespace {

void write_eval_csv(const std::filesystem::path& path, const std::vector<EvalRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,eval_len,masked_acc,loss,masked_tokens\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%zu\n", r.step, r.eval_len,
                  r.result.accuracy, r.result.loss, r.result.masked);
    out << buf;
  }
  if (!out) throw IoError("error writing " + path.string());
}

}  // namespace

TrainResult train_loop(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const TokenCorpus& corpus, const TrainOptions& options) {
  Trainer trainer(model_cfg, train_cfg, corpus);
  TrainResult result;
  const bool write = !options.out_dir.empty();
  const auto metrics_path = options.out_dir / "metrics.csv";
  if (options.resume) {
    trainer.load(*options.resume);
    if (write && std::filesystem::exists(metrics_path)) {
      for (const auto& r : read_metrics_csv(metrics_path)) {
        if (r.step <= trainer.step()) result.rows.push_back(r);
      }
    }
  }
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    corpus.vocab.save(options.out_dir / "vocab.txt");
  }
  const size_t eval_len = trainer.default_eval_len();
  auto record_eval = [&](const EvalResult& r) {
    EvalRow row{trainer.step(), eval_len, r};
    result.evals.push_back(row);
    if (options.on_eval) options.on_eval(row);
  };
  result.initial_eval = trainer.evaluate(eval_len);
  record_eval(result.initial_eval);
  while (trainer.step() < train_cfg.total_steps) {
    if (auto row = trainer.train_step()) {
      result.rows.push_back(*row);
      if (options.on_step) options.on_step(*row);
    }
    if (train_cfg.eval_every > 0 && trainer.step() % train_cfg.eval_every == 0 &&
        trainer.step() < train_cfg.total_steps) {
      record_eval(trainer.evaluate(eval_len));
    }
  }
  result.final_eval = trainer.evaluate(eval_len);
  if (result.evals.back().step != trainer.step()) record_eval(result.final_eval);
  if (write) {
    write_metrics_csv(metrics_path, result.rows);
    write_eval_csv(options.out_dir / "eval.csv", result.evals);
    trainer.save(options.out_dir / "checkpoint.bin");
  }
  return result;
}

}  // namespace gau
