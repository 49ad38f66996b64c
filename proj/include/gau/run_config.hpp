#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "gau/analysis.hpp"
#include "gau/bench.hpp"
#include "gau/model.hpp"
#include "gau/text.hpp"

namespace gau {

struct CorpusSettings {
  std::string path;  // empty: generate a synthetic corpus in memory
  size_t synthetic_bytes = 1 << 20;
  uint64_t synthetic_seed = 1;
  size_t vocab_max = 8000;
  double heldout_fraction = 0.05;
};

// A JSON tree of every setting with its default. Files and overrides may
// only set keys that already exist, with a compatible type; errors name the
// dotted key.
class RunConfig {
 public:
  RunConfig();

  // Merges a JSON object file.
  void merge_file(const std::filesystem::path& path);
  void merge(const nlohmann::json& patch, const std::string& origin);
  // "key.path=value"; value is parsed as JSON, falling back to a string.
  void apply_override(std::string_view assignment);
  void set(const std::string& key, const nlohmann::json& value);

  const nlohmann::json& tree() const { return tree_; }
  const nlohmann::json& at(const std::string& key) const;
  std::string dump() const { return tree_.dump(2) + "\n"; }
  void write(const std::filesystem::path& path) const;

  uint64_t seed() const;
  std::string out_dir() const;
  CorpusSettings corpus() const;
  // vocab_size 0 keeps model.vocab_size from the tree (0 there means "from
  // the corpus", which the caller must fill in).
  ModelConfig model(size_t vocab_size) const;
  TrainConfig train() const;
  AttnReportConfig analysis() const;
  BenchConfig bench() const;
  std::vector<size_t> eval_lengths() const;

  // Builds every section so that bad values fail before any compute.
  void validate() const;

 private:
  template <class T>
  T get(const std::string& key) const;

  nlohmann::json tree_;
};

// Loads the file corpus or generates the synthetic one.
TokenCorpus load_run_corpus(const CorpusSettings& settings);

}  // namespace gau
