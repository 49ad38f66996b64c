#include "gau/run_config.hpp"

#include <fstream>
#include <sstream>

#include "gau/errors.hpp"
#include "gau/text.hpp"

namespace gau {

using nlohmann::json;

namespace {

json default_tree() {
  return json{
      {"seed", 0},
      {"out", "runs/default"},
      {"corpus",
       {{"path", ""},
        {"synthetic_bytes", 1 << 20},
        {"synthetic_seed", 1},
        {"vocab_max", 8000},
        {"heldout_fraction", 0.05}}},
      {"model",
       {{"num_layers", 4},
        {"d_h", 128},
        {"d_ff", 256},
        {"s", 32},
        {"vocab_size", 0},
        {"max_len", 512},
        {"tie_embeddings", true},
        {"init_std", 0.02},
        {"hidden_dropout", 0.1},
        {"attn_dropout", 0.1},
        {"norm_eps", 1e-6},
        {"rms_mode", false},
        {"post_norm", true},
        {"rope", {{"enabled", true}, {"both", true}, {"theta_base", 10000.0}}}}},
      {"kernel",
       {{"variant", "softmax_plus"}, {"denom", "ns"}, {"base_len", 512.0}, {"eps", 1e-12}}},
      {"train",
       {{"steps", 2000},
        {"batch_size", 32},
        {"grad_accum_steps", 1},
        {"peak_lr", 1e-3},
        {"warmup_proportion", 0.1},
        {"adam_beta1", 0.9},
        {"adam_beta2", 0.999},
        {"adam_eps", 1e-6},
        {"weight_decay", 0.01},
        {"no_decay", {"gamma_", "beta_", "embedding"}},
        {"mask_prob", 0.15},
        {"mask_token_frac", 0.8},
        {"random_token_frac", 0.1},
        {"length", {{"strategy", "fixed"}, {"lengths", {64}}, {"weights", json::array()}}},
        {"eval_every", 0},
        {"eval_seqs", 64}}},
      {"eval", {{"lengths", {32, 64, 128}}, {"runs", json::array()}}},
      {"analysis",
       {{"kernels", {"qk", "softmax", "relu2"}},
        {"lengths", {512}},
        {"seeds", {0, 1, 2, 3, 4}},
        {"s", 128},
        {"random_init", false},
        {"run", ""},
        {"layer", 0},
        {"rank_tol", kDefaultRankTol},
        {"sparsity_tol", kDefaultSparsityTol}}},
      {"bench",
       {{"lengths", {256, 512, 1024}},
        {"repeats", 5},
        {"warmup", 3},
        {"d_h", 128},
        {"s", 32},
        {"heads", 4},
        {"dropout", 0.1},
        {"mem_limit_bytes", 0}}},
  };
}

const char* type_name(const json& v) {
  if (v.is_boolean()) return "a boolean";
  if (v.is_number_unsigned()) return "a non-negative integer";
  if (v.is_number_integer()) return "an integer";
  if (v.is_number()) return "a number";
  if (v.is_string()) return "a string";
  if (v.is_array()) return "an array";
  if (v.is_object()) return "an object";
  return "null";
}

bool compatible(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<int64_t>() >= 0);
  }
  if (def.is_number_float()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

json::json_pointer pointer(const std::string& key) {
  std::string p;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("malformed config key '" + key + "'");
    p += "/" + part;
  }
  if (p.empty()) throw ConfigError("empty config key");
  return json::json_pointer(p);
}

template <class T>
std::vector<T> array_of(const json& v, const std::string& key) {
  std::vector<T> out;
  for (const auto& e : v) {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!e.is_string()) throw ConfigError(key + ": entries must be strings");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!e.is_number()) throw ConfigError(key + ": entries must be numbers");
    } else {
      if (!(e.is_number_unsigned() || (e.is_number_integer() && e.get<int64_t>() >= 0))) {
        throw ConfigError(key + ": entries must be non-negative integers");
      }
    }
    out.push_back(e.get<T>());
  }
  return out;
}

}  // namespace

RunConfig::RunConfig() : tree_(default_tree()) {}

const json& RunConfig::at(const std::string& key) const {
  const auto p = pointer(key);
  if (!tree_.contains(p)) throw ConfigError("unknown config key '" + key + "'");
  return tree_.at(p);
}

void RunConfig::set(const std::string& key, const json& value) {
  const auto p = pointer(key);
  if (!tree_.contains(p)) throw ConfigError("unknown config key '" + key + "'");
  json& slot = tree_.at(p);
  if (slot.is_object()) {
    merge(value, "value of '" + key + "'");
    return;
  }
  if (!compatible(slot, value)) {
    throw ConfigError("config key '" + key + "' expects " + type_name(slot) + ", got " +
                      value.dump());
  }
  slot = value;
}

void RunConfig::merge(const json& patch, const std::string& origin) {
  if (!patch.is_object()) throw ConfigError(origin + ": expected a JSON object");
  std::function<void(const json&, const std::string&)> walk = [&](const json& node,
                                                                  const std::string& prefix) {
    for (auto it = node.begin(); it != node.end(); ++it) {
      const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
      const auto p = pointer(key);
      if (!tree_.contains(p)) throw ConfigError(origin + ": unknown config key '" + key + "'");
      if (tree_.at(p).is_object()) {
        if (!it.value().is_object()) {
          throw ConfigError(origin + ": config key '" + key + "' expects an object");
        }
        walk(it.value(), key);
      } else {
        set(key, it.value());
      }
    }
  };
  walk(patch, "");
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  json patch;
  try {
    patch = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  merge(patch, path.string());
}

void RunConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  // A bare word such as softmax stays a string; numbers and arrays parse.
  if (at(key).is_string() && !value.is_string()) value = text;
  set(key, value);
}

void RunConfig::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << dump();
  if (!out) throw IoError("error writing " + path.string());
}

template <class T>
T RunConfig::get(const std::string& key) const {
  return at(key).get<T>();
}

uint64_t RunConfig::seed() const { return get<uint64_t>("seed"); }

std::string RunConfig::out_dir() const { return get<std::string>("out"); }

CorpusSettings RunConfig::corpus() const {
  CorpusSettings c;
  c.path = get<std::string>("corpus.path");
  c.synthetic_bytes = get<size_t>("corpus.synthetic_bytes");
  c.synthetic_seed = get<uint64_t>("corpus.synthetic_seed");
  c.vocab_max = get<size_t>("corpus.vocab_max");
  c.heldout_fraction = get<double>("corpus.heldout_fraction");
  if (c.path.empty() && c.synthetic_bytes == 0) {
    throw ConfigError("corpus.synthetic_bytes must be positive when corpus.path is empty");
  }
  if (!(c.heldout_fraction >= 0.0 && c.heldout_fraction < 1.0)) {
    throw ConfigError("corpus.heldout_fraction must lie in [0, 1)");
  }
  return c;
}

ModelConfig RunConfig::model(size_t vocab_size) const {
  ModelConfig m;
  m.num_layers = get<size_t>("model.num_layers");
  m.vocab_size = vocab_size != 0 ? vocab_size : get<size_t>("model.vocab_size");
  m.max_len = get<size_t>("model.max_len");
  m.tie_embeddings = get<bool>("model.tie_embeddings");
  m.init_std = get<double>("model.init_std");
  BlockConfig& b = m.block;
  b.d_h = get<size_t>("model.d_h");
  b.d_ff = get<size_t>("model.d_ff");
  b.s = get<size_t>("model.s");
  b.hidden_dropout = get<double>("model.hidden_dropout");
  b.attn_dropout = get<double>("model.attn_dropout");
  b.norm_eps = get<double>("model.norm_eps");
  b.rms_mode = get<bool>("model.rms_mode");
  b.post_norm = get<bool>("model.post_norm");
  b.rope_enabled = get<bool>("model.rope.enabled");
  b.rope_both = get<bool>("model.rope.both");
  b.rope = RoPEConfig{b.s, get<double>("model.rope.theta_base")};
  try {
    b.kernel.variant = parse_kernel_variant(get<std::string>("kernel.variant"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("kernel.variant: ") + e.what());
  }
  if (b.kernel.variant == KernelVariant::relu2_div) {
    try {
      b.kernel.denom = parse_score_denom(get<std::string>("kernel.denom"));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("kernel.denom: ") + e.what());
    }
  }
  b.kernel.s = b.s;
  b.kernel.d_h = b.d_h;
  b.kernel.base_len = get<double>("kernel.base_len");
  b.kernel.eps = get<double>("kernel.eps");
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.total_steps = get<size_t>("train.steps");
  t.batch_size = get<size_t>("train.batch_size");
  t.grad_accum_steps = get<size_t>("train.grad_accum_steps");
  t.peak_lr = get<double>("train.peak_lr");
  t.warmup_proportion = get<double>("train.warmup_proportion");
  t.adam_beta1 = get<double>("train.adam_beta1");
  t.adam_beta2 = get<double>("train.adam_beta2");
  t.adam_eps = get<double>("train.adam_eps");
  t.weight_decay = get<double>("train.weight_decay");
  t.no_decay = array_of<std::string>(at("train.no_decay"), "train.no_decay");
  t.masking.mask_prob = get<double>("train.mask_prob");
  t.masking.mask_token_frac = get<double>("train.mask_token_frac");
  t.masking.random_token_frac = get<double>("train.random_token_frac");
  const auto strategy = get<std::string>("train.length.strategy");
  const auto lengths = array_of<size_t>(at("train.length.lengths"), "train.length.lengths");
  if (strategy == "fixed") {
    if (lengths.size() != 1) {
      throw ConfigError("train.length.lengths must hold exactly one length for strategy fixed");
    }
    t.length = LengthStrategy::fixed_length(lengths[0]);
  } else if (strategy == "diff") {
    if (lengths.size() == 1) {
      t.length = LengthStrategy::diff(lengths[0]);
    } else {
      t.length.kind = LengthKind::diff;
      t.length.lengths = lengths;
    }
  } else {
    throw ConfigError("train.length.strategy must be 'fixed' or 'diff', got '" + strategy + "'");
  }
  t.length.weights = array_of<double>(at("train.length.weights"), "train.length.weights");
  t.seed = seed();
  t.eval_every = get<size_t>("train.eval_every");
  t.eval_seqs = get<size_t>("train.eval_seqs");
  return t;
}

AttnReportConfig RunConfig::analysis() const {
  AttnReportConfig a;
  a.kernels = array_of<std::string>(at("analysis.kernels"), "analysis.kernels");
  a.lengths = array_of<size_t>(at("analysis.lengths"), "analysis.lengths");
  a.seeds = array_of<uint64_t>(at("analysis.seeds"), "analysis.seeds");
  a.s = get<size_t>("analysis.s");
  a.rank_tol = get<double>("analysis.rank_tol");
  a.sparsity_tol = get<double>("analysis.sparsity_tol");
  a.base_len = get<double>("kernel.base_len");
  a.source = get<bool>("analysis.random_init") ? "random-init" : "trained";
  return a;
}

BenchConfig RunConfig::bench() const {
  BenchConfig b;
  b.lengths = array_of<size_t>(at("bench.lengths"), "bench.lengths");
  b.repeats = get<size_t>("bench.repeats");
  b.warmup = get<size_t>("bench.warmup");
  b.d_h = get<size_t>("bench.d_h");
  b.s = get<size_t>("bench.s");
  b.heads = get<size_t>("bench.heads");
  b.dropout = get<double>("bench.dropout");
  b.mem_limit_bytes = get<size_t>("bench.mem_limit_bytes");
  b.gau_kernel = model(1).block.kernel.variant;
  b.seed = seed();
  return b;
}

std::vector<size_t> RunConfig::eval_lengths() const {
  return array_of<size_t>(at("eval.lengths"), "eval.lengths");
}

void RunConfig::validate() const {
  corpus();
  ModelConfig m = model(0);
  if (m.vocab_size == 0) m.vocab_size = kNumReserved + 1;  // filled from the corpus later
  m.validate();
  const TrainConfig t = train();
  t.validate();
  if (t.length.max_length() > m.max_len) {
    throw ConfigError("train.length.lengths: longest length " +
                      std::to_string(t.length.max_length()) + " exceeds model.max_len " +
                      std::to_string(m.max_len));
  }
  for (size_t n : eval_lengths()) {
    if (n == 0 || n > m.max_len) {
      throw ConfigError("eval.lengths: " + std::to_string(n) + " must lie in [1, model.max_len]");
    }
  }
  analysis().validate();
  if (get<size_t>("analysis.layer") >= m.num_layers) {
    throw ConfigError("analysis.layer must be below model.num_layers");
  }
  bench().validate();
}

TokenCorpus load_run_corpus(const CorpusSettings& settings) {
  std::vector<std::string> lines;
  if (settings.path.empty()) {
    const std::string text = generate_corpus(settings.synthetic_seed, settings.synthetic_bytes);
    size_t pos = 0;
    while (pos < text.size()) {
      size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      lines.push_back(text.substr(pos, end - pos));
      pos = end + 1;
    }
  } else {
    lines = read_lines(settings.path);
  }
  return encode_corpus(lines, settings.vocab_max, settings.heldout_fraction);
}

}  // namespace gau
