#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "gau/analysis.hpp"
#include "gau/bench.hpp"
#include "gau/errors.hpp"
#include "gau/gau.hpp"
#include "gau/run_config.hpp"
#include "gau/train.hpp"

namespace gau::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App& sub, Common& c) {
  sub.add_option("--config", c.config, "JSON config file merged over the defaults");
  sub.add_option("--seed", c.seed, "Run seed");
  sub.add_option("--out", c.out, "Output directory");
  sub.add_option("--override", c.overrides, "key.path=value, applied after --config")
      ->allow_extra_args(false);
}

// defaults <- --config <- --override <- --seed/--out
RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg.merge_file(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) cfg.set("seed", *c.seed);
  if (!c.out.empty()) cfg.set("out", c.out);
  return cfg;
}

// "64,128,256" -> [64,128,256]; "" -> [].
json parse_list(const std::string& text, bool numeric, const std::string& flag) {
  json arr = json::array();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    if (!numeric) {
      arr.push_back(item);
      continue;
    }
    size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item[0] == '-') {
      throw ConfigError(flag + ": '" + item + "' is not a non-negative integer");
    }
    arr.push_back(v);
  }
  return arr;
}

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path dir = cfg.out_dir();
  fs::create_directories(dir);
  cfg.write(dir / "resolved_config.json");
  return dir;
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

ModelConfig resolve_model(const RunConfig& cfg, const TokenCorpus& corpus) {
  const size_t configured = cfg.at("model.vocab_size").get<size_t>();
  if (configured != 0 && configured != corpus.vocab.size()) {
    throw ConfigError("model.vocab_size is " + std::to_string(configured) +
                      " but the corpus vocabulary has " + std::to_string(corpus.vocab.size()) +
                      " entries");
  }
  ModelConfig m = cfg.model(corpus.vocab.size());
  m.validate();
  return m;
}

// A finished training run reloaded from its directory.
struct LoadedRun {
  RunConfig cfg;
  TokenCorpus corpus;
  ModelConfig model;
  TrainConfig train;
  std::unique_ptr<Trainer> trainer;
};

std::unique_ptr<LoadedRun> load_run(const fs::path& dir) {
  auto run = std::make_unique<LoadedRun>();
  run->cfg.merge_file(dir / "resolved_config.json");
  run->cfg.validate();
  run->corpus = load_run_corpus(run->cfg.corpus());
  run->model = resolve_model(run->cfg, run->corpus);
  run->train = run->cfg.train();
  run->trainer = std::make_unique<Trainer>(run->model, run->train, run->corpus);
  run->trainer->load(dir / "checkpoint.bin");
  return run;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

int cmd_train(RunConfig cfg, std::optional<size_t> steps, const std::string& resume,
              std::ostream& out) {
  if (steps) cfg.set("train.steps", *steps);
  cfg.validate();
  const TokenCorpus corpus = load_run_corpus(cfg.corpus());
  const ModelConfig model = resolve_model(cfg, corpus);
  const TrainConfig train = cfg.train();
  const fs::path dir = prepare_out(cfg);
  out << "corpus: " << corpus.train.size() << " train tokens, " << corpus.heldout.size()
      << " held-out tokens, vocab " << corpus.vocab.size() << "\n";
  TrainOptions opts;
  opts.out_dir = dir;
  if (!resume.empty()) opts.resume = fs::path(resume);
  const size_t every = std::max<size_t>(1, train.total_steps / 20);
  opts.on_step = [&](const MetricsRow& r) {
    if (r.step % every == 0 || r.step == train.total_steps) {
      out << "step " << r.step << " loss " << fmt("%.4f", r.loss) << " acc "
          << fmt("%.4f", r.masked_acc) << " lr " << fmt("%.3e", r.lr) << "\n";
    }
  };
  const TrainResult res = train_loop(model, train, corpus, opts);
  out << "initial eval: loss " << fmt("%.4f", res.initial_eval.loss) << " acc "
      << fmt("%.4f", res.initial_eval.accuracy) << "\n";
  out << "final eval:   loss " << fmt("%.4f", res.final_eval.loss) << " acc "
      << fmt("%.4f", res.final_eval.accuracy) << "\n";
  out << "wrote " << (dir / "checkpoint.bin").string() << "\n";
  return kExitOk;
}

int cmd_eval_lengths(RunConfig cfg, std::ostream& out) {
  cfg.validate();
  const auto runs = cfg.at("eval.runs").get<std::vector<std::string>>();
  if (runs.empty()) throw ConfigError("eval.runs: pass at least one --run DIR");
  std::vector<size_t> lengths;
  for (const auto& e : cfg.at("eval.lengths")) lengths.push_back(e.get<size_t>());
  const fs::path dir = prepare_out(cfg);
  auto csv = open_csv(dir / "eval_lengths.csv");
  csv << "run,kernel,train_len,eval_len,masked_acc,loss,masked_tokens,rel_change\n";
  for (const auto& run_dir : runs) {
    if (lengths.empty()) break;
    const auto run = load_run(run_dir);
    const size_t max_len = run->model.max_len;
    for (size_t n : lengths) {
      if (n > max_len) {
        throw DimensionError("eval.lengths: " + std::to_string(n) + " exceeds model.max_len " +
                             std::to_string(max_len) + " of run " + run_dir);
      }
    }
    const size_t train_len = run->trainer->default_eval_len();
    const EvalResult ref = run->trainer->evaluate(train_len);
    const std::string kernel = run->model.block.kernel.name();
    for (size_t n : lengths) {
      const EvalResult r = n == train_len ? ref : run->trainer->evaluate(n);
      const double rel = ref.accuracy > 0.0 ? (r.accuracy - ref.accuracy) / ref.accuracy : 0.0;
      csv << run_dir << ',' << kernel << ',' << train_len << ',' << n << ','
          << fmt("%.10g", r.accuracy) << ',' << fmt("%.10g", r.loss) << ',' << r.masked << ','
          << fmt("%.10g", rel) << "\n";
      out << kernel << " trained@" << train_len << " eval@" << n << ": acc "
          << fmt("%.4f", r.accuracy) << " loss " << fmt("%.4f", r.loss) << " change "
          << fmt("%+.2f%%", 100.0 * rel) << "\n";
    }
  }
  out << "wrote " << (dir / "eval_lengths.csv").string() << "\n";
  return kExitOk;
}

int cmd_analyze(RunConfig cfg, std::ostream& out) {
  cfg.validate();
  AttnReportConfig report = cfg.analysis();
  const bool random_init = cfg.at("analysis.random_init").get<bool>();
  const std::string run_dir = cfg.at("analysis.run").get<std::string>();
  std::unique_ptr<LoadedRun> run;
  QkSource source;
  if (random_init) {
    if (!run_dir.empty()) {
      throw ConfigError("analysis.run and analysis.random_init are mutually exclusive");
    }
    const size_t s = report.s;
    source = [s](size_t n, uint64_t seed) { return random_qk(n, s, seed); };
  } else {
    if (run_dir.empty()) {
      throw ConfigError("analysis.run: pass --run DIR or --random-init");
    }
    run = load_run(run_dir);
    const size_t layer = cfg.at("analysis.layer").get<size_t>();
    if (layer >= run->model.num_layers) {
      throw ConfigError("analysis.layer " + std::to_string(layer) + " >= the run's " +
                        std::to_string(run->model.num_layers) + " layers");
    }
    report.s = run->model.block.s;
    report.d_scale = run->model.block.kernel.d_h;
    report.base_len = run->model.block.kernel.base_len;
    report.source = "trained-toy layer=" + std::to_string(layer);
    const auto& stream = run->corpus.heldout.empty() ? run->corpus.train : run->corpus.heldout;
    source = trained_qk_source(run->trainer->params(), run->model, stream, layer);
  }
  report.validate();
  const fs::path dir = prepare_out(cfg);
  const auto rows = attn_report(report, source);
  auto csv = open_csv(dir / "attn_report.csv");
  write_attn_csv(csv, report, rows);
  for (const auto& r : rows) {
    out << r.kernel << " n=" << r.n << " seed=" << r.seed << ": rank " << r.rank << " ("
        << fmt("%.4f", r.rank_ratio) << ") sparsity " << fmt("%.4f", r.sparsity) << "\n";
  }
  out << "wrote " << (dir / "attn_report.csv").string() << "\n";
  return kExitOk;
}

int cmd_bench(RunConfig cfg, std::ostream& out) {
  cfg.validate();
  const BenchConfig bench = cfg.bench();
  const fs::path dir = prepare_out(cfg);
  const auto rows = run_bench(bench);
  auto csv = open_csv(dir / "bench.csv");
  write_bench_csv(csv, rows);
  write_bench_csv(out, rows);
  out << "peak memory is live tracked tensor bytes, not device memory\n";
  out << "wrote " << (dir / "bench.csv").string() << "\n";
  return kExitOk;
}

int cmd_count_params(RunConfig cfg, std::ostream& out) {
  cfg.validate();
  const ModelConfig m = cfg.model(kNumReserved + 1);
  const uint64_t d = m.block.d_h, s = m.block.s;
  const uint64_t heads = cfg.at("bench.heads").get<uint64_t>();
  if (heads == 0 || d % heads != 0) throw ConfigError("bench.heads must divide model.d_h");
  struct Row {
    std::string component;
    uint64_t d_ff;
    ParamCount count;
  };
  auto sum = [](ParamCount a, ParamCount b) {
    return ParamCount{a.headline + b.headline, a.exact + b.exact};
  };
  const auto gau = count_params(BlockKind::gau, d, m.block.d_ff, s, heads);
  const auto gau2 = count_params(BlockKind::gau, d, 2 * d, s, heads);
  const auto mhsa = count_params(BlockKind::mhsa, d, 4 * d, s, heads);
  const auto ffn = count_params(BlockKind::ffn, d, 4 * d, s, heads);
  const std::vector<Row> rows = {
      {"gau", m.block.d_ff, gau},
      {"mhsa", 0, mhsa},
      {"ffn", 4 * d, ffn},
      {"gau_x2", 2 * d, ParamCount{2 * gau2.headline, 2 * gau2.exact}},
      {"mhsa_ffn", 4 * d, sum(mhsa, ffn)},
  };
  const fs::path dir = prepare_out(cfg);
  auto csv = open_csv(dir / "params.csv");
  csv << "component,d_h,d_ff,s,heads,headline,exact,delta\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %6s %6s %14s %14s %10s\n", "component", "d_h", "d_ff",
                "headline", "exact", "delta");
  out << line;
  for (const auto& r : rows) {
    const uint64_t delta = r.count.exact - r.count.headline;
    csv << r.component << ',' << d << ',' << r.d_ff << ',' << s << ',' << heads << ','
        << r.count.headline << ',' << r.count.exact << ',' << delta << "\n";
    std::snprintf(line, sizeof line, "%-10s %6llu %6llu %14llu %14llu %10llu\n",
                  r.component.c_str(), (unsigned long long)d, (unsigned long long)r.d_ff,
                  (unsigned long long)r.count.headline, (unsigned long long)r.count.exact,
                  (unsigned long long)delta);
    out << line;
  }
  out << "wrote " << (dir / "params.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gated attention unit toolkit"};
  app.require_subcommand(1);

  Common train_c, eval_c, analyze_c, bench_c, count_c;

  auto* train = app.add_subcommand("train", "Train a masked language model");
  add_common(*train, train_c);
  std::optional<size_t> steps;
  std::string resume;
  train->add_option("--steps", steps, "Override train.steps");
  train->add_option("--resume", resume, "Continue from this checkpoint");

  auto* eval = app.add_subcommand("eval-lengths", "Evaluate trained runs across lengths");
  add_common(*eval, eval_c);
  std::vector<std::string> eval_runs;
  std::optional<std::string> eval_lengths;
  eval->add_option("--run", eval_runs, "Training output directory (repeatable)");
  eval->add_option("--lengths", eval_lengths, "Comma-separated evaluation lengths");

  auto* analyze = app.add_subcommand("analyze", "Rank/sparsity/entropy report of attention");
  add_common(*analyze, analyze_c);
  bool random_init = false;
  std::string analyze_run;
  std::optional<std::string> kernels, analyze_lengths, seeds;
  std::optional<size_t> layer;
  analyze->add_flag("--random-init", random_init, "Use i.i.d. Gaussian q and k");
  analyze->add_option("--run", analyze_run, "Training output directory to analyse");
  analyze->add_option("--kernels", kernels, "Comma-separated kernels");
  analyze->add_option("--lengths,--n", analyze_lengths, "Comma-separated lengths");
  analyze->add_option("--seeds", seeds, "Comma-separated seeds");
  analyze->add_option("--layer", layer, "Layer of a trained run");

  auto* bench = app.add_subcommand("bench", "Time and memory of GAU vs MHSA+FFN");
  add_common(*bench, bench_c);
  std::optional<std::string> bench_lengths;
  std::optional<size_t> repeats;
  bench->add_option("--lengths", bench_lengths, "Comma-separated sequence lengths");
  bench->add_option("--repeats", repeats, "Timed repeats after warmup");

  auto* count = app.add_subcommand("count-params", "Headline and exact parameter counts");
  add_common(*count, count_c);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(resolve(train_c), steps, resume, out);
    if (eval->parsed()) {
      RunConfig cfg = resolve(eval_c);
      if (!eval_runs.empty()) cfg.set("eval.runs", eval_runs);
      if (eval_lengths) cfg.set("eval.lengths", parse_list(*eval_lengths, true, "--lengths"));
      return cmd_eval_lengths(std::move(cfg), out);
    }
    if (analyze->parsed()) {
      RunConfig cfg = resolve(analyze_c);
      if (random_init) cfg.set("analysis.random_init", true);
      if (!analyze_run.empty()) cfg.set("analysis.run", analyze_run);
      if (kernels) cfg.set("analysis.kernels", parse_list(*kernels, false, "--kernels"));
      if (analyze_lengths) {
        cfg.set("analysis.lengths", parse_list(*analyze_lengths, true, "--lengths"));
      }
      if (seeds) cfg.set("analysis.seeds", parse_list(*seeds, true, "--seeds"));
      if (layer) cfg.set("analysis.layer", *layer);
      return cmd_analyze(std::move(cfg), out);
    }
    if (bench->parsed()) {
      RunConfig cfg = resolve(bench_c);
      if (bench_lengths) cfg.set("bench.lengths", parse_list(*bench_lengths, true, "--lengths"));
      if (repeats) cfg.set("bench.repeats", *repeats);
      return cmd_bench(std::move(cfg), out);
    }
    if (count->parsed()) return cmd_count_params(resolve(count_c), out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace gau::cli
