// mumoe: prune, evaluate and benchmark test-time pruned transformer models.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mumoe/bench.hpp"
#include "mumoe/metrics.hpp"
#include "mumoe/model.hpp"
#include "mumoe/parallel.hpp"
#include "mumoe/pruner.hpp"
#include "mumoe/shift.hpp"
#include "mumoe/tokenizer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mumoe;

namespace {

constexpr const char* kVersion = "0.1.0";

// Thrown for flag combinations CLI11 cannot express; exits like a parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string() + " for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

void write_error(const std::string& kind, const std::string& message, int code) {
  json err = {{"error", {{"type", kind}, {"message", message}, {"exit_code", code}}}};
  std::cerr << err.dump() << '\n';
}

/// Options of one subcommand with defaults materialized.
json resolved_options(const CLI::App& sub) {
  json out = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    if (opt->get_expected_max() == 0) {
      out[name] = opt->count() > 0;
    } else if (opt->count() > 0) {
      const auto r = opt->results();
      out[name] = opt->get_expected_max() > 1 || r.size() > 1 ? json(r) : json(r.front());
    } else {
      out[name] = opt->get_default_str();
    }
  }
  return out;
}

struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;

  void write(const fs::path& path) const {
    json hashes = json::object();
    for (const auto& p : inputs) hashes[p.string()] = sha256_file(p);
    json m = {{"tool", "mumoe"},
              {"version", kVersion},
              {"command", command},
              {"config", config},
              {"seed", seed},
              {"threads", thread_count()},
              {"inputs", hashes}};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write manifest " + path.string());
    os << m.dump(2) << '\n';
  }
};

struct PruneFlags {
  double rho = 0.5;
  std::string method = "wanda";
  std::string strategy = "kth";
  std::string tie = "canonical";
  std::string layers = "all";
  double lambda = 0.01;
  bool lambda_absolute = false;
  bool allow_online_sparsegpt = false;
  bool parallel = false;

  void add_to(CLI::App* sub) {
    sub->add_option("--rho", rho, "fraction of weights kept per row")->check(CLI::Range(0.0, 1.0));
    sub->add_option("--method", method, "magnitude, wanda or sparsegpt")
        ->check(CLI::IsMember({"magnitude", "wanda", "sparsegpt"}));
    sub->add_option("--strategy", strategy, "sort, heap or kth")->check(CLI::IsMember({"sort", "heap", "kth"}));
    sub->add_option("--tie", tie, "canonical or parity")->check(CLI::IsMember({"canonical", "parity"}));
    sub->add_option("--layers", layers, "'all' or a comma list of q,k,v,o,up,down");
    sub->add_option("--lambda", lambda, "gram damping (relative to mean diagonal unless --lambda-absolute)");
    sub->add_flag("--lambda-absolute", lambda_absolute);
    sub->add_flag("--allow-online-sparsegpt", allow_online_sparsegpt, "permit O(d^3) scoring per prompt");
    sub->add_flag("--parallel-selection", parallel, "row-parallel mask selection");
  }

  PruneConfig to_config(Mode mode) const {
    PruneConfig c;
    c.rho = rho;
    c.method = parse_method(method);
    c.strategy = parse_strategy(strategy);
    c.tie_mode = parse_tie_mode(tie);
    c.mode = mode;
    c.lambda.kind = lambda_absolute ? LambdaPolicy::Kind::absolute : LambdaPolicy::Kind::relative;
    c.lambda.value = lambda;
    c.layers = LayerFilter::parse(layers);
    c.parallel_selection = parallel;
    c.allow_online_sparsegpt = allow_online_sparsegpt;
    c.validate();
    return c;
  }
};

std::shared_ptr<const Model> open_model(const fs::path& path) {
  return std::make_shared<const Model>(load_model(path));
}

// ---- prune ----------------------------------------------------------------

struct PruneCmd {
  std::string model_path, mode = "offline", calib, prompt, out;
  PruneFlags flags;
};

int run_prune(const PruneCmd& c, Manifest& manifest) {
  const Mode mode = parse_mode(c.mode);
  if (mode == Mode::online && !c.calib.empty()) throw UsageError("--mode online takes --prompt, not --calib");
  if (mode == Mode::offline && !c.prompt.empty()) throw UsageError("--mode offline takes --calib, not --prompt");
  if (mode == Mode::online && c.prompt.empty()) throw UsageError("--mode online requires --prompt");
  const PruneConfig cfg = c.flags.to_config(mode);
  if (mode == Mode::offline && c.calib.empty() && cfg.method != Method::magnitude) {
    throw UsageError("--mode offline with --method " + c.flags.method + " requires --calib");
  }

  const auto model = open_model(c.model_path);
  manifest.inputs.push_back(c.model_path);
  const Tokenizer tok = Tokenizer::for_model(*model);
  std::vector<TokenId> tokens;
  if (mode == Mode::online) {
    tokens = tok.encode(c.prompt);
  } else if (!c.calib.empty()) {
    manifest.inputs.push_back(c.calib);
    tokens = load_token_stream(c.calib, tok);
  }
  if (tokens.size() > model->config().max_seq) tokens.resize(model->config().max_seq);

  std::optional<PrunedModel> pruned;
  if (mode == Mode::online) {
    pruned.emplace(prune_online(model, tokens, cfg).model);
  } else {
    const auto record = tokens.empty() ? CalibrationRecord{} : calibrate_offline(*model, tokens, cfg, c.calib);
    pruned.emplace(prune_offline(model, record, cfg));
  }

  const fs::path out(c.out);
  fs::create_directories(out);
  std::map<LayerId, double> losses;
  if (!tokens.empty()) {
    pruned->forward(tokens, [&](LayerId id, const Matrix& w, const RowSparseMatrix* ws, const Matrix& x) {
      if (ws) losses[id] = approx_loss(w, *ws, x);
    });
  }

  std::ofstream summary(out / "summary.csv");
  summary << "layer,rows,cols,k,active_min,active_max,loss\n";
  std::cout << std::left << std::setw(8) << "layer" << std::setw(10) << "active" << "loss\n";
  for (const auto& [id, layer] : pruned->layers()) {
    const auto& ws = layer.weights;
    {
      std::ofstream dump(out / (id.name() + ".rsm"), std::ios::binary);
      ws.dump(dump);
    }
    std::size_t lo = ws.cols(), hi = 0;
    for (std::size_t r = 0; r < ws.rows(); ++r) {
      lo = std::min(lo, ws.row_count(r));
      hi = std::max(hi, ws.row_count(r));
    }
    const auto it = losses.find(id);
    const std::string loss = it == losses.end() ? "" : std::to_string(it->second);
    summary << id.name() << ',' << ws.rows() << ',' << ws.cols() << ',' << ws.k() << ',' << lo << ',' << hi << ','
            << loss << '\n';
    std::cout << std::setw(8) << id.name() << std::setw(10) << (std::to_string(hi) + "/" + std::to_string(ws.cols()))
              << (loss.empty() ? "-" : loss) << '\n';
  }
  std::cout << "mask hash " << std::hex << pruned->mask_hash() << std::dec << '\n';
  manifest.write(out / "manifest.json");
  return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalCmd {
  std::string model_path, text, mode = "dense", calib, report, manifest;
  std::size_t stride = 0;
  std::uint64_t limit = 0;
  PruneFlags flags;
};

int run_eval(const EvalCmd& c, Manifest& manifest) {
  const auto model = open_model(c.model_path);
  manifest.inputs.push_back(c.model_path);
  manifest.inputs.push_back(c.text);
  const Tokenizer tok = Tokenizer::for_model(*model);
  std::vector<TokenId> stream = load_token_stream(c.text, tok);
  if (c.limit > 0 && stream.size() > c.limit) stream.resize(c.limit);
  const std::size_t window = model->config().max_seq;
  const std::size_t stride = c.stride == 0 ? window : c.stride;

  const bool dense = c.mode == "dense";
  const Mode mode = dense ? Mode::offline : parse_mode(c.mode);
  if (mode == Mode::online && !c.calib.empty()) throw UsageError("--mode online evaluates without --calib");
  if (dense && !c.calib.empty()) throw UsageError("--mode dense takes no --calib");

  LogitsFn logits;
  std::optional<PrunedModel> offline;
  PruneConfig cfg;
  if (dense) {
    logits = [&model](std::span<const TokenId> w) { return model->forward(w); };
  } else {
    cfg = c.flags.to_config(mode);
    if (mode == Mode::offline) {
      if (c.calib.empty() && cfg.method != Method::magnitude) throw UsageError("--mode offline requires --calib");
      CalibrationRecord record;
      if (!c.calib.empty()) {
        manifest.inputs.push_back(c.calib);
        auto calib = load_token_stream(c.calib, tok);
        if (calib.size() > window) calib.resize(window);
        record = calibrate_offline(*model, calib, cfg, c.calib);
      }
      offline.emplace(prune_offline(model, record, cfg));
      logits = [&offline](std::span<const TokenId> w) { return offline->forward(w); };
    } else {
      // each evaluation window is its own prompt
      logits = [&model, &cfg](std::span<const TokenId> w) { return prune_online(model, w, cfg).logits; };
    }
  }

  const auto ppl = perplexity(stream, window, stride, logits);
  const double rho = dense ? 1.0 : cfg.rho;
  const auto cost = count_costs(model->config(), rho, window, dense ? CostMode::dense : CostMode::mu_moe,
                                dense ? LayerFilter{} : cfg.layers);
  const auto base = count_costs(model->config(), 1.0, window, CostMode::dense);
  std::uint64_t dense_prunable = 0;
  for (std::size_t i = 0; i < base.layers.size(); ++i)
    if (cost.layers[i].prunable) dense_prunable += base.layers[i].macs.total();

  std::cout << std::setprecision(8);
  std::cout << "tokens " << stream.size() << "  windows " << ppl.windows << "  predictions " << ppl.predictions
            << '\n';
  std::cout << "perplexity " << ppl.perplexity() << '\n';
  std::cout << "mean nll " << ppl.mean_nll() << '\n';
  if (!dense) {
    std::cout << "MACs ratio " << double(cost.prunable_macs()) / double(dense_prunable)
              << " (pruned linears, incl. overhead, T=" << window << ")\n";
  }
  std::cout << "MACs ratio total " << double(cost.total_macs()) / double(base.total_macs()) << '\n';
  std::cout << "MACs " << cost.total_macs() << "  FLOPs " << cost.total_flops() << " per " << window
            << "-token window\n";

  if (!c.report.empty()) {
    std::ofstream os(c.report);
    json r = json::parse(cost.to_json());
    r["perplexity"] = ppl.perplexity();
    r["nll_sum"] = ppl.nll_sum;
    r["predictions"] = ppl.predictions;
    os << r.dump(2) << '\n';
  }
  manifest.write(c.manifest.empty() ? fs::path(c.report.empty() ? "eval.manifest.json" : c.report + ".manifest.json")
                                    : fs::path(c.manifest));
  return 0;
}

// ---- bench ----------------------------------------------------------------

struct BenchCmd {
  std::vector<std::size_t> d{256, 1024, 4096}, dprime{256};
  std::vector<double> rho{0.25, 0.5, 0.75};
  std::vector<std::string> strategies{"sort", "heap", "kth"};
  std::size_t reps = 5, warmup = 1;
  std::string out, manifest;
};

int run_bench_cmd(const BenchCmd& c, Manifest& manifest) {
  std::vector<std::string> names;
  for (const auto& s : c.strategies)
    if (!s.empty()) names.push_back(s);
  if (names.empty()) throw UsageError("--strategies must name at least one strategy");
  BenchSpec spec;
  spec.d_values = c.d;
  spec.d_prime_values = c.dprime;
  spec.rhos = c.rho;
  spec.strategies.clear();
  for (const auto& s : names) spec.strategies.push_back(BenchStrategy::parse(s));
  spec.repetitions = c.reps;
  spec.warmup = c.warmup;
  spec.seed = manifest.seed;
  spec.validate();

  const auto rows = run_bench(spec);
  if (c.out.empty() || c.out == "-") {
    write_bench_csv(std::cout, rows);
  } else {
    std::ofstream os(c.out);
    write_bench_csv(os, rows);
  }
  for (const auto& [key, spread] : kth_rho_spread(rows)) {
    std::cerr << "kth spread across rho at d=" << key.first << " d'=" << key.second << ": " << spread << '\n';
  }
  const fs::path mpath = !c.manifest.empty() ? fs::path(c.manifest)
                         : (c.out.empty() || c.out == "-") ? fs::path("bench.manifest.json")
                                                            : fs::path(c.out + ".manifest.json");
  manifest.write(mpath);
  return 0;
}

// ---- shift ----------------------------------------------------------------

struct ShiftCmd {
  std::string model_path, domain_a, domain_b, out, manifest;
  SyntheticShiftSpec synth;
  std::size_t prompt_len = 64;
  PruneFlags flags;
};

int run_shift(const ShiftCmd& c, Manifest& manifest) {
  std::vector<ShiftRow> rows;
  if (c.model_path.empty()) {
    if (!c.domain_a.empty() || !c.domain_b.empty()) throw UsageError("--domain-a/--domain-b need --model");
    SyntheticShiftSpec spec = c.synth;
    spec.rho = c.flags.rho;
    spec.strategy = parse_strategy(c.flags.strategy);
    spec.seed = manifest.seed;
    rows = to_rows(synthetic_shift_experiment(spec), spec.rho);
  } else {
    if (c.domain_a.empty() || c.domain_b.empty()) throw UsageError("--model needs --domain-a and --domain-b");
    const auto model = open_model(c.model_path);
    manifest.inputs = {c.model_path, c.domain_a, c.domain_b};
    const Tokenizer tok = Tokenizer::for_model(*model);
    const auto a = load_token_stream(c.domain_a, tok);
    const auto b = load_token_stream(c.domain_b, tok);
    rows = shift_experiment(model, a, b, c.flags.to_config(Mode::offline), c.synth.trials, c.prompt_len,
                            manifest.seed);
  }

  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> means;
  for (const auto& r : rows) {
    auto& m = means[{r.method, r.calib_domain}];
    m.first += r.loss;
    ++m.second;
  }
  for (const auto& [key, m] : means) {
    std::cerr << key.first << " calib=" << key.second << " mean loss " << m.first / double(m.second) << '\n';
  }
  if (c.out.empty() || c.out == "-") {
    write_shift_csv(std::cout, rows);
  } else {
    std::ofstream os(c.out);
    write_shift_csv(os, rows);
  }
  const fs::path mpath = !c.manifest.empty() ? fs::path(c.manifest)
                         : (c.out.empty() || c.out == "-") ? fs::path("shift.manifest.json")
                                                            : fs::path(c.out + ".manifest.json");
  manifest.write(mpath);
  return 0;
}

// ---- flops / init-model ---------------------------------------------------

struct ConfigFlags {
  ModelConfig config;
  void add_to(CLI::App* sub) {
    sub->add_option("--layers-n", config.n_layers, "number of blocks");
    sub->add_option("--heads", config.n_heads);
    sub->add_option("--hidden", config.hidden);
    sub->add_option("--head-dim", config.head_dim);
    sub->add_option("--ffn", config.ffn_dim);
    sub->add_option("--vocab", config.vocab);
    sub->add_option("--max-seq", config.max_seq);
  }
};

struct FlopsCmd {
  std::string model_path, mode = "mu_moe", layers = "all", format = "text";
  double rho = 0.5;
  std::uint64_t tokens = 128;
  ConfigFlags cfg;
};

int run_flops(const FlopsCmd& c, Manifest& manifest) {
  ModelConfig config = c.cfg.config;
  if (!c.model_path.empty()) {
    config = load_model(c.model_path).config();
    manifest.inputs.push_back(c.model_path);
  }
  const auto report = count_costs(config, c.rho, c.tokens, parse_cost_mode(c.mode), LayerFilter::parse(c.layers));
  if (c.format == "json") {
    std::cout << report.to_json() << '\n';
  } else if (c.format == "csv") {
    report.write_csv(std::cout);
  } else {
    const auto dense = count_costs(config, 1.0, c.tokens, CostMode::dense);
    std::cout << "MACs " << report.total_macs() << "  FLOPs " << report.total_flops() << '\n';
    std::cout << "MACs ratio total " << double(report.total_macs()) / double(dense.total_macs()) << '\n';
    std::cout << "complexity ratio (d'=" << config.hidden << ") " << complexity_ratio(c.rho, c.tokens, config.hidden)
              << '\n';
  }
  return 0;
}

struct InitCmd {
  std::string out;
  ConfigFlags cfg;
};

int run_init(const InitCmd& c, Manifest& manifest) {
  save_model(Model::random(c.cfg.config, manifest.seed), fs::path(c.out));
  manifest.write(c.out + ".manifest.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time activation-aware pruning of transformer linear layers", "mumoe"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "TOML/INI file; command-line flags take precedence");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "random seed")->capture_default_str();

  PruneCmd prune;
  auto* sp = app.add_subcommand("prune", "compute masks and write compressed layers");
  sp->add_option("--model", prune.model_path)->required()->check(CLI::ExistingFile);
  sp->add_option("--mode", prune.mode)->check(CLI::IsMember({"offline", "online"}));
  sp->add_option("--calib", prune.calib, "calibration text or .u32 token file")->check(CLI::ExistingFile);
  sp->add_option("--prompt", prune.prompt, "prompt text for online pruning");
  sp->add_option("--out", prune.out, "output directory")->required();
  prune.flags.add_to(sp);

  EvalCmd eval;
  auto* se = app.add_subcommand("eval", "perplexity and cost report");
  se->add_option("--model", eval.model_path)->required()->check(CLI::ExistingFile);
  se->add_option("--text", eval.text, "text or .u32 token file")->required()->check(CLI::ExistingFile);
  se->add_option("--mode", eval.mode)->check(CLI::IsMember({"dense", "offline", "online"}));
  se->add_option("--calib", eval.calib)->check(CLI::ExistingFile);
  se->add_option("--stride", eval.stride, "window stride in tokens; 0 means the window size");
  se->add_option("--limit", eval.limit, "evaluate only the first N tokens; 0 means all");
  se->add_option("--report", eval.report, "write the cost report and perplexity as JSON");
  se->add_option("--manifest", eval.manifest);
  eval.flags.add_to(se);

  BenchCmd bench;
  auto* sb = app.add_subcommand("bench", "time mask selection strategies");
  sb->add_option("--d", bench.d)->delimiter(',');
  sb->add_option("--dprime", bench.dprime)->delimiter(',');
  sb->add_option("--rho", bench.rho)->delimiter(',');
  sb->add_option("--strategies", bench.strategies, "sort, heap, kth, optionally suffixed _par")
      ->delimiter(',');
  sb->add_option("--reps", bench.reps);
  sb->add_option("--warmup", bench.warmup);
  sb->add_option("--out", bench.out, "CSV path, '-' for stdout");
  sb->add_option("--manifest", bench.manifest);

  ShiftCmd shift;
  auto* ss = app.add_subcommand("shift", "domain-shift experiment, synthetic or on a model");
  ss->add_option("--model", shift.model_path)->check(CLI::ExistingFile);
  ss->add_option("--domain-a", shift.domain_a)->check(CLI::ExistingFile);
  ss->add_option("--domain-b", shift.domain_b)->check(CLI::ExistingFile);
  ss->add_option("--trials", shift.synth.trials);
  ss->add_option("--prompt-len", shift.prompt_len);
  ss->add_option("--d", shift.synth.d);
  ss->add_option("--dprime", shift.synth.d_out);
  ss->add_option("--calib-tokens", shift.synth.calib_tokens);
  ss->add_option("--test-tokens", shift.synth.test_tokens);
  ss->add_option("--condition", shift.synth.condition);
  ss->add_option("--mix-angle", shift.synth.mix_angle);
  ss->add_option("--out", shift.out, "CSV path, '-' for stdout");
  ss->add_option("--manifest", shift.manifest);
  shift.flags.add_to(ss);

  FlopsCmd flops;
  auto* sf = app.add_subcommand("flops", "analytical MAC/FLOP report");
  sf->add_option("--model", flops.model_path)->check(CLI::ExistingFile);
  sf->add_option("--rho", flops.rho)->check(CLI::Range(0.0, 1.0));
  sf->add_option("--tokens", flops.tokens);
  sf->add_option("--mode", flops.mode)->check(CLI::IsMember({"dense", "mu_moe"}));
  sf->add_option("--layers", flops.layers);
  sf->add_option("--format", flops.format)->check(CLI::IsMember({"text", "json", "csv"}));
  flops.cfg.add_to(sf);

  InitCmd init;
  auto* si = app.add_subcommand("init-model", "write a random-weight model");
  si->add_option("--out", init.out)->required();
  init.cfg.add_to(si);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    write_error("usage", e.what(), 2);
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  Manifest manifest;
  manifest.command = sub->get_name();
  manifest.seed = seed;
  manifest.config = resolved_options(*sub);

  try {
    if (sub == sp) return run_prune(prune, manifest);
    if (sub == se) return run_eval(eval, manifest);
    if (sub == sb) return run_bench_cmd(bench, manifest);
    if (sub == ss) return run_shift(shift, manifest);
    if (sub == sf) return run_flops(flops, manifest);
    if (sub == si) return run_init(init, manifest);
  } catch (const UsageError& e) {
    write_error("usage", e.what(), 2);
    return 2;
  } catch (const ModelFormatError& e) {
    write_error("model_format", e.what(), 1);
    return 1;
  } catch (const BenchGateError& e) {
    write_error("bench_gate", e.what(), 1);
    return 1;
  } catch (const std::invalid_argument& e) {
    write_error("invalid_argument", e.what(), 1);
    return 1;
  } catch (const std::exception& e) {
    write_error("runtime", e.what(), 1);
    return 1;
  }
  return 0;
}
