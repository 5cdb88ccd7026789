// calg: command-line driver for the composition pipeline.
//
//   calg synth            --out data/
//   calg splits           --dataset data/ --out split/
//   calg train-primitives --dataset data/ --split split/ --out bank/
//   calg calibrate        --dataset data/ --split split/ --bank bank/ --out bank/
//   calg train            --dataset data/ --split split/ --bank bank/ --out net/
//   calg finetune-cnf     --dataset data/ --split split/ --bank bank/ --net net/ --out net_ft/
//   calg eval             --dataset data/ --split split/ --bank bank/ --net net/ --out eval/
//   calg sweep            --dataset data/ --split split/ --bank bank/ --net net/ [--net-ft net_ft/] --out sweep/
//   calg score "a & !b"   --dataset data/ --bank bank/ --net net/ [--split split/] [-k 10]
//   calg convert-cnf "!(a | b) & c"
//   calg gradcheck
//
// Every command accepts --seed, --threads, --config file.json and repeated
// --set key=value. Exit status: 0 ok, 1 usage, 2 data or format, 3 numeric.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calg/protocol.hpp"

using namespace calg;

namespace {

struct Options {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  std::string dataset;
  std::string split;
  std::string bank;
  std::string net;
  std::string net_ft;
  std::string expression;
  std::string scorer = "neural_algebra";
  std::size_t top_k = 10;
  std::size_t max_clauses = 4096;
  std::size_t trials = 20;
  bool allow_digest_mismatch = false;
  bool no_supervised = false;
};

std::vector<std::string> g_argv;

ExperimentConfig effective_config(const Options& o) {
  ExperimentConfig cfg;
  if (!o.config_file.empty()) {
    const std::string text = io::read_file(o.config_file);
    const auto doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::Usage, o.config_file + " is not valid JSON");
    apply_json(cfg, doc);
  }
  for (const auto& kv : o.overrides) apply_override(cfg, kv);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  cfg.sync();
  return cfg;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(ErrorCode::Usage, std::string(flag) + " is required");
}

/// Inputs and timing recorded next to every command's outputs.
class RunManifest {
 public:
  RunManifest(std::string command, const ExperimentConfig& cfg)
      : command_(std::move(command)), cfg_(cfg), start_(std::chrono::steady_clock::now()) {}

  void input(const std::string& role, const std::string& path, const std::string& digest = "") {
    inputs_[role] = {{"path", path}, {"digest", digest}};
  }
  void output(const std::string& key, json value) { outputs_[key] = std::move(value); }

  void write(const fs::path& dir) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    io::write_manifest(dir / ("run." + command_ + ".json"),
                       {{"format", "calg.run"},
                        {"version", kFormatVersion},
                        {"command", command_},
                        {"argv", g_argv},
                        {"seed", cfg_.seed},
                        {"threads", cfg_.threads},
                        {"config", to_json(cfg_)},
                        {"config_digest", config_digest(cfg_)},
                        {"inputs", inputs_},
                        {"outputs", outputs_},
                        // Only this block changes between identical runs.
                        {"timing", {{"finished_utc", stamp}, {"wall_seconds", secs}}}});
  }

 private:
  std::string command_;
  ExperimentConfig cfg_;
  std::chrono::steady_clock::time_point start_;
  json inputs_ = json::object();
  json outputs_ = json::object();
};

struct Loaded {
  Dataset data;
  SplitSpec split;
  PrimitiveBank bank;
  std::optional<LoadedNet> net;
};

Dataset load_data(const Options& o, RunManifest& run) {
  require(o.dataset, "--dataset");
  auto data = load_dataset(o.dataset);
  run.input("dataset", o.dataset, hex_digest(data.digest()));
  return data;
}

SplitSpec load_split_for(const Options& o, const Dataset& data, RunManifest& run) {
  require(o.split, "--split");
  auto loaded = load_split(o.split);
  check_digest(loaded.dataset_digest, hex_digest(data.digest()), "split", o.allow_digest_mismatch);
  check_split_against(loaded.spec, data);
  run.input("split", o.split, loaded.dataset_digest);
  return std::move(loaded.spec);
}

PrimitiveBank load_bank_for(const Options& o, const Dataset& data, RunManifest& run) {
  require(o.bank, "--bank");
  auto bank = load_bank(o.bank);
  check_digest(bank.dataset_digest, hex_digest(data.digest()), "bank", o.allow_digest_mismatch);
  bank.check_dataset(data);
  run.input("bank", o.bank, bank.dataset_digest);
  return bank;
}

LoadedNet load_net_for(const std::string& dir, const char* role, const Options& o,
                       const Dataset& data, RunManifest& run) {
  auto net = load_net(dir);
  check_digest(net.meta.dataset_digest, hex_digest(data.digest()), role, o.allow_digest_mismatch);
  if (net.algebra.classifier_dim() != data.dim() + 1) {
    throw Error(ErrorCode::ShapeMismatch, std::string(role) + " expects D=" +
                                              std::to_string(net.algebra.classifier_dim() - 1));
  }
  run.input(role, dir, net.meta.dataset_digest);
  return net;
}

NetMeta net_meta(const ExperimentConfig& cfg, const Dataset& data) {
  return {cfg.seed, net_config_digest(cfg), hex_digest(data.digest()), to_json(cfg)};
}

void write_tables(const fs::path& dir, const std::vector<ReportRow>& rows) {
  io::write_file(dir / "metrics.tsv", format_table(rows));
  io::write_file(dir / "metrics.jsonl", format_records(rows));
  std::cout << format_table(rows);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const Options& o) {
  require(o.out, "--out");
  const auto cfg = effective_config(o);
  RunManifest run("synth", cfg);
  auto data = make_dataset(cfg);
  json prov = {{"generator", "synthetic"}, {"seed", cfg.seed}, {"config", to_json(cfg)}};
  data.provenance = prov.dump();
  save_dataset(o.out, data);
  run.output("digest", hex_digest(data.digest()));
  run.write(o.out);
  std::cout << "dataset " << hex_digest(data.digest()) << ": " << data.size() << " images, D="
            << data.dim() << ", M=" << data.primitive_count() << "\n";
  return 0;
}

int cmd_splits(const Options& o) {
  require(o.out, "--out");
  const auto cfg = effective_config(o);
  RunManifest run("splits", cfg);
  const auto data = load_data(o, run);
  const auto split = make_experiment_split(data, cfg);
  save_split(o.out, split, hex_digest(data.digest()));
  run.output("attempts", split.attempts);
  run.output("train_exprs", split.train_exprs.size());
  run.output("test_exprs", split.test_exprs.size());
  run.write(o.out);
  std::cout << "split after " << split.attempts << " attempt(s): " << split.train_images.size()
            << "/" << split.val_images.size() << "/" << split.test_images.size()
            << " images, " << split.train_exprs.size() << " known and "
            << split.test_exprs.size() << " unknown expressions\n";
  return 0;
}

int cmd_train_primitives(const Options& o) {
  require(o.out, "--out");
  const auto cfg = effective_config(o);
  RunManifest run("train-primitives", cfg);
  const auto data = load_data(o, run);
  const auto split = load_split_for(o, data, run);
  const auto bank = build_bank(data, split, cfg);
  save_bank(o.out, bank, to_json(cfg));
  run.output("primitives", bank.size());
  run.write(o.out);
  std::cout << "trained " << bank.size() << " primitive classifiers on "
            << split.svm_images().size() << " images\n";
  return 0;
}

int cmd_calibrate(const Options& o) {
  const auto cfg = effective_config(o);
  RunManifest run("calibrate", cfg);
  const auto data = load_data(o, run);
  const auto split = load_split_for(o, data, run);
  auto bank = load_bank_for(o, data, run);
  calibrate(bank, data, split, cfg);
  const std::string out = o.out.empty() ? o.bank : o.out;
  save_bank(out, bank, to_json(cfg));
  json params = json::object();
  for (std::size_t k = 0; k < bank.size(); ++k) {
    params[bank.names[k]] = {{"a", bank.platt[k]->a}, {"b", bank.platt[k]->b}};
  }
  run.output("platt", params);
  run.write(out);
  std::cout << "calibrated " << bank.size() << " primitives on "
            << split.calibration_images().size() << " held-out images\n";
  return 0;
}

int cmd_train(const Options& o) {
  require(o.out, "--out");
  const auto cfg = effective_config(o);
  RunManifest run("train", cfg);
  const auto data = load_data(o, run);
  const auto split = load_split_for(o, data, run);
  const auto bank = load_bank_for(o, data, run);
  const auto result = train_algebra(data, split, bank, cfg);
  save_net(o.out, result.algebra, net_meta(cfg, data));
  write_history(fs::path(o.out) / "history.jsonl", result.history);
  const auto& last = result.history.back();
  run.output("epochs", result.history.size());
  run.output("final", epoch_json(last));
  run.write(o.out);
  std::printf("trained %zu epochs, final loss %.6f", result.history.size(), last.mean_loss);
  if (last.validation) std::printf(", validation AUC %.4f", last.validation->auc);
  std::printf("\n");
  return 0;
}

int cmd_finetune(const Options& o) {
  require(o.out, "--out");
  require(o.net, "--net");
  const auto cfg = effective_config(o);
  RunManifest run("finetune-cnf", cfg);
  const auto data = load_data(o, run);
  const auto split = load_split_for(o, data, run);
  const auto bank = load_bank_for(o, data, run);
  TrainResult base;
  base.algebra = load_net_for(o.net, "net", o, data, run).algebra;
  base.bank = bank;
  std::vector<Expression> used;
  const auto result = finetune_algebra(data, split, base, cfg, &used);
  save_net(o.out, result.algebra, net_meta(cfg, data));
  write_history(fs::path(o.out) / "history.jsonl", result.history);
  write_expression_list((fs::path(o.out) / "exprs.finetune.txt").string(), used,
                        "finetuning expressions");
  run.output("expressions", used.size());
  run.output("final", epoch_json(result.history.back()));
  run.write(o.out);
  std::printf("finetuned on %zu CNFs of complexity %zu for %zu epochs, final loss %.6f\n",
              used.size(), cfg.train.finetune_complexity, result.history.size(),
              result.history.back().mean_loss);
  return 0;
}

int cmd_eval(const Options& o) {
  require(o.out, "--out");
  require(o.net, "--net");
  const auto cfg = effective_config(o);
  RunManifest run("eval", cfg);
  const auto data = load_data(o, run);
  const auto split = load_split_for(o, data, run);
  const auto bank = load_bank_for(o, data, run);
  const auto net = load_net_for(o.net, "net", o, data, run);
  std::optional<SupervisedBaseline> sup;
  if (!o.no_supervised) {
    sup = baseline_supervised(data, split.train_exprs, split.svm_images(), cfg.bank, cfg.seed,
                              cfg.threads);
  }
  const auto rows = evaluate_simple(data, split, bank, net.algebra, sup ? &*sup : nullptr, cfg);
  write_tables(o.out, rows);
  run.output("rows", rows.size());
  run.write(o.out);
  return 0;
}

int cmd_sweep(const Options& o) {
  require(o.out, "--out");
  require(o.net, "--net");
  const auto cfg = effective_config(o);
  RunManifest run("sweep", cfg);
  const auto data = load_data(o, run);
  const auto split = load_split_for(o, data, run);
  const auto bank = load_bank_for(o, data, run);
  const auto net = load_net_for(o.net, "net", o, data, run);
  std::optional<LoadedNet> ft;
  if (!o.net_ft.empty()) ft = load_net_for(o.net_ft, "net_ft", o, data, run);
  std::vector<Scorer> scorers{chance_scorer(cfg.seed), independent_scorer(bank, data),
                              composed_scorer(net.algebra, bank, data)};
  if (ft) scorers.push_back(composed_scorer(ft->algebra, bank, data, "neural_algebra_ft"));
  const auto sets = sweep_sets(split, cfg);
  fs::create_directories(o.out);
  for (const auto& [c, exprs] : sets) {
    write_expression_list((fs::path(o.out) / ("exprs.cnf" + std::to_string(c) + ".txt")).string(),
                          exprs, "test CNFs of complexity " + std::to_string(c));
  }
  const auto result =
      complexity_sweep(scorers, data, sets, split.test_images, cfg.pooling_mode(), cfg.threads);
  const auto rows = sweep_rows(result);
  write_tables(o.out, rows);
  run.output("rows", rows.size());
  run.write(o.out);
  return 0;
}

int cmd_score(const Options& o) {
  require(o.expression, "EXPRESSION");
  require(o.net, "--net");
  const auto cfg = effective_config(o);
  RunManifest run("score", cfg);
  const auto data = load_data(o, run);
  const auto bank = load_bank_for(o, data, run);
  const auto net = load_net_for(o.net, "net", o, data, run);
  const auto expr = parse(o.expression);
  for (const auto& p : expr.primitives()) {
    if (!data.has_primitive(p)) throw Error(ErrorCode::UnknownPrimitive, "'" + p + "' not in dataset");
  }
  IndexList images = all_images(data);
  if (!o.split.empty()) images = load_split_for(o, data, run).test_images;

  Scorer scorer;
  if (o.scorer == "neural_algebra") scorer = composed_scorer(net.algebra, bank, data);
  else if (o.scorer == "independent") scorer = independent_scorer(bank, data);
  else throw Error(ErrorCode::Usage, "unknown scorer '" + o.scorer + "'");
  std::vector<double> s(images.size());
  scorer.fn(expr, images, s);
  const auto labels = expr_label(data, expr, images);

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return images[a] < images[b];
  });
  const std::size_t k = std::min(o.top_k, order.size());
  auto print_block = [&](const char* title, auto begin, auto end) {
    std::printf("%s\n", title);
    std::size_t hits = 0;
    for (auto it = begin; it != end; ++it) {
      std::printf("  image %6zu  score %12.6f  %s\n", images[*it], s[*it],
                  labels[*it] ? "match" : "-");
      hits += labels[*it];
    }
    std::printf("  %zu of %zu match\n", hits, static_cast<std::size_t>(end - begin));
  };
  std::printf("%s over %zu images (%s)\n", print(expr).c_str(), images.size(), scorer.name.c_str());
  print_block("top", order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  print_block("bottom", order.end() - static_cast<std::ptrdiff_t>(k), order.end());
  if (!o.out.empty()) {
    json top = json::array(), bottom = json::array();
    for (std::size_t i = 0; i < k; ++i) {
      top.push_back({{"image", images[order[i]]}, {"score", s[order[i]]}, {"match", labels[order[i]] != 0}});
      const std::size_t j = order[order.size() - k + i];
      bottom.push_back({{"image", images[j]}, {"score", s[j]}, {"match", labels[j] != 0}});
    }
    run.output("expression", print(expr));
    run.output("top", top);
    run.output("bottom", bottom);
    run.write(o.out);
  }
  return 0;
}

int cmd_convert(const Options& o) {
  require(o.expression, "EXPRESSION");
  const auto expr = parse(o.expression);
  std::cout << "input: " << print(expr) << "\n"
            << "nnf:   " << print(to_nnf(expr)) << "\n"
            << "cnf:   " << print(to_cnf(expr, o.max_clauses)) << "\n";
  return 0;
}

/// Finite-difference checks of compose_backward and the training objective
/// on a small synthetic problem.
int cmd_gradcheck(const Options& o) {
  auto cfg = effective_config(o);
  RunManifest run("gradcheck", cfg);
  SyntheticConfig sc;
  sc.primitives = 6;
  sc.dim = 5;
  sc.images = 300;
  sc.blocks = 1;
  sc.block_size = 3;
  sc.noise = 1.0;
  sc.seed = cfg.seed;
  const auto data = synth_generate(sc);
  const auto images = all_images(data);
  auto rng = rng_stream(cfg.seed, "gradcheck");
  constexpr double kLimit = 1e-5;
  double worst = 0.0;
  for (std::size_t t = 0; t < o.trials; ++t) {
    auto alg = NeuralAlgebra::init(sc.dim + 1, rng, cfg.train.slope, t % 3 == 1);
    alg.unit_norm = t % 3 == 2;
    for (double& v : alg.conj.b1) v = 0.2 * rng.normal();
    PrimitiveBank bank;
    for (const auto& n : data.primitive_names) {
      Vector w(sc.dim + 1);
      for (double& v : w) v = rng.normal();
      bank.add(n, {w, ClassifierSource::SvmPrimitive});
    }
    TrainConfig tc = cfg.train;
    tc.freeze_primitives = false;
    tc.alpha2 = std::max(tc.alpha2, 1e-2);
    tc.alpha3 = std::max(tc.alpha3, 1e-2);
    const auto exprs = random_binary_expressions(data.primitive_names, Op::And, 2, rng);
    Batch batch;
    for (const auto& e : {exprs[0], Expression::disjunction(exprs[1], Expression::negation(exprs[0]))}) {
      BatchItem item{0, e, {}, {}};
      for (std::size_t i : rng.choice(images.size(), 6)) {
        item.images.push_back(images[i]);
        item.targets.push_back(rng.uniform() < 0.5 ? 1.0 : -1.0);
      }
      batch.items.push_back(std::move(item));
    }
    const auto obj = objective(alg, bank, data, batch, tc);
    auto f = [&](std::span<const double> p) {
      auto probe = alg;
      probe.assign(p);
      return objective(probe, bank, data, batch, tc).loss;
    };
    const double err = relative_error(obj.grad.params.flatten(), finite_diff(f, alg.flatten(), 1e-6));
    worst = std::max(worst, err);
    for (const auto& [name, g] : obj.grad.leaves) {
      auto fl = [&](std::span<const double> w) {
        auto probe = bank;
        probe.at(name).weights = Vector(w);
        return objective(alg, probe, data, batch, tc).loss;
      };
      worst = std::max(worst, relative_error(g, finite_diff(fl, bank.at(name).weights, 1e-6)));
    }
  }
  const bool ok = worst < kLimit;
  std::printf("gradcheck: %zu trials, max relative error %.3e (limit %.0e): %s\n", o.trials, worst,
              kLimit, ok ? "ok" : "FAILED");
  if (!o.out.empty()) {
    run.output("max_relative_error", worst);
    run.output("passed", ok);
    run.write(o.out);
  }
  return ok ? 0 : 3;
}

void print_error(const std::string& kind, const std::string& message,
                 std::optional<std::size_t> offset = std::nullopt) {
  json j{{"error", kind}, {"message", message}};
  if (offset) j["offset"] = *offset;
  std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  g_argv.assign(argv, argv + argc);
  CLI::App app{"Composes classifiers for boolean expressions over primitive concepts."};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;

  app.add_option("--seed", o.seed, "Seed for every random stream");
  app.add_option("--threads", o.threads, "Worker threads (results do not depend on it)");
  app.add_option("--config", o.config_file, "JSON config, flat dotted keys or nested objects");
  app.add_option("--set", o.overrides, "Override a config key: key=value")->allow_extra_args(false);
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--dataset", o.dataset, "Dataset directory");
  app.add_option("--split", o.split, "Split directory");
  app.add_option("--bank", o.bank, "Primitive bank directory");
  app.add_option("--net", o.net, "Composition network directory");
  app.add_flag("--allow-digest-mismatch", o.allow_digest_mismatch,
               "Use artifacts built from a different dataset");

  std::vector<std::pair<CLI::App*, std::function<int(const Options&)>>> commands;
  auto add = [&](const char* name, const char* help, std::function<int(const Options&)> fn) {
    auto* sub = app.add_subcommand(name, help);
    commands.emplace_back(sub, std::move(fn));
    return sub;
  };
  add("synth", "Generate a synthetic dataset", cmd_synth);
  add("splits", "Split images and expressions", cmd_splits);
  add("train-primitives", "Train one linear SVM per primitive", cmd_train_primitives);
  add("calibrate", "Fit Platt parameters on held-out training images", cmd_calibrate);
  add("train", "Train the composition network", cmd_train);
  add("finetune-cnf", "Continue training on CNFs of known disjunctions", cmd_finetune);
  auto* eval = add("eval", "Evaluate known and unknown simple expressions", cmd_eval);
  eval->add_flag("--no-supervised", o.no_supervised, "Skip the per-expression SVM baseline");
  auto* sweep = add("sweep", "CNF complexity sweep", cmd_sweep);
  sweep->add_option("--net-ft", o.net_ft, "Finetuned network to score alongside --net");
  auto* score = add("score", "Rank images for an expression", cmd_score);
  score->add_option("expression", o.expression, "Expression, e.g. \"a & (b | c) & !d\"")->required();
  score->add_option("-k,--top", o.top_k, "Images to list at each end")->capture_default_str();
  score->add_option("--scorer", o.scorer, "neural_algebra or independent")->capture_default_str();
  auto* convert = add("convert-cnf", "Print the NNF and CNF of an expression", cmd_convert);
  convert->add_option("expression", o.expression, "Expression")->required();
  convert->add_option("--max-clauses", o.max_clauses, "Clause limit")->capture_default_str();
  auto* grad = add("gradcheck", "Finite-difference gradient checks", cmd_gradcheck);
  grad->add_option("--trials", o.trials, "Random trials")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("UsageError", e.what());
    return 1;
  }

  try {
    for (const auto& [sub, fn] : commands) {
      if (sub->parsed()) return fn(o);
    }
  } catch (const Error& e) {
    print_error(std::string(to_string(e.code())), e.what(), e.offset());
    return exit_status(e.code());
  } catch (const json::exception& e) {
    print_error("FormatError", e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("IoError", e.what());
    return 2;
  }
  return 1;
}
