#include <array>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hiercon/pipeline.hpp"

namespace hiercon {

namespace {

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> values;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      values.push_back(std::stod(trim(item)));
    } catch (const std::exception&) {
      throw InvalidConfig("bad numeric list entry '" + item + "'");
    }
  }
  if (values.empty()) throw InvalidConfig("empty numeric list");
  return values;
}

std::vector<std::array<double, 3>> parse_lambda_sets(const std::string& text) {
  std::vector<std::array<double, 3>> sets;
  std::istringstream ss(text);
  std::string triple;
  while (std::getline(ss, triple, ';')) {
    const auto values = parse_double_list(triple);
    if (values.size() != 3) {
      throw InvalidConfig("lambda set '" + triple + "' needs exactly 3 values");
    }
    sets.push_back({values[0], values[1], values[2]});
  }
  if (sets.empty()) throw InvalidConfig("empty lambda set list");
  return sets;
}

struct TrainCliOptions {
  std::string data;
  std::string preset = "HC";
  std::string config_file;
  std::vector<std::string> sets;
  std::string checkpoint_out = "checkpoint.ckpt";
  std::string history_out = "history.json";
  // optional dedicated overrides; negative/zero sentinel = not set
  double lr = -1.0, weight_decay = -1.0, tau = -1.0, augment_sigma = -1.0;
  std::int64_t epochs = -1, batch_size = -1, validation_k = -1;
  std::int64_t seed = -1;
  std::string metric;
};

void add_train_overrides(CLI::App* cmd, TrainCliOptions& opt) {
  cmd->add_option("--preset", opt.preset,
                  "experiment preset: SC, HC, HCl, HCE, HCEl");
  cmd->add_option("--config", opt.config_file, "key = value config file");
  cmd->add_option("--epochs", opt.epochs, "training epochs");
  cmd->add_option("--batch-size", opt.batch_size, "batch size (>= 2)");
  cmd->add_option("--lr", opt.lr, "learning rate");
  cmd->add_option("--weight-decay", opt.weight_decay, "decoupled weight decay");
  cmd->add_option("--tau", opt.tau, "contrastive temperature");
  cmd->add_option("--augment-sigma", opt.augment_sigma,
                  "feature noise augmentation sigma (default off)");
  cmd->add_option("--seed", opt.seed, "run seed");
  cmd->add_option("--validation-k", opt.validation_k, "kNN k for validation");
  cmd->add_option("--metric", opt.metric, "cosine or euclidean");
  cmd->add_option("--set", opt.sets, "extra key=value override, repeatable");
}

TrainConfig resolve_train_config(const TrainCliOptions& opt, const Dataset& ds) {
  TrainConfig cfg = opt.config_file.empty() ? preset_config(opt.preset)
                                            : load_train_config(opt.config_file);
  // The input width always has to match the data; infer it here so configs
  // stay portable across fixtures. An explicit --set arch.input_dim=... below
  // still wins.
  cfg.arch.input_dim = ds.dim;

  if (opt.epochs >= 0) cfg.epochs = static_cast<std::size_t>(opt.epochs);
  if (opt.batch_size >= 0) cfg.batch_size = static_cast<std::size_t>(opt.batch_size);
  if (opt.lr >= 0) cfg.lr = opt.lr;
  if (opt.weight_decay >= 0) cfg.weight_decay = opt.weight_decay;
  if (opt.tau >= 0) cfg.loss.tau = opt.tau;
  if (opt.augment_sigma >= 0) cfg.augment_sigma = opt.augment_sigma;
  if (opt.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opt.seed);
  if (opt.validation_k >= 0) cfg.validation_k = static_cast<std::size_t>(opt.validation_k);
  if (!opt.metric.empty()) cfg.metric = metric_from_name(opt.metric);
  for (const auto& entry : opt.sets) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) {
      throw InvalidConfig("--set expects key=value, got '" + entry + "'");
    }
    apply_config_entry(cfg, entry.substr(0, eq), entry.substr(eq + 1));
  }
  return cfg;
}

int run_synth(const SynthConfig& cfg, const std::string& out) {
  const Dataset ds = generate_synthetic(cfg);
  save_dataset(ds, out);
  std::cout << "wrote " << ds.records.size() << " records (dim " << ds.dim << ", "
            << ds.taxonomy.num_classes(Level::individual) << " individuals, "
            << ds.taxonomy.num_classes(Level::species) << " species, "
            << ds.taxonomy.num_classes(Level::taxon) << " taxa) to " << out << "\n";
  return 0;
}

int run_train(const TrainCliOptions& opt) {
  const Dataset ds = load_dataset(opt.data);
  const TrainConfig cfg = resolve_train_config(opt, ds);

  const TrainOutcome outcome = train(cfg, ds);
  for (std::size_t e = 0; e < outcome.history.epochs.size(); ++e) {
    const auto& stats = outcome.history.epochs[e];
    std::cout << "epoch " << e + 1 << "/" << cfg.epochs << "  loss "
              << stats.train_loss << "  val id "
              << stats.val_balanced_accuracy[static_cast<std::size_t>(Level::individual)]
              << "\n";
  }
  std::cout << "best epoch: " << outcome.history.best_epoch + 1 << "\n";

  save_checkpoint(outcome.params, cfg.arch, opt.checkpoint_out);
  write_text_file(opt.history_out, history_to_json(outcome.history));
  std::cout << "wrote " << opt.checkpoint_out << " and " << opt.history_out << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data,
             const std::string& split, std::size_t k, const std::string& metric,
             const std::string& out) {
  const auto [params, arch] = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  const EvalReport report =
      evaluate_closed(params, ds, split_from_name(split), k, metric_from_name(metric));
  std::cout << report_to_table(report);
  if (!out.empty()) write_text_file(out, report_to_json(report));
  return 0;
}

int run_eval_unseen(const std::string& checkpoint, const std::string& data,
                    std::size_t k, const std::string& metric, std::size_t episodes,
                    std::uint64_t seed, const std::string& out) {
  const auto [params, arch] = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);

  const EvalReport nn = evaluate_unseen_nn(params, ds, k, metric_from_name(metric));
  std::cout << "== unseen-class NN ==\n" << report_to_table(nn);
  const EvalReport one_shot =
      one_shot_episodes(params, ds, episodes, k, metric_from_name(metric), seed);
  std::cout << "== 1-shot episodes ==\n" << report_to_table(one_shot);

  if (!out.empty()) {
    nlohmann::json doc;
    doc["format_version"] = 1;
    doc["nn"] = nlohmann::json::parse(report_to_json(nn));
    doc["one_shot"] = nlohmann::json::parse(report_to_json(one_shot));
    write_text_file(out, doc.dump(2));
  }
  return 0;
}

int run_sweep(const TrainCliOptions& base_opt, const SweepSpec& spec,
              const std::string& out) {
  const Dataset ds = load_dataset(base_opt.data);
  const TrainConfig base = resolve_train_config(base_opt, ds);

  const SweepResult result = sweep(spec, base, ds);
  for (std::size_t i = 0; i < result.leaderboard.size(); ++i) {
    const auto& entry = result.leaderboard[i];
    std::cout << "#" << i + 1 << "  val id "
              << entry.val_balanced_accuracy[static_cast<std::size_t>(Level::individual)]
              << "  tau " << entry.config.loss.tau << "  lr " << entry.config.lr
              << "  wd " << entry.config.weight_decay << "  batch "
              << entry.config.batch_size << "\n";
  }
  if (!out.empty()) write_text_file(out, sweep_result_to_json(result));
  return 0;
}

int run_gradcheck(std::uint64_t seed) {
  const GradCheckReport report = run_gradcheck_suite(seed);
  for (const auto& entry : report.entries) {
    std::cout << entry.name << ": max relative error " << entry.max_rel_err << "\n";
  }
  if (!report.passed()) {
    std::cerr << "gradient check FAILED (tolerance 1e-4)\n";
    return 2;
  }
  std::cout << "all gradient checks passed (tolerance 1e-4)\n";
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"hierarchy-preserving contrastive embeddings with kNN evaluation"};
  app.require_subcommand(1);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset file");
  SynthConfig synth_cfg;
  std::string synth_out;
  synth_cmd->add_option("--out", synth_out, "output path (.csv or .jsonl)")->required();
  synth_cmd->add_option("--taxa", synth_cfg.n_taxa, "number of taxa");
  synth_cmd->add_option("--species-per-taxon", synth_cfg.species_per_taxon, "");
  synth_cmd->add_option("--ids-per-species", synth_cfg.ids_per_species, "");
  synth_cmd->add_option("--samples-per-id", synth_cfg.samples_per_id, "");
  synth_cmd->add_option("--unseen-ids-per-species", synth_cfg.unseen_ids_per_species, "");
  synth_cmd->add_option("--dim", synth_cfg.dim, "feature dimension");
  synth_cmd->add_option("--spread-taxon", synth_cfg.spread_taxon, "");
  synth_cmd->add_option("--spread-species", synth_cfg.spread_species, "");
  synth_cmd->add_option("--spread-id", synth_cfg.spread_id, "");
  synth_cmd->add_option("--noise", synth_cfg.noise, "per-sample noise sigma");
  synth_cmd->add_option("--seed", synth_cfg.seed, "generator seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "train an encoder");
  TrainCliOptions train_opt;
  train_cmd->add_option("--data", train_opt.data, "dataset file")->required();
  train_cmd->add_option("--out", train_opt.checkpoint_out, "checkpoint output path");
  train_cmd->add_option("--history", train_opt.history_out, "history JSON output path");
  add_train_overrides(train_cmd, train_opt);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "closed-set kNN evaluation");
  std::string eval_checkpoint, eval_data, eval_split = "test", eval_metric = "cosine";
  std::string eval_out;
  std::size_t eval_k = 1;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "")->required();
  eval_cmd->add_option("--data", eval_data, "")->required();
  eval_cmd->add_option("--split", eval_split, "val or test");
  eval_cmd->add_option("--k", eval_k, "number of neighbors");
  eval_cmd->add_option("--metric", eval_metric, "cosine or euclidean");
  eval_cmd->add_option("--out", eval_out, "report JSON output path");

  // eval-unseen
  auto* unseen_cmd = app.add_subcommand("eval-unseen",
                                        "unseen-class NN and 1-shot evaluation");
  std::string unseen_checkpoint, unseen_data, unseen_metric = "cosine", unseen_out;
  std::size_t unseen_k = 1, unseen_episodes = 10;
  std::uint64_t unseen_seed = 0;
  unseen_cmd->add_option("--checkpoint", unseen_checkpoint, "")->required();
  unseen_cmd->add_option("--data", unseen_data, "")->required();
  unseen_cmd->add_option("--k", unseen_k, "number of neighbors");
  unseen_cmd->add_option("--metric", unseen_metric, "cosine or euclidean");
  unseen_cmd->add_option("--episodes", unseen_episodes, "1-shot episode count");
  unseen_cmd->add_option("--seed", unseen_seed, "episode sampling seed");
  unseen_cmd->add_option("--out", unseen_out, "combined JSON output path");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "hyperparameter grid search");
  TrainCliOptions sweep_opt;
  std::string grid_tau, grid_lr, grid_wd, grid_batch, grid_lambdas, sweep_out;
  SweepSpec spec;
  sweep_cmd->add_option("--data", sweep_opt.data, "dataset file")->required();
  add_train_overrides(sweep_cmd, sweep_opt);
  sweep_cmd->add_option("--grid-tau", grid_tau, "comma list, e.g. 0.1,0.5");
  sweep_cmd->add_option("--grid-lr", grid_lr, "comma list");
  sweep_cmd->add_option("--grid-weight-decay", grid_wd, "comma list");
  sweep_cmd->add_option("--grid-batch-size", grid_batch, "comma list");
  sweep_cmd->add_option("--grid-lambdas", grid_lambdas,
                        "semicolon list of triples, e.g. 10,5,1;1,1,1");
  sweep_cmd->add_option("--max-combinations", spec.max_combinations, "grid cap");
  sweep_cmd->add_option("--out", sweep_out, "leaderboard JSON output path");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t grad_seed = 7;
  grad_cmd->add_option("--seed", grad_seed, "suite seed");

  // report
  auto* report_cmd = app.add_subcommand("report", "render a report JSON as a table");
  std::string report_in;
  report_cmd->add_option("--in", report_in, "report JSON file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(synth_cmd)) return run_synth(synth_cfg, synth_out);
    if (app.got_subcommand(train_cmd)) return run_train(train_opt);
    if (app.got_subcommand(eval_cmd)) {
      return run_eval(eval_checkpoint, eval_data, eval_split, eval_k, eval_metric,
                      eval_out);
    }
    if (app.got_subcommand(unseen_cmd)) {
      return run_eval_unseen(unseen_checkpoint, unseen_data, unseen_k, unseen_metric,
                             unseen_episodes, unseen_seed, unseen_out);
    }
    if (app.got_subcommand(sweep_cmd)) {
      if (!grid_tau.empty()) spec.taus = parse_double_list(grid_tau);
      if (!grid_lr.empty()) spec.lrs = parse_double_list(grid_lr);
      if (!grid_wd.empty()) spec.weight_decays = parse_double_list(grid_wd);
      if (!grid_batch.empty()) {
        for (double v : parse_double_list(grid_batch)) {
          spec.batch_sizes.push_back(static_cast<std::size_t>(v));
        }
      }
      if (!grid_lambdas.empty()) spec.lambda_sets = parse_lambda_sets(grid_lambdas);
      return run_sweep(sweep_opt, spec, sweep_out);
    }
    if (app.got_subcommand(grad_cmd)) return run_gradcheck(grad_seed);
    if (app.got_subcommand(report_cmd)) {
      std::cout << report_to_table(report_from_json(read_text_file(report_in)));
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace hiercon
