#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hiercon/dataset.hpp"
#include "hiercon/eval.hpp"
#include "hiercon/losses.hpp"
#include "hiercon/network.hpp"

namespace hiercon {

/// Everything one training run needs. `levels` lists the projector heads as a
/// finest-first prefix of (individual, species, taxon); the loss consumes the
/// heads positionally in that order.
struct TrainConfig {
  ArchConfig arch;
  LossConfig loss;
  std::vector<Level> levels = {Level::individual, Level::species, Level::taxon};
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 128;
  std::size_t epochs = 50;
  double augment_sigma = 0.0;
  std::uint64_t seed = 0;
  std::size_t validation_k = 1;
  Metric metric = Metric::cosine;
  std::string preset;  // informational; set when built from a preset
};

/// Experiment presets:
///   SC   SupCon, individual head only
///   HC   HiMulCon, lambdas (1/3, 1/3, 1/3)
///   HCl  HiMulCon, lambdas (10, 5, 1)
///   HCE  HiMulConE, lambdas (1/3, 1/3, 1/3)
///   HCEl HiMulConE, lambdas (10, 1, 1)
/// Both the ASCII alias (HCl/HCEl) and the Greek-letter spelling are accepted.
TrainConfig preset_config(const std::string& name);
const std::vector<std::string>& preset_names();

struct EpochStats {
  double train_loss = 0.0;
  std::vector<double> per_level_loss;  // lambda-weighted, one entry per head
  std::array<double, kLevelCount> val_balanced_accuracy{};
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;  // argmax of validation ID accuracy, earliest tie
};

struct TrainOutcome {
  EncoderParams params;  // parameters of the best epoch
  TrainHistory history;
};

/// Full training loop: per epoch, iterate the shuffled train batches, compute
/// the configured loss, backprop, and step the optimizer; then score the val
/// split with kNN at cfg.validation_k. Deterministic given (cfg, ds).
TrainOutcome train(const TrainConfig& cfg, const Dataset& ds);

std::string history_to_json(const TrainHistory& history);

/// Grid axes for the hyperparameter sweep; an empty axis keeps the base
/// config's value.
struct SweepSpec {
  std::vector<double> taus;
  std::vector<double> lrs;
  std::vector<double> weight_decays;
  std::vector<std::size_t> batch_sizes;
  std::vector<std::array<double, kLevelCount>> lambda_sets;
  std::size_t max_combinations = 64;
};

struct SweepEntry {
  TrainConfig config;
  std::array<double, kLevelCount> val_balanced_accuracy{};
  std::size_t order = 0;  // insertion order in the grid walk
};

struct SweepResult {
  TrainConfig best;
  std::vector<SweepEntry> leaderboard;  // sorted by validation ID accuracy
};

/// Exhaustive grid evaluation, selecting on validation ID balanced accuracy
/// (k = cfg.validation_k). Ties sort by lower learning rate, then insertion
/// order. Throws GridTooLarge past spec.max_combinations.
SweepResult sweep(const SweepSpec& spec, const TrainConfig& base, const Dataset& ds);

std::string sweep_result_to_json(const SweepResult& result);

/// key = value text config mirroring TrainConfig field names; `#` starts a
/// comment. An optional `preset` key seeds the config before other keys.
TrainConfig load_train_config(const std::filesystem::path& path);
/// Applies one key/value override; shared by the file parser and CLI --set.
void apply_config_entry(TrainConfig& cfg, const std::string& key,
                        const std::string& value);

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst() const;
  bool passed(double tolerance = 1e-4) const { return worst() <= tolerance; }
};

/// Finite-difference suite over all three loss variants, both at the loss
/// level (gradients w.r.t. z) and through the full network (gradients w.r.t.
/// every parameter). The HiMulConE batch is constructed with strictly active
/// clamps.
GradCheckReport run_gradcheck_suite(std::uint64_t seed = 7);

/// Entry point behind the command line tool; returns the process exit code
/// (0 success, 1 usage error, 2 runtime failure).
int cli_main(int argc, char** argv);

}  // namespace hiercon
