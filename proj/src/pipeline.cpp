#include "hiercon/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace hiercon {

namespace {

using nlohmann::json;

constexpr const char* kLambdaSuffix = "\xce\xbb";  // UTF-8 lowercase lambda

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t consumed = 0;
    const double v = std::stod(value, &consumed);
    if (consumed != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw InvalidConfig("bad numeric value for '" + key + "': " + value);
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const char* begin = value.data();
  auto [ptr, ec] = std::from_chars(begin, begin + value.size(), v);
  if (ec != std::errc{} || ptr != begin + value.size()) {
    throw InvalidConfig("bad integer value for '" + key + "': " + value);
  }
  return v;
}

std::vector<Level> parse_levels(const std::string& value) {
  std::vector<Level> levels;
  std::istringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string name = trim(item);
    if (name == "individual") levels.push_back(Level::individual);
    else if (name == "species") levels.push_back(Level::species);
    else if (name == "taxon") levels.push_back(Level::taxon);
    else throw InvalidConfig("unknown level '" + name + "'");
  }
  if (levels.empty()) throw InvalidConfig("levels list is empty");
  return levels;
}

void validate_train_config(const TrainConfig& cfg, const Dataset& ds) {
  if (ds.dim != cfg.arch.input_dim) {
    throw DimensionMismatch("dataset dim " + std::to_string(ds.dim) +
                            " != configured input dim " +
                            std::to_string(cfg.arch.input_dim));
  }
  if (cfg.epochs < 1) throw InvalidConfig("epochs must be >= 1");
  if (cfg.batch_size < 2) throw InvalidConfig("batch_size must be >= 2");
  if (cfg.augment_sigma < 0.0) throw InvalidConfig("augment_sigma must be >= 0");
  if (cfg.levels.empty()) throw InvalidConfig("at least one projector level required");
  // The loss consumes heads positionally finest-first.
  for (std::size_t j = 0; j < cfg.levels.size(); ++j) {
    if (cfg.levels[j] != level_from_index(j)) {
      throw InvalidConfig("levels must be a finest-first prefix of "
                          "(individual, species, taxon)");
    }
  }
  if (cfg.loss.variant == LossVariant::supcon && cfg.levels.size() != 1) {
    throw InvalidConfig("the SupCon variant trains the individual head only");
  }
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "SC", "HC", std::string("HC") + kLambdaSuffix, "HCE",
      std::string("HCE") + kLambdaSuffix};
  return names;
}

TrainConfig preset_config(const std::string& name) {
  TrainConfig cfg;
  const std::string n = trim(name);
  const bool lambda_hc = n == std::string("HC") + kLambdaSuffix || n == "HCl" || n == "HCL";
  const bool lambda_hce =
      n == std::string("HCE") + kLambdaSuffix || n == "HCEl" || n == "HCEL";

  if (n == "SC") {
    cfg.loss.variant = LossVariant::supcon;
    cfg.loss.lambdas = {1.0, 0.0, 0.0};
    cfg.levels = {Level::individual};
    cfg.preset = "SC";
  } else if (n == "HC") {
    cfg.loss.variant = LossVariant::himulcon;
    cfg.loss.lambdas = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    cfg.preset = "HC";
  } else if (lambda_hc) {
    cfg.loss.variant = LossVariant::himulcon;
    cfg.loss.lambdas = {10.0, 5.0, 1.0};
    cfg.preset = std::string("HC") + kLambdaSuffix;
  } else if (n == "HCE") {
    cfg.loss.variant = LossVariant::himulcone;
    cfg.loss.lambdas = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    cfg.preset = "HCE";
  } else if (lambda_hce) {
    cfg.loss.variant = LossVariant::himulcone;
    cfg.loss.lambdas = {10.0, 1.0, 1.0};
    cfg.preset = std::string("HCE") + kLambdaSuffix;
  } else {
    throw UnknownPreset("unknown preset '" + n + "'");
  }
  return cfg;
}

TrainOutcome train(const TrainConfig& cfg, const Dataset& ds) {
  validate_train_config(cfg, ds);

  EncoderParams params = init_params(cfg.arch, cfg.seed, cfg.levels);
  OptState opt = OptState::create(params, cfg.lr, cfg.weight_decay, cfg.beta1,
                                  cfg.beta2, cfg.eps);

  TrainHistory history;
  EncoderParams best_params = params;
  double best_acc = -1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(ds, Split::train, cfg.batch_size, cfg.seed, epoch);
    Rng augment_rng(Rng::mix(Rng::mix(cfg.seed, 0x61756d7eULL), epoch));

    double loss_sum = 0.0;
    std::vector<double> level_sums(cfg.levels.size(), 0.0);

    for (std::size_t b = 0; b < batches.size(); ++b) {
      Matrix features = batches[b].features;
      if (cfg.augment_sigma > 0.0) {
        for (std::size_t r = 0; r < features.rows; ++r) {
          const auto noisy = augment(features.row(r), cfg.augment_sigma, augment_rng);
          std::copy(noisy.begin(), noisy.end(), features.row(r).begin());
        }
      }

      auto [shared, shared_cache] = forward_shared(params, features);
      std::vector<Matrix> z;
      std::vector<ProjectorCache> caches;
      for (Level level : params.levels) {
        auto [zl, cache] = forward_projector(params, level, shared);
        z.push_back(std::move(zl));
        caches.push_back(std::move(cache));
      }

      LossResult loss;
      try {
        loss = evaluate_loss(z, batches[b].labels, ds.taxonomy, cfg.loss);
      } catch (const NoPositives& e) {
        throw NoPositives("epoch " + std::to_string(epoch) + " batch " +
                          std::to_string(b) + ": " + e.what());
      }

      const ParamGrads grads = backward(params, shared_cache, caches, loss.grad_wrt_z);
      opt_step(params, grads, opt);

      loss_sum += loss.total;
      for (std::size_t l = 0; l < loss.per_level.size(); ++l) {
        level_sums[l] += loss.per_level[l];
      }
    }

    EpochStats stats;
    stats.train_loss = loss_sum / static_cast<double>(batches.size());
    for (double s : level_sums) {
      stats.per_level_loss.push_back(s / static_cast<double>(batches.size()));
    }

    const EvalReport val_report =
        evaluate_closed(params, ds, Split::val, cfg.validation_k, cfg.metric);
    stats.val_balanced_accuracy = val_report.balanced_accuracy;
    history.epochs.push_back(std::move(stats));

    const double id_acc =
        val_report.balanced_accuracy[static_cast<std::size_t>(Level::individual)];
    if (id_acc > best_acc) {
      best_acc = id_acc;
      history.best_epoch = epoch;
      best_params = params;
    }
  }

  return TrainOutcome{std::move(best_params), std::move(history)};
}

std::string history_to_json(const TrainHistory& history) {
  json doc;
  doc["format_version"] = 1;
  doc["epochs"] = json::array();
  for (const auto& stats : history.epochs) {
    json epoch;
    epoch["train_loss"] = stats.train_loss;
    epoch["per_level_loss"] = stats.per_level_loss;
    epoch["val_balanced_accuracy"] = {
        {"taxon", stats.val_balanced_accuracy[static_cast<std::size_t>(Level::taxon)]},
        {"species",
         stats.val_balanced_accuracy[static_cast<std::size_t>(Level::species)]},
        {"id",
         stats.val_balanced_accuracy[static_cast<std::size_t>(Level::individual)]}};
    doc["epochs"].push_back(std::move(epoch));
  }
  doc["best_epoch"] = history.best_epoch;
  return doc.dump(2);
}

namespace {

json train_config_to_json(const TrainConfig& cfg) {
  json doc;
  if (!cfg.preset.empty()) doc["preset"] = cfg.preset;
  doc["arch"] = {{"input_dim", cfg.arch.input_dim},
                 {"adapter_hidden", cfg.arch.adapter_hidden},
                 {"shared_dim", cfg.arch.shared_dim},
                 {"projector_hidden", cfg.arch.projector_hidden},
                 {"projector_out", cfg.arch.projector_out},
                 {"activation",
                  cfg.arch.activation == Activation::relu ? "relu" : "identity"}};
  doc["loss"] = {{"variant", loss_variant_name(cfg.loss.variant)},
                 {"tau", cfg.loss.tau},
                 {"lambdas", cfg.loss.lambdas}};
  std::vector<std::string> levels;
  for (Level level : cfg.levels) levels.emplace_back(level_name(level));
  doc["levels"] = levels;
  doc["lr"] = cfg.lr;
  doc["weight_decay"] = cfg.weight_decay;
  doc["beta1"] = cfg.beta1;
  doc["beta2"] = cfg.beta2;
  doc["eps"] = cfg.eps;
  doc["batch_size"] = cfg.batch_size;
  doc["epochs"] = cfg.epochs;
  doc["augment_sigma"] = cfg.augment_sigma;
  doc["seed"] = cfg.seed;
  doc["validation_k"] = cfg.validation_k;
  doc["metric"] = metric_name(cfg.metric);
  return doc;
}

}  // namespace

SweepResult sweep(const SweepSpec& spec, const TrainConfig& base, const Dataset& ds) {
  auto axis_size = [](std::size_t n) { return n == 0 ? std::size_t{1} : n; };
  const std::size_t total = axis_size(spec.taus.size()) * axis_size(spec.lrs.size()) *
                            axis_size(spec.weight_decays.size()) *
                            axis_size(spec.batch_sizes.size()) *
                            axis_size(spec.lambda_sets.size());
  if (total == 0) throw InvalidConfig("sweep grid is empty");
  if (total > spec.max_combinations) {
    throw GridTooLarge("sweep grid has " + std::to_string(total) +
                       " combinations, cap is " +
                       std::to_string(spec.max_combinations));
  }

  SweepResult result;
  std::size_t order = 0;
  for (std::size_t it = 0; it < axis_size(spec.taus.size()); ++it) {
    for (std::size_t il = 0; il < axis_size(spec.lrs.size()); ++il) {
      for (std::size_t iw = 0; iw < axis_size(spec.weight_decays.size()); ++iw) {
        for (std::size_t ib = 0; ib < axis_size(spec.batch_sizes.size()); ++ib) {
          for (std::size_t ig = 0; ig < axis_size(spec.lambda_sets.size()); ++ig) {
            TrainConfig cfg = base;
            if (!spec.taus.empty()) cfg.loss.tau = spec.taus[it];
            if (!spec.lrs.empty()) cfg.lr = spec.lrs[il];
            if (!spec.weight_decays.empty()) cfg.weight_decay = spec.weight_decays[iw];
            if (!spec.batch_sizes.empty()) cfg.batch_size = spec.batch_sizes[ib];
            if (!spec.lambda_sets.empty()) cfg.loss.lambdas = spec.lambda_sets[ig];

            const TrainOutcome outcome = train(cfg, ds);
            SweepEntry entry;
            entry.config = cfg;
            entry.val_balanced_accuracy =
                outcome.history.epochs[outcome.history.best_epoch].val_balanced_accuracy;
            entry.order = order++;
            result.leaderboard.push_back(std::move(entry));
          }
        }
      }
    }
  }

  std::stable_sort(result.leaderboard.begin(), result.leaderboard.end(),
                   [](const SweepEntry& a, const SweepEntry& b) {
                     const double acc_a =
                         a.val_balanced_accuracy[static_cast<std::size_t>(Level::individual)];
                     const double acc_b =
                         b.val_balanced_accuracy[static_cast<std::size_t>(Level::individual)];
                     if (acc_a != acc_b) return acc_a > acc_b;
                     return a.config.lr < b.config.lr;
                   });
  result.best = result.leaderboard.front().config;
  return result;
}

std::string sweep_result_to_json(const SweepResult& result) {
  json doc;
  doc["format_version"] = 1;
  doc["leaderboard"] = json::array();
  for (std::size_t i = 0; i < result.leaderboard.size(); ++i) {
    const auto& entry = result.leaderboard[i];
    json row;
    row["rank"] = i + 1;
    row["val_balanced_accuracy"] = {
        {"taxon",
         entry.val_balanced_accuracy[static_cast<std::size_t>(Level::taxon)]},
        {"species",
         entry.val_balanced_accuracy[static_cast<std::size_t>(Level::species)]},
        {"id",
         entry.val_balanced_accuracy[static_cast<std::size_t>(Level::individual)]}};
    row["config"] = train_config_to_json(entry.config);
    doc["leaderboard"].push_back(std::move(row));
  }
  doc["best_config"] = train_config_to_json(result.best);
  return doc.dump(2);
}

void apply_config_entry(TrainConfig& cfg, const std::string& raw_key,
                        const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);

  if (key == "preset") {
    cfg = preset_config(value);
  } else if (key == "arch.input_dim") {
    cfg.arch.input_dim = to_u64(key, value);
  } else if (key == "arch.adapter_hidden") {
    cfg.arch.adapter_hidden = to_u64(key, value);
  } else if (key == "arch.shared_dim") {
    cfg.arch.shared_dim = to_u64(key, value);
  } else if (key == "arch.projector_hidden") {
    cfg.arch.projector_hidden = to_u64(key, value);
  } else if (key == "arch.projector_out") {
    cfg.arch.projector_out = to_u64(key, value);
  } else if (key == "arch.activation") {
    if (value == "relu") cfg.arch.activation = Activation::relu;
    else if (value == "identity") cfg.arch.activation = Activation::identity;
    else throw InvalidConfig("unknown activation '" + value + "'");
  } else if (key == "loss.variant") {
    cfg.loss.variant = loss_variant_from_name(value);
  } else if (key == "loss.tau") {
    cfg.loss.tau = to_double(key, value);
  } else if (key == "loss.lambda_id") {
    cfg.loss.lambdas[0] = to_double(key, value);
  } else if (key == "loss.lambda_species") {
    cfg.loss.lambdas[1] = to_double(key, value);
  } else if (key == "loss.lambda_taxon") {
    cfg.loss.lambdas[2] = to_double(key, value);
  } else if (key == "levels") {
    cfg.levels = parse_levels(value);
  } else if (key == "lr") {
    cfg.lr = to_double(key, value);
  } else if (key == "weight_decay") {
    cfg.weight_decay = to_double(key, value);
  } else if (key == "beta1") {
    cfg.beta1 = to_double(key, value);
  } else if (key == "beta2") {
    cfg.beta2 = to_double(key, value);
  } else if (key == "eps") {
    cfg.eps = to_double(key, value);
  } else if (key == "batch_size") {
    cfg.batch_size = to_u64(key, value);
  } else if (key == "epochs") {
    cfg.epochs = to_u64(key, value);
  } else if (key == "augment_sigma") {
    cfg.augment_sigma = to_double(key, value);
  } else if (key == "seed") {
    cfg.seed = to_u64(key, value);
  } else if (key == "validation_k") {
    cfg.validation_k = to_u64(key, value);
  } else if (key == "metric") {
    cfg.metric = metric_from_name(value);
  } else {
    throw InvalidConfig("unknown config key '" + key + "'");
  }
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());

  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(line_no) +
                       ": expected key = value");
    }
    entries.emplace_back(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }

  TrainConfig cfg;
  // The preset seeds the config; every other key overrides it.
  for (const auto& [key, value] : entries) {
    if (key == "preset") cfg = preset_config(value);
  }
  for (const auto& [key, value] : entries) {
    if (key != "preset") apply_config_entry(cfg, key, value);
  }
  return cfg;
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& entry : entries) w = std::max(w, entry.max_rel_err);
  return w;
}

namespace {

Taxonomy gradcheck_taxonomy() {
  std::vector<LabelTriple> triples;
  for (int t = 0; t < 2; ++t) {
    for (int s = 0; s < 2; ++s) {
      const std::string taxon = "X" + std::to_string(t);
      const std::string species = taxon + "_S" + std::to_string(s);
      for (int i = 0; i < 2; ++i) {
        triples.push_back({species + "_I" + std::to_string(i), species, taxon});
      }
    }
  }
  return build_taxonomy(triples);
}

std::vector<LabelTriple> random_labels(const Taxonomy& tax, std::size_t b, Rng& rng) {
  const auto& individuals = tax.classes(Level::individual);
  std::vector<LabelTriple> labels;
  for (std::size_t i = 0; i < b; ++i) {
    const std::string& individual = individuals[rng.bounded(individuals.size())];
    const auto [species, taxon] = ancestors(tax, individual);
    labels.push_back({individual, species, taxon});
  }
  labels[1] = labels[0];  // at least one individual-level positive pair
  return labels;
}

Matrix random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.data) v = rng.normal();
  for (std::size_t i = 0; i < rows; ++i) {
    auto row = m.row(i);
    const double norm = std::sqrt(dot(row, row));
    for (auto& v : row) v /= norm;
  }
  return m;
}

// Batch with strictly active species-level clamps: one individual's two
// samples sit nearly antipodal in the individual projection (large pair
// loss), while all species projections form tight clusters (small pair
// losses that the individual-level maximum then clamps).
struct ClampBatch {
  std::vector<LabelTriple> labels;
  std::vector<Matrix> z;
};

ClampBatch clamp_active_batch(Rng& rng) {
  ClampBatch batch;
  batch.labels = {{"X0_S0_I0", "X0_S0", "X0"}, {"X0_S0_I0", "X0_S0", "X0"},
                  {"X0_S1_I0", "X0_S1", "X0"}, {"X0_S1_I1", "X0_S1", "X0"},
                  {"X1_S0_I0", "X1_S0", "X1"}, {"X1_S0_I1", "X1_S0", "X1"},
                  {"X1_S1_I0", "X1_S1", "X1"}, {"X1_S1_I1", "X1_S1", "X1"}};
  const std::size_t b = batch.labels.size();
  const std::size_t p = 4;

  auto jitter = [&](std::initializer_list<double> base) {
    std::vector<double> v(base);
    for (auto& x : v) x += 0.01 * rng.normal();
    const double norm = std::sqrt(dot(v, v));
    for (auto& x : v) x /= norm;
    return v;
  };
  auto fill = [&](Matrix& m, std::size_t row, const std::vector<double>& v) {
    std::copy(v.begin(), v.end(), m.row(row).begin());
  };

  Matrix z_id(b, p);
  fill(z_id, 0, jitter({1, 0, 0, 0}));
  fill(z_id, 1, jitter({-1, 0.05, 0, 0}));  // antipodal to its only positive
  fill(z_id, 2, jitter({0, 1, 0, 0}));
  fill(z_id, 3, jitter({0, 0, 1, 0}));
  fill(z_id, 4, jitter({0, 0, 0, 1}));
  fill(z_id, 5, jitter({0.5, 0.5, 0, 0}));
  fill(z_id, 6, jitter({0, 0.5, 0.5, 0}));
  fill(z_id, 7, jitter({0, 0.5, 0, 0.5}));

  Matrix z_sp(b, p);
  fill(z_sp, 0, jitter({1, 0.05, 0, 0}));
  fill(z_sp, 1, jitter({1, 0, 0.05, 0}));
  fill(z_sp, 2, jitter({0, 1, 0.05, 0}));
  fill(z_sp, 3, jitter({0, 1, 0, 0.05}));
  fill(z_sp, 4, jitter({0, 0, 1, 0.05}));
  fill(z_sp, 5, jitter({0.05, 0, 1, 0}));
  fill(z_sp, 6, jitter({0, 0.05, 0, 1}));
  fill(z_sp, 7, jitter({0.05, 0, 0, 1}));

  Matrix z_tx(b, p);
  fill(z_tx, 0, jitter({1, 0.1, 0, 0}));
  fill(z_tx, 1, jitter({1, 0, 0.1, 0}));
  fill(z_tx, 2, jitter({0.9, 0.3, 0, 0}));
  fill(z_tx, 3, jitter({0.9, 0, 0.3, 0}));
  fill(z_tx, 4, jitter({0, 0.1, 1, 0}));
  fill(z_tx, 5, jitter({0.1, 0, 1, 0}));
  fill(z_tx, 6, jitter({0, 0.3, 0.9, 0}));
  fill(z_tx, 7, jitter({0, 0, 0.9, 0.3}));

  batch.z = {std::move(z_id), std::move(z_sp), std::move(z_tx)};
  return batch;
}

double network_loss_value(const EncoderParams& params, const Matrix& features,
                          const std::vector<LabelTriple>& labels,
                          const Taxonomy& tax, const LossConfig& cfg,
                          const std::vector<double>* floors) {
  auto [shared, shared_cache] = forward_shared(params, features);
  std::vector<Matrix> z;
  for (Level level : params.levels) {
    z.push_back(forward_projector(params, level, shared).first);
  }
  if (floors != nullptr) {
    return himulcone_with_floors(z, labels, tax, cfg, *floors).total;
  }
  return evaluate_loss(z, labels, tax, cfg).total;
}

// Differencing is only meaningful at a point where the composition is smooth
// on the +-step neighborhood: every rectifier preactivation, every
// pre-normalization row norm, and (for the enforcing variant) every pair
// loss's distance to the clamp floor must clear a margin. Zero-initialized
// biases make exact-zero projector rows likely, so the check jitters all
// biases and retries with a derived seed while any margin fails.
struct CheckPoint {
  EncoderParams params;
  Matrix features;
};

bool margins_ok(const SharedCache& shared_cache,
                const std::vector<ProjectorCache>& caches,
                const std::vector<Matrix>& z, const std::vector<LabelTriple>& labels,
                const Taxonomy& tax, const LossConfig& cfg, const LossResult& loss) {
  constexpr double kPreMargin = 1e-3;
  constexpr double kNormMargin = 5e-2;
  constexpr double kClampMargin = 1e-3;

  for (double v : shared_cache.pre1.data) {
    if (std::abs(v) < kPreMargin) return false;
  }
  for (const auto& cache : caches) {
    for (double v : cache.pre1.data) {
      if (std::abs(v) < kPreMargin) return false;
    }
    for (double n : cache.norms) {
      if (n < kNormMargin) return false;
    }
  }
  if (cfg.variant == LossVariant::himulcone) {
    for (std::size_t l = 1; l < z.size(); ++l) {
      const double floor = loss.per_pair_max[l - 1];
      const PairMask mask = positive_mask(tax, labels, level_from_index(l));
      for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t p = 0; p < labels.size(); ++p) {
          if (!mask(i, p)) continue;
          if (std::abs(pair_loss(z[l], i, p, cfg.tau) - floor) < kClampMargin) {
            return false;
          }
        }
      }
    }
  }
  return true;
}

double network_grad_check(const LossConfig& cfg, const std::vector<Level>& levels,
                          const std::vector<LabelTriple>& labels,
                          const Taxonomy& tax, std::uint64_t seed, double step) {
  ArchConfig arch;
  arch.input_dim = 5;
  arch.adapter_hidden = 6;
  arch.shared_dim = 4;
  arch.projector_hidden = 5;
  arch.projector_out = 3;

  EncoderParams params;
  Matrix features;
  SharedCache shared_cache;
  std::vector<Matrix> z;
  std::vector<ProjectorCache> caches;
  LossResult loss;

  bool found = false;
  for (std::uint64_t attempt = 0; attempt < 32 && !found; ++attempt) {
    const std::uint64_t attempt_seed = seed + 101 * attempt;
    params = init_params(arch, attempt_seed, levels);
    Rng jitter(Rng::mix(attempt_seed, 99));
    auto jitter_bias = [&](std::vector<double>& b) {
      for (auto& v : b) v += jitter.uniform_symmetric(0.5);
    };
    jitter_bias(params.adapter.b1);
    jitter_bias(params.adapter.b2);
    for (auto& proj : params.projectors) {
      jitter_bias(proj.b1);
      jitter_bias(proj.b2);
    }

    Rng rng(Rng::mix(attempt_seed, 17));
    features = Matrix(labels.size(), arch.input_dim);
    for (auto& v : features.data) v = rng.normal();

    auto shared_pair = forward_shared(params, features);
    shared_cache = std::move(shared_pair.second);
    z.clear();
    caches.clear();
    for (Level level : params.levels) {
      auto [zl, cache] = forward_projector(params, level, shared_pair.first);
      z.push_back(std::move(zl));
      caches.push_back(std::move(cache));
    }
    loss = evaluate_loss(z, labels, tax, cfg);
    found = margins_ok(shared_cache, caches, z, labels, tax, cfg, loss);
  }
  if (!found) throw Error("gradcheck internal: no non-degenerate check point found");

  const ParamGrads grads = backward(params, shared_cache, caches, loss.grad_wrt_z);

  std::vector<double> floors;
  const std::vector<double>* floors_ptr = nullptr;
  if (cfg.variant == LossVariant::himulcone) {
    floors.push_back(0.0);
    for (std::size_t l = 0; l + 1 < z.size(); ++l) floors.push_back(loss.per_pair_max[l]);
    floors_ptr = &floors;
  }

  std::vector<std::vector<double>*> param_tensors;
  for_each_tensor(params, [&](std::vector<double>& t) { param_tensors.push_back(&t); });
  std::vector<const std::vector<double>*> grad_tensors;
  for_each_tensor(const_cast<ParamGrads&>(grads),
                  [&](std::vector<double>& t) { grad_tensors.push_back(&t); });

  double max_rel_err = 0.0;
  for (std::size_t t = 0; t < param_tensors.size(); ++t) {
    auto& tensor = *param_tensors[t];
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + step;
      const double up = network_loss_value(params, features, labels, tax, cfg, floors_ptr);
      tensor[i] = saved - step;
      const double down = network_loss_value(params, features, labels, tax, cfg, floors_ptr);
      tensor[i] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double a = (*grad_tensors[t])[i];
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      max_rel_err = std::max(max_rel_err, rel);
    }
  }
  return max_rel_err;
}

}  // namespace

GradCheckReport run_gradcheck_suite(std::uint64_t seed) {
  constexpr double kStep = 1e-5;
  const Taxonomy tax = gradcheck_taxonomy();
  GradCheckReport report;

  Rng rng(seed);
  const std::size_t b = 8;
  const std::size_t p = 4;
  const auto labels = random_labels(tax, b, rng);

  {
    LossConfig cfg;
    cfg.variant = LossVariant::supcon;
    std::vector<Matrix> z = {random_unit_rows(b, p, rng)};
    report.entries.push_back({"SupCon loss", grad_check(z, labels, tax, cfg, kStep)});
  }
  {
    LossConfig cfg;
    cfg.variant = LossVariant::himulcon;
    std::vector<Matrix> z = {random_unit_rows(b, p, rng), random_unit_rows(b, p, rng),
                             random_unit_rows(b, p, rng)};
    report.entries.push_back({"HiMulCon loss", grad_check(z, labels, tax, cfg, kStep)});
  }
  {
    LossConfig cfg;
    cfg.variant = LossVariant::himulcone;
    const ClampBatch batch = clamp_active_batch(rng);
    // The batch must actually exercise the clamp.
    const double plain = himulcon(batch.z, batch.labels, tax, cfg).total;
    const double enforced = himulcone(batch.z, batch.labels, tax, cfg).total;
    if (!(enforced > plain)) {
      throw Error("gradcheck internal: clamp batch has no active clamp");
    }
    report.entries.push_back(
        {"HiMulConE loss (clamps active)",
         grad_check(batch.z, batch.labels, tax, cfg, kStep)});
  }
  {
    LossConfig cfg;
    cfg.variant = LossVariant::supcon;
    report.entries.push_back(
        {"SupCon network", network_grad_check(cfg, {Level::individual}, labels, tax,
                                              seed + 1, kStep)});
  }
  {
    LossConfig cfg;
    cfg.variant = LossVariant::himulcon;
    report.entries.push_back(
        {"HiMulCon network",
         network_grad_check(cfg, {Level::individual, Level::species, Level::taxon},
                            labels, tax, seed + 2, kStep)});
  }
  {
    LossConfig cfg;
    cfg.variant = LossVariant::himulcone;
    report.entries.push_back(
        {"HiMulConE network",
         network_grad_check(cfg, {Level::individual, Level::species, Level::taxon},
                            labels, tax, seed + 3, kStep)});
  }
  return report;
}

}  // namespace hiercon
