#include "hiercon/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace hiercon {

namespace {

using nlohmann::json;

void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto row = m.row(i);
    const double norm = std::sqrt(dot(row, row));
    if (norm > 0.0) {
      for (auto& v : row) v /= norm;
    }
  }
}

double distance(Metric metric, std::span<const double> a, std::span<const double> b) {
  if (metric == Metric::cosine) return 1.0 - dot(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

// Vote with the documented tie-breaks: count, then smallest summed distance,
// then lexicographic label.
std::string majority_label(const std::vector<std::pair<double, std::size_t>>& neighbors,
                           const ReferenceSet& ref, Level level) {
  std::map<std::string, std::pair<std::size_t, double>> votes;  // label -> (count, dist sum)
  for (const auto& [dist, idx] : neighbors) {
    auto& entry = votes[trim(ref.labels[idx].at(level))];
    entry.first += 1;
    entry.second += dist;
  }
  const std::string* best = nullptr;
  for (const auto& [label, entry] : votes) {
    if (best == nullptr) {
      best = &label;
      continue;
    }
    const auto& best_entry = votes.at(*best);
    if (entry.first > best_entry.first ||
        (entry.first == best_entry.first && entry.second < best_entry.second)) {
      best = &label;
    }
    // equal count and equal summed distance: map order is lexicographic, keep
  }
  return *best;
}

// Canonical row order for the bioacoustic species codes; species outside the
// list sort lexicographically after it.
const std::vector<std::string> kPreferredSpeciesOrder = {"CHF", "TP", "LO", "EEO",
                                                         "SH", "HY", "GW"};

std::vector<std::string> ordered_species(const std::set<std::string>& present) {
  std::vector<std::string> out;
  for (const auto& sp : kPreferredSpeciesOrder) {
    if (present.count(sp)) out.push_back(sp);
  }
  for (const auto& sp : present) {
    if (std::find(kPreferredSpeciesOrder.begin(), kPreferredSpeciesOrder.end(), sp) ==
        kPreferredSpeciesOrder.end()) {
      out.push_back(sp);
    }
  }
  return out;
}

struct LabeledPredictions {
  std::vector<PredictionTriple> preds;
  std::vector<LabelTriple> truths;
};

void fill_report_from_predictions(EvalReport& report, const LabeledPredictions& lp,
                                  const Taxonomy& tax) {
  for (Level level : kAllLevels) {
    std::vector<std::string> preds, truths;
    preds.reserve(lp.preds.size());
    truths.reserve(lp.truths.size());
    for (std::size_t i = 0; i < lp.preds.size(); ++i) {
      preds.push_back(lp.preds[i].at(level));
      truths.push_back(lp.truths[i].at(level));
    }
    report.balanced_accuracy[static_cast<std::size_t>(level)] =
        balanced_accuracy(preds, truths);
  }

  std::set<std::string> species_present;
  for (const auto& t : lp.truths) species_present.insert(t.species);
  for (const auto& sp : ordered_species(species_present)) {
    SpeciesBreakdown row;
    row.species = sp;
    std::vector<std::string> id_preds, id_truths, sp_preds, sp_truths;
    for (std::size_t i = 0; i < lp.truths.size(); ++i) {
      if (lp.truths[i].species != sp) continue;
      id_preds.push_back(lp.preds[i].individual);
      id_truths.push_back(lp.truths[i].individual);
      sp_preds.push_back(lp.preds[i].species);
      sp_truths.push_back(lp.truths[i].species);
    }
    row.n_queries = id_truths.size();
    row.id_accuracy = balanced_accuracy(id_preds, id_truths);
    row.species_accuracy = balanced_accuracy(sp_preds, sp_truths);
    report.per_species.push_back(std::move(row));
  }

  report.consistency = check_consistency(tax, lp.preds);
}

ReferenceSet reference_from_indices(const Dataset& ds, const Matrix& embeddings,
                                    const std::vector<std::size_t>& indices,
                                    const std::vector<RefSource>& sources,
                                    Metric metric) {
  std::vector<std::string> keys;
  std::vector<LabelTriple> labels;
  keys.reserve(indices.size());
  labels.reserve(indices.size());
  for (const std::size_t idx : indices) {
    keys.push_back(ds.records[idx].key);
    labels.push_back(ds.records[idx].label);
  }
  return build_reference(std::move(keys), embeddings, std::move(labels), sources,
                         metric);
}

Matrix raw_features(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Matrix m(indices.size(), ds.dim);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& f = ds.records[indices[r]].features;
    std::copy(f.begin(), f.end(), m.row(r).begin());
  }
  return m;
}

EvalReport evaluate_closed_impl(const Dataset& ds, std::size_t k, Metric metric,
                                const Matrix& ref_embeddings,
                                const std::vector<std::size_t>& ref_indices,
                                const Matrix& query_embeddings,
                                const std::vector<std::size_t>& query_indices) {
  const ReferenceSet ref = reference_from_indices(
      ds, ref_embeddings, ref_indices,
      std::vector<RefSource>(ref_indices.size(), RefSource::train), metric);

  LabeledPredictions lp;
  Matrix queries = query_embeddings;
  if (metric == Metric::cosine) normalize_rows(queries);
  for (std::size_t q = 0; q < query_indices.size(); ++q) {
    lp.preds.push_back(
        knn_predict(ref, queries.row(q), std::nullopt, k, metric, false));
    lp.truths.push_back(ds.records[query_indices[q]].label);
  }

  EvalReport report;
  report.k = k;
  report.metric = metric;
  fill_report_from_predictions(report, lp, ds.taxonomy);
  return report;
}

}  // namespace

const char* metric_name(Metric metric) {
  return metric == Metric::cosine ? "cosine" : "euclidean";
}

Metric metric_from_name(const std::string& name) {
  if (name == "cosine") return Metric::cosine;
  if (name == "euclidean") return Metric::euclidean;
  throw InvalidConfig("unknown metric '" + name + "'");
}

ReferenceSet build_reference(std::vector<std::string> keys, Matrix embeddings,
                             std::vector<LabelTriple> labels,
                             std::vector<RefSource> sources, Metric metric) {
  if (keys.size() != embeddings.rows || labels.size() != embeddings.rows ||
      sources.size() != embeddings.rows) {
    throw ShapeMismatch("reference fields disagree on size");
  }
  if (embeddings.rows == 0) throw EmptyReference("reference set is empty");
  if (metric == Metric::cosine) normalize_rows(embeddings);
  return ReferenceSet{std::move(keys), std::move(embeddings), std::move(labels),
                      std::move(sources), metric};
}

PredictionTriple knn_predict(const ReferenceSet& ref, std::span<const double> query,
                             const std::optional<std::string>& query_key,
                             std::size_t k, Metric metric, bool exclude_self) {
  if (metric != ref.metric) {
    throw InvalidConfig("metric does not match the reference set's contract");
  }
  if (query.size() != ref.embeddings.cols) {
    throw ShapeMismatch("query dimension does not match reference embeddings");
  }
  if (k < 1) throw InvalidConfig("k must be >= 1");

  std::vector<double> normalized;
  if (metric == Metric::cosine) {
    normalized.assign(query.begin(), query.end());
    const double norm = std::sqrt(dot(normalized, normalized));
    if (norm > 0.0) {
      for (auto& v : normalized) v /= norm;
    }
    query = normalized;
  }

  std::vector<std::pair<double, std::size_t>> candidates;  // (distance, index)
  candidates.reserve(ref.embeddings.rows);
  for (std::size_t i = 0; i < ref.embeddings.rows; ++i) {
    if (exclude_self && query_key.has_value() && ref.keys[i] == *query_key) continue;
    candidates.emplace_back(distance(metric, query, ref.embeddings.row(i)), i);
  }
  if (candidates.empty()) throw EmptyReference("no references left after self-exclusion");
  if (k > candidates.size()) {
    throw InvalidConfig("k exceeds the effective reference size");
  }

  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                    candidates.end());
  candidates.resize(k);

  PredictionTriple pred;
  pred.individual = majority_label(candidates, ref, Level::individual);
  pred.species = majority_label(candidates, ref, Level::species);
  pred.taxon = majority_label(candidates, ref, Level::taxon);
  return pred;
}

double balanced_accuracy(const std::vector<std::string>& preds,
                         const std::vector<std::string>& truths) {
  if (preds.size() != truths.size()) {
    throw LengthMismatch("prediction and truth lists differ in length");
  }
  if (truths.empty()) throw LengthMismatch("empty prediction list");

  std::map<std::string, std::pair<std::size_t, std::size_t>> per_class;  // (correct, total)
  for (std::size_t i = 0; i < truths.size(); ++i) {
    auto& entry = per_class[truths[i]];
    entry.second += 1;
    if (preds[i] == truths[i]) entry.first += 1;
  }
  double recall_sum = 0.0;
  for (const auto& [cls, entry] : per_class) {
    recall_sum += static_cast<double>(entry.first) / static_cast<double>(entry.second);
  }
  return recall_sum / static_cast<double>(per_class.size());
}

Matrix embed_shared(const EncoderParams& params, const Dataset& ds,
                    const std::vector<std::size_t>& indices) {
  const Matrix features = raw_features(ds, indices);
  return forward_shared(params, features).first;
}

EvalReport evaluate_closed(const EncoderParams& params, const Dataset& ds,
                           Split split, std::size_t k, Metric metric) {
  if (split != Split::val && split != Split::test) {
    throw InvalidConfig("closed-set evaluation expects the val or test split");
  }
  const auto query_indices = ds.split_indices(split);
  if (query_indices.empty()) {
    throw EmptySplit(std::string("split '") + split_name(split) + "' is empty");
  }
  const auto ref_indices = ds.split_indices(Split::train);
  if (ref_indices.empty()) throw EmptyReference("train split is empty");

  return evaluate_closed_impl(ds, k, metric, embed_shared(params, ds, ref_indices),
                              ref_indices, embed_shared(params, ds, query_indices),
                              query_indices);
}

EvalReport evaluate_closed_raw(const Dataset& ds, Split split, std::size_t k,
                               Metric metric) {
  if (split != Split::val && split != Split::test) {
    throw InvalidConfig("closed-set evaluation expects the val or test split");
  }
  const auto query_indices = ds.split_indices(split);
  if (query_indices.empty()) {
    throw EmptySplit(std::string("split '") + split_name(split) + "' is empty");
  }
  const auto ref_indices = ds.split_indices(Split::train);
  if (ref_indices.empty()) throw EmptyReference("train split is empty");

  return evaluate_closed_impl(ds, k, metric, raw_features(ds, ref_indices),
                              ref_indices, raw_features(ds, query_indices),
                              query_indices);
}

EvalReport evaluate_unseen_nn(const EncoderParams& params, const Dataset& ds,
                              std::size_t k, Metric metric) {
  const auto unseen_indices = ds.split_indices(Split::unseen);
  if (unseen_indices.empty()) throw EmptySplit("unseen split is empty");
  const auto train_indices = ds.split_indices(Split::train);

  std::vector<std::size_t> ref_indices = train_indices;
  ref_indices.insert(ref_indices.end(), unseen_indices.begin(), unseen_indices.end());
  std::vector<RefSource> sources(train_indices.size(), RefSource::train);
  sources.insert(sources.end(), unseen_indices.size(), RefSource::unseen);

  const ReferenceSet ref = reference_from_indices(
      ds, embed_shared(params, ds, ref_indices), ref_indices, sources, metric);

  Matrix queries = embed_shared(params, ds, unseen_indices);
  if (metric == Metric::cosine) normalize_rows(queries);

  LabeledPredictions lp;
  for (std::size_t q = 0; q < unseen_indices.size(); ++q) {
    const auto& rec = ds.records[unseen_indices[q]];
    lp.preds.push_back(knn_predict(ref, queries.row(q), rec.key, k, metric, true));
    lp.truths.push_back(rec.label);
  }

  EvalReport report;
  report.k = k;
  report.metric = metric;
  fill_report_from_predictions(report, lp, ds.taxonomy);
  return report;
}

EvalReport one_shot_episodes(const EncoderParams& params, const Dataset& ds,
                             std::size_t episodes, std::size_t k, Metric metric,
                             std::uint64_t seed) {
  if (episodes < 1) throw InvalidConfig("episode count must be >= 1");
  const auto unseen_indices = ds.split_indices(Split::unseen);
  if (unseen_indices.empty()) throw EmptySplit("unseen split is empty");
  const auto train_indices = ds.split_indices(Split::train);

  // Unseen classes in sorted label order; the per-episode support draw
  // iterates them in this order.
  std::map<std::string, std::vector<std::size_t>> by_class;  // positions in unseen_indices
  for (std::size_t pos = 0; pos < unseen_indices.size(); ++pos) {
    by_class[ds.records[unseen_indices[pos]].label.individual].push_back(pos);
  }
  for (const auto& [cls, members] : by_class) {
    if (members.size() < 2) {
      throw InsufficientExamples("unseen class '" + cls +
                                 "' needs at least 2 examples for 1-shot episodes");
    }
  }

  const Matrix unseen_embeddings = embed_shared(params, ds, unseen_indices);
  const Matrix train_embeddings = train_indices.empty()
                                      ? Matrix(0, unseen_embeddings.cols)
                                      : embed_shared(params, ds, train_indices);
  Matrix queries = unseen_embeddings;
  if (metric == Metric::cosine) normalize_rows(queries);

  std::array<double, kLevelCount> accuracy_sums{};
  LabeledPredictions pooled;

  for (std::size_t episode = 0; episode < episodes; ++episode) {
    Rng rng(Rng::mix(seed, episode));
    std::vector<std::size_t> support_positions;
    for (const auto& [cls, members] : by_class) {
      support_positions.push_back(members[rng.bounded(members.size())]);
    }

    Matrix ref_embeddings(support_positions.size() + train_indices.size(),
                          unseen_embeddings.cols);
    std::vector<std::string> keys;
    std::vector<LabelTriple> labels;
    std::vector<RefSource> sources;
    for (std::size_t s = 0; s < support_positions.size(); ++s) {
      const auto& rec = ds.records[unseen_indices[support_positions[s]]];
      std::copy(unseen_embeddings.row(support_positions[s]).begin(),
                unseen_embeddings.row(support_positions[s]).end(),
                ref_embeddings.row(s).begin());
      keys.push_back(rec.key);
      labels.push_back(rec.label);
      sources.push_back(RefSource::support);
    }
    for (std::size_t t = 0; t < train_indices.size(); ++t) {
      std::copy(train_embeddings.row(t).begin(), train_embeddings.row(t).end(),
                ref_embeddings.row(support_positions.size() + t).begin());
      keys.push_back(ds.records[train_indices[t]].key);
      labels.push_back(ds.records[train_indices[t]].label);
      sources.push_back(RefSource::train);
    }
    const ReferenceSet ref = build_reference(std::move(keys), std::move(ref_embeddings),
                                             std::move(labels), std::move(sources),
                                             metric);

    LabeledPredictions episode_lp;
    const std::set<std::size_t> support_set(support_positions.begin(),
                                            support_positions.end());
    for (std::size_t pos = 0; pos < unseen_indices.size(); ++pos) {
      if (support_set.count(pos)) continue;
      const auto& rec = ds.records[unseen_indices[pos]];
      episode_lp.preds.push_back(
          knn_predict(ref, queries.row(pos), rec.key, k, metric, false));
      episode_lp.truths.push_back(rec.label);
    }

    for (Level level : kAllLevels) {
      std::vector<std::string> preds, truths;
      for (std::size_t i = 0; i < episode_lp.preds.size(); ++i) {
        preds.push_back(episode_lp.preds[i].at(level));
        truths.push_back(episode_lp.truths[i].at(level));
      }
      accuracy_sums[static_cast<std::size_t>(level)] += balanced_accuracy(preds, truths);
    }
    pooled.preds.insert(pooled.preds.end(), episode_lp.preds.begin(),
                        episode_lp.preds.end());
    pooled.truths.insert(pooled.truths.end(), episode_lp.truths.begin(),
                         episode_lp.truths.end());
  }

  EvalReport report;
  report.k = k;
  report.metric = metric;
  report.episodes = episodes;
  fill_report_from_predictions(report, pooled, ds.taxonomy);
  // Mean per-episode accuracy replaces the pooled value.
  for (Level level : kAllLevels) {
    report.balanced_accuracy[static_cast<std::size_t>(level)] =
        accuracy_sums[static_cast<std::size_t>(level)] / static_cast<double>(episodes);
  }
  return report;
}

std::string report_to_json(const EvalReport& report) {
  json doc;
  doc["format_version"] = 1;
  doc["balanced_accuracy"] = {
      {"taxon", report.balanced_accuracy[static_cast<std::size_t>(Level::taxon)]},
      {"species", report.balanced_accuracy[static_cast<std::size_t>(Level::species)]},
      {"id", report.balanced_accuracy[static_cast<std::size_t>(Level::individual)]}};
  doc["per_species"] = json::array();
  for (const auto& row : report.per_species) {
    doc["per_species"].push_back({{"species", row.species},
                                  {"species_accuracy", row.species_accuracy},
                                  {"id_accuracy", row.id_accuracy},
                                  {"n_queries", row.n_queries}});
  }
  doc["consistency"] = {{"species_id", report.consistency.species_id_errors},
                        {"taxon_species", report.consistency.taxon_species_errors},
                        {"total_predictions", report.consistency.total_predictions}};
  doc["k"] = report.k;
  doc["metric"] = metric_name(report.metric);
  if (report.episodes.has_value()) doc["episodes"] = *report.episodes;
  return doc.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad report JSON: ") + e.what());
  }
  EvalReport report;
  try {
    const auto& acc = doc.at("balanced_accuracy");
    report.balanced_accuracy[static_cast<std::size_t>(Level::taxon)] = acc.at("taxon");
    report.balanced_accuracy[static_cast<std::size_t>(Level::species)] = acc.at("species");
    report.balanced_accuracy[static_cast<std::size_t>(Level::individual)] = acc.at("id");
    for (const auto& row : doc.at("per_species")) {
      SpeciesBreakdown sb;
      sb.species = row.at("species");
      sb.species_accuracy = row.at("species_accuracy");
      sb.id_accuracy = row.at("id_accuracy");
      sb.n_queries = row.value("n_queries", 0u);
      report.per_species.push_back(std::move(sb));
    }
    report.consistency.species_id_errors = doc.at("consistency").at("species_id");
    report.consistency.taxon_species_errors = doc.at("consistency").at("taxon_species");
    report.consistency.total_predictions =
        doc.at("consistency").value("total_predictions", 0u);
    report.k = doc.at("k");
    report.metric = metric_from_name(doc.at("metric"));
    if (doc.contains("episodes")) report.episodes = doc["episodes"].get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad report JSON: ") + e.what());
  }
  return report;
}

std::string report_to_table(const EvalReport& report) {
  std::ostringstream out;
  char line[160];

  std::snprintf(line, sizeof(line), "%-14s %10s %10s %8s\n", "Species", "Species",
                "ID", "N");
  out << line;
  out << std::string(46, '-') << '\n';
  for (const auto& row : report.per_species) {
    std::snprintf(line, sizeof(line), "%-14s %10.3f %10.3f %8zu\n",
                  row.species.c_str(), row.species_accuracy, row.id_accuracy,
                  row.n_queries);
    out << line;
  }
  out << std::string(46, '-') << '\n';
  std::snprintf(line, sizeof(line), "%-14s %10s %10s %8s\n", "Balanced acc", "", "", "");
  out << line;
  std::snprintf(line, sizeof(line), "  %-12s %10.3f\n", "Taxon",
                report.balanced_accuracy[static_cast<std::size_t>(Level::taxon)]);
  out << line;
  std::snprintf(line, sizeof(line), "  %-12s %10.3f\n", "Species",
                report.balanced_accuracy[static_cast<std::size_t>(Level::species)]);
  out << line;
  std::snprintf(line, sizeof(line), "  %-12s %10.3f\n", "ID",
                report.balanced_accuracy[static_cast<std::size_t>(Level::individual)]);
  out << line;
  std::snprintf(line, sizeof(line),
                "consistency: species/ID=%zu taxon/species=%zu of %zu\n",
                report.consistency.species_id_errors,
                report.consistency.taxon_species_errors,
                report.consistency.total_predictions);
  out << line;
  out << "k=" << report.k << " metric=" << metric_name(report.metric);
  if (report.episodes.has_value()) out << " episodes=" << *report.episodes;
  out << '\n';
  return out.str();
}

}  // namespace hiercon
