#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hiercon/dataset.hpp"
#include "hiercon/matrix.hpp"
#include "hiercon/network.hpp"
#include "hiercon/taxonomy.hpp"

namespace hiercon {

enum class Metric : int { cosine = 0, euclidean = 1 };

const char* metric_name(Metric metric);
Metric metric_from_name(const std::string& name);

enum class RefSource : int { train = 0, unseen = 1, support = 2 };

/// Labeled embedding bank queried by knn_predict. For the cosine metric the
/// rows are L2-normalized at build time; euclidean keeps them as passed.
struct ReferenceSet {
  std::vector<std::string> keys;
  Matrix embeddings;  // N x S
  std::vector<LabelTriple> labels;
  std::vector<RefSource> sources;
  Metric metric = Metric::cosine;
};

ReferenceSet build_reference(std::vector<std::string> keys, Matrix embeddings,
                             std::vector<LabelTriple> labels,
                             std::vector<RefSource> sources, Metric metric);

/// Majority vote at each level independently over the k nearest references
/// (ordered by distance, then reference index). When exclude_self is set,
/// references whose key equals query_key are removed first. Vote ties break
/// by smallest summed distance among the tied labels, then lexicographic
/// label order.
PredictionTriple knn_predict(const ReferenceSet& ref, std::span<const double> query,
                             const std::optional<std::string>& query_key,
                             std::size_t k, Metric metric, bool exclude_self);

/// Mean over classes present in `truths` of per-class recall.
double balanced_accuracy(const std::vector<std::string>& preds,
                         const std::vector<std::string>& truths);

struct SpeciesBreakdown {
  std::string species;
  double species_accuracy = 0.0;
  double id_accuracy = 0.0;
  std::size_t n_queries = 0;
};

struct EvalReport {
  std::array<double, kLevelCount> balanced_accuracy{};  // indexed by Level
  std::vector<SpeciesBreakdown> per_species;
  ConsistencyReport consistency;
  std::size_t k = 1;
  Metric metric = Metric::cosine;
  std::optional<std::size_t> episodes;  // episode count when episodic
};

/// Shared-layer embedding of the given records, rows in index order.
Matrix embed_shared(const EncoderParams& params, const Dataset& ds,
                    const std::vector<std::size_t>& indices);

/// Closed-set protocol: queries from `split` (val or test) classified against
/// the model-embedded train split.
EvalReport evaluate_closed(const EncoderParams& params, const Dataset& ds,
                           Split split, std::size_t k, Metric metric);

/// Same protocol on raw input features (no model); baseline for separability
/// checks.
EvalReport evaluate_closed_raw(const Dataset& ds, Split split, std::size_t k,
                               Metric metric);

/// Unseen-class protocol: reference is train plus all unseen embeddings and
/// each unseen record is classified with itself excluded.
EvalReport evaluate_unseen_nn(const EncoderParams& params, const Dataset& ds,
                              std::size_t k, Metric metric);

/// Episodic 1-shot protocol: per episode one support example per unseen class
/// joins the train distractors as reference; all remaining unseen records are
/// queried. Reported accuracies are means across episodes; the consistency
/// audit and per-species rows pool every episode's predictions.
EvalReport one_shot_episodes(const EncoderParams& params, const Dataset& ds,
                             std::size_t episodes, std::size_t k, Metric metric,
                             std::uint64_t seed);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

/// Aligned text table: one species block per species plus overall rows.
std::string report_to_table(const EvalReport& report);

}  // namespace hiercon
