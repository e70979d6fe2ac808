#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hiercon/errors.hpp"

namespace hiercon {

/// Hierarchy levels ordered finest to coarsest. All cross-level logic in the
/// library indexes levels in this order.
enum class Level : int { individual = 0, species = 1, taxon = 2 };

inline constexpr std::size_t kLevelCount = 3;
inline constexpr std::array<Level, kLevelCount> kAllLevels{
    Level::individual, Level::species, Level::taxon};

const char* level_name(Level level);
Level level_from_index(std::size_t index);

/// The (individual, species, taxon) labels attached to one record.
/// Label comparison throughout the library is exact string equality after
/// trimming surrounding whitespace; case-sensitive.
struct LabelTriple {
  std::string individual;
  std::string species;
  std::string taxon;

  const std::string& at(Level level) const {
    switch (level) {
      case Level::individual: return individual;
      case Level::species: return species;
      default: return taxon;
    }
  }

  bool operator==(const LabelTriple&) const = default;
};

/// Predictions carry the same three labels as ground truth.
using PredictionTriple = LabelTriple;

std::string trim(const std::string& s);

struct ConsistencyReport {
  std::size_t species_id_errors = 0;
  std::size_t taxon_species_errors = 0;
  std::size_t total_predictions = 0;
};

/// Immutable 3-level label forest: every individual has exactly one species
/// parent, every species exactly one taxon parent, and no label string
/// appears at two different levels. Safe for concurrent read-only use.
class Taxonomy {
 public:
  Taxonomy() = default;

  bool has_label(Level level, const std::string& label) const;
  /// Parent label one level up. Throws UnknownLabel; taxon has no parent.
  const std::string& parent(Level level, const std::string& label) const;
  /// Registered class labels at a level, sorted.
  const std::vector<std::string>& classes(Level level) const;
  std::size_t num_classes(Level level) const { return classes(level).size(); }

 private:
  friend Taxonomy build_taxonomy(const std::vector<LabelTriple>& triples);

  std::array<std::vector<std::string>, kLevelCount> classes_;
  // individual -> species and species -> taxon
  std::unordered_map<std::string, std::string> species_of_;
  std::unordered_map<std::string, std::string> taxon_of_;
};

/// Builds the taxonomy from label triples. Duplicate identical triples are
/// deduplicated. Throws EmptyLabel on blank fields and ConflictingParent when
/// one label appears with two different parents.
Taxonomy build_taxonomy(const std::vector<LabelTriple>& triples);

/// The unique (species, taxon) parent pair of a registered individual.
std::pair<std::string, std::string> ancestors(const Taxonomy& tax,
                                              const std::string& individual);

/// Symmetric, irreflexive pair relation over batch indices.
class PairMask {
 public:
  explicit PairMask(std::size_t n) : n_(n), bits_(n * n, 0) {}

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return bits_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { bits_[i * n_ + j] = v ? 1 : 0; }

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// R(i,p) true iff i != p and the labels agree at `level`.
PairMask positive_mask(const Taxonomy& tax,
                       const std::vector<LabelTriple>& batch_labels,
                       Level level);

/// Counts predictions whose adjacent-level labels do not form a parent-child
/// path in the taxonomy. Predicted individual and species labels must be
/// registered in the taxonomy.
ConsistencyReport check_consistency(const Taxonomy& tax,
                                    const std::vector<PredictionTriple>& predictions);

}  // namespace hiercon
