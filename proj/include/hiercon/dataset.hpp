#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hiercon/matrix.hpp"
#include "hiercon/rng.hpp"
#include "hiercon/taxonomy.hpp"

namespace hiercon {

enum class Split : int { train = 0, val = 1, test = 2, unseen = 3 };

const char* split_name(Split split);
Split split_from_name(const std::string& name);

/// One precomputed feature vector with its labels and split tag.
struct EmbeddingRecord {
  std::string key;
  std::vector<double> features;
  LabelTriple label;
  Split split = Split::train;
};

/// Immutable after load/generate. The taxonomy is derived from all label
/// triples in the records.
struct Dataset {
  std::vector<EmbeddingRecord> records;
  std::size_t dim = 0;
  Taxonomy taxonomy;

  std::vector<std::size_t> split_indices(Split split) const;
};

/// Enforces the dataset invariants: fixed dimension, finite features, no
/// unseen individual in train/val/test, every unseen species present in train.
void validate_dataset(const Dataset& ds);

enum class FileFormat { auto_detect, csv, jsonl };

/// Reads a dataset file. CSV columns: key,split,taxon,species,individual,
/// f0..f{D-1}; a JSON-lines file with the same field names is accepted when
/// the path ends in .jsonl (or the format is forced).
Dataset load_dataset(const std::filesystem::path& path,
                     FileFormat format = FileFormat::auto_detect);

/// Writes a dataset in the format implied by the path (CSV unless .jsonl).
/// Output is byte-deterministic for a given dataset.
void save_dataset(const Dataset& ds, const std::filesystem::path& path,
                  FileFormat format = FileFormat::auto_detect);

/// Sizing and geometry of a synthetic hierarchical Gaussian mixture.
/// Spreads are standard deviations in feature units.
struct SynthConfig {
  std::size_t n_taxa = 2;
  std::size_t species_per_taxon = 2;
  std::size_t ids_per_species = 3;
  std::size_t samples_per_id = 20;
  std::size_t unseen_ids_per_species = 1;
  std::size_t dim = 8;
  double spread_taxon = 10.0;
  double spread_species = 3.0;
  double spread_id = 1.0;
  double noise = 0.2;
  std::uint64_t seed = 0;
};

/// Hierarchical Gaussian mixture: taxon centers ~ N(0, spread_taxon^2 I),
/// species centers offset by N(0, spread_species^2 I), id centers by
/// N(0, spread_id^2 I), samples by N(0, noise^2 I). Seen ids are split
/// 80/10/10 per id (rounded); unseen ids go wholly to split=unseen.
/// Deterministic given cfg.seed.
Dataset generate_synthetic(const SynthConfig& cfg);

struct Batch {
  std::vector<std::size_t> indices;  // into Dataset::records
  Matrix features;                   // B x D
  std::vector<LabelTriple> labels;
};

/// Shuffles the split's records with a (seed, epoch)-keyed PRNG and chunks
/// them. A final chunk shorter than 2 is dropped; otherwise every record of
/// the split appears exactly once.
std::vector<Batch> make_batches(const Dataset& ds, Split split,
                                std::size_t batch_size, std::uint64_t seed,
                                std::uint64_t epoch);

/// features + N(0, sigma^2 I). sigma = 0 returns the input unchanged.
std::vector<double> augment(std::span<const double> features, double sigma,
                            Rng& rng);

}  // namespace hiercon
