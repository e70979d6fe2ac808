#include "hiercon/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace hiercon {

namespace {

using nlohmann::json;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& field, std::size_t line_no) {
  double value = 0.0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc{} || ptr != end || !std::isfinite(value)) {
    throw ParseError("row " + std::to_string(line_no) +
                     ": bad feature value '" + field + "'");
  }
  return value;
}

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, delim)) fields.push_back(field);
  if (!line.empty() && line.back() == delim) fields.emplace_back();
  return fields;
}

Dataset finalize(std::vector<EmbeddingRecord> records, std::size_t dim) {
  Dataset ds;
  ds.records = std::move(records);
  ds.dim = dim;
  std::vector<LabelTriple> triples;
  triples.reserve(ds.records.size());
  for (const auto& r : ds.records) triples.push_back(r.label);
  ds.taxonomy = build_taxonomy(triples);
  validate_dataset(ds);
  return ds;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const auto header = split_line(line, ',');
  if (header.size() < 6 || header[0] != "key" || header[1] != "split" ||
      header[2] != "taxon" || header[3] != "species" || header[4] != "individual") {
    throw ParseError("bad header in " + path.string());
  }
  const std::size_t dim = header.size() - 5;
  for (std::size_t j = 0; j < dim; ++j) {
    if (header[5 + j] != "f" + std::to_string(j)) {
      throw ParseError("bad feature column name '" + header[5 + j] + "'");
    }
  }

  std::vector<EmbeddingRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_line(line, ',');
    if (fields.size() != 5 + dim) {
      throw ParseError("row " + std::to_string(line_no) + ": expected " +
                       std::to_string(5 + dim) + " fields, got " +
                       std::to_string(fields.size()));
    }
    EmbeddingRecord rec;
    rec.key = trim(fields[0]);
    rec.split = split_from_name(trim(fields[1]));
    rec.label = LabelTriple{trim(fields[4]), trim(fields[3]), trim(fields[2])};
    rec.features.reserve(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      rec.features.push_back(parse_double(fields[5 + j], line_no));
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw ParseError("no data rows in " + path.string());
  return finalize(std::move(records), dim);
}

Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  std::vector<EmbeddingRecord> records;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("row " + std::to_string(line_no) + ": " + e.what());
    }
    for (const char* field : {"key", "split", "taxon", "species", "individual"}) {
      if (!obj.contains(field) || !obj[field].is_string()) {
        throw ParseError("row " + std::to_string(line_no) + ": missing field '" +
                         field + "'");
      }
    }
    EmbeddingRecord rec;
    rec.key = trim(obj["key"].get<std::string>());
    rec.split = split_from_name(trim(obj["split"].get<std::string>()));
    rec.label = LabelTriple{trim(obj["individual"].get<std::string>()),
                            trim(obj["species"].get<std::string>()),
                            trim(obj["taxon"].get<std::string>())};
    std::size_t n_features = 0;
    for (const auto& [k, v] : obj.items()) {
      if (!k.empty() && k[0] == 'f' &&
          k.find_first_not_of("0123456789", 1) == std::string::npos && k.size() > 1) {
        ++n_features;
      }
    }
    if (records.empty()) dim = n_features;
    if (n_features != dim) {
      throw ParseError("row " + std::to_string(line_no) + ": expected " +
                       std::to_string(dim) + " features, got " +
                       std::to_string(n_features));
    }
    rec.features.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      const std::string key = "f" + std::to_string(j);
      if (!obj.contains(key) || !obj[key].is_number()) {
        throw ParseError("row " + std::to_string(line_no) + ": missing field '" +
                         key + "'");
      }
      const double v = obj[key].get<double>();
      if (!std::isfinite(v)) {
        throw ParseError("row " + std::to_string(line_no) + ": non-finite " + key);
      }
      rec.features[j] = v;
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw ParseError("no data rows in " + path.string());
  return finalize(std::move(records), dim);
}

FileFormat detect_format(const std::filesystem::path& path, FileFormat format) {
  if (format != FileFormat::auto_detect) return format;
  return path.extension() == ".jsonl" ? FileFormat::jsonl : FileFormat::csv;
}

}  // namespace

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "unseen";
  }
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  if (name == "unseen") return Split::unseen;
  throw ParseError("unknown split '" + name + "'");
}

std::vector<std::size_t> Dataset::split_indices(Split split) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) idx.push_back(i);
  }
  return idx;
}

void validate_dataset(const Dataset& ds) {
  std::unordered_set<std::string> seen_individuals;
  std::unordered_set<std::string> unseen_individuals;
  std::unordered_set<std::string> train_species;
  std::set<std::string> unseen_species;
  std::unordered_set<std::string> keys;

  for (const auto& rec : ds.records) {
    if (!keys.insert(rec.key).second) {
      throw ParseError("duplicate record key '" + rec.key + "'");
    }
    if (rec.features.size() != ds.dim) {
      throw ParseError("record '" + rec.key + "' has dimension " +
                       std::to_string(rec.features.size()) + ", dataset dim is " +
                       std::to_string(ds.dim));
    }
    for (double v : rec.features) {
      if (!std::isfinite(v)) {
        throw ParseError("record '" + rec.key + "' has a non-finite feature");
      }
    }
    if (rec.split == Split::unseen) {
      unseen_individuals.insert(rec.label.individual);
      unseen_species.insert(rec.label.species);
    } else {
      seen_individuals.insert(rec.label.individual);
      if (rec.split == Split::train) train_species.insert(rec.label.species);
    }
  }

  for (const auto& id : unseen_individuals) {
    if (seen_individuals.count(id)) {
      throw SplitLeakage("individual '" + id +
                         "' appears both in unseen and in train/val/test");
    }
  }
  for (const auto& sp : unseen_species) {
    if (!train_species.count(sp)) {
      throw SplitLeakage("unseen species '" + sp + "' has no training examples");
    }
  }
}

Dataset load_dataset(const std::filesystem::path& path, FileFormat format) {
  return detect_format(path, format) == FileFormat::jsonl ? load_jsonl(path)
                                                          : load_csv(path);
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path,
                  FileFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());

  if (detect_format(path, format) == FileFormat::jsonl) {
    for (const auto& rec : ds.records) {
      // Field order fixed by hand so output bytes are reproducible.
      out << "{\"key\":\"" << rec.key << "\",\"split\":\"" << split_name(rec.split)
          << "\",\"taxon\":\"" << rec.label.taxon << "\",\"species\":\""
          << rec.label.species << "\",\"individual\":\"" << rec.label.individual
          << '"';
      for (std::size_t j = 0; j < rec.features.size(); ++j) {
        out << ",\"f" << j << "\":" << format_double(rec.features[j]);
      }
      out << "}\n";
    }
  } else {
    out << "key,split,taxon,species,individual";
    for (std::size_t j = 0; j < ds.dim; ++j) out << ",f" << j;
    out << '\n';
    for (const auto& rec : ds.records) {
      out << rec.key << ',' << split_name(rec.split) << ',' << rec.label.taxon
          << ',' << rec.label.species << ',' << rec.label.individual;
      for (double v : rec.features) out << ',' << format_double(v);
      out << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Dataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.n_taxa < 1 || cfg.species_per_taxon < 1 || cfg.ids_per_species < 1 ||
      cfg.samples_per_id < 1 || cfg.unseen_ids_per_species < 1 || cfg.dim < 1) {
    throw InvalidConfig("all synthetic counts must be >= 1");
  }
  if (cfg.spread_taxon < 0 || cfg.spread_species < 0 || cfg.spread_id < 0 ||
      cfg.noise < 0) {
    throw InvalidConfig("spreads and noise must be >= 0");
  }

  Rng rng(cfg.seed);
  auto gaussian_offset = [&](std::vector<double> center, double sd) {
    for (auto& c : center) c += sd * rng.normal();
    return center;
  };

  const std::size_t n = cfg.samples_per_id;
  const std::size_t val_n = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));
  const std::size_t test_n = val_n;
  const std::size_t train_n = n - val_n - test_n;

  std::vector<EmbeddingRecord> records;
  for (std::size_t t = 0; t < cfg.n_taxa; ++t) {
    const std::string taxon = "T" + std::to_string(t);
    const auto taxon_center =
        gaussian_offset(std::vector<double>(cfg.dim, 0.0), cfg.spread_taxon);
    for (std::size_t s = 0; s < cfg.species_per_taxon; ++s) {
      const std::string species = taxon + "_S" + std::to_string(s);
      const auto species_center = gaussian_offset(taxon_center, cfg.spread_species);
      const std::size_t total_ids = cfg.ids_per_species + cfg.unseen_ids_per_species;
      for (std::size_t i = 0; i < total_ids; ++i) {
        const bool unseen = i >= cfg.ids_per_species;
        const std::string individual =
            species + (unseen ? "_U" + std::to_string(i - cfg.ids_per_species)
                              : "_I" + std::to_string(i));
        const auto id_center = gaussian_offset(species_center, cfg.spread_id);
        for (std::size_t j = 0; j < n; ++j) {
          EmbeddingRecord rec;
          rec.key = individual + "_r" + std::to_string(j);
          rec.features = gaussian_offset(id_center, cfg.noise);
          rec.label = LabelTriple{individual, species, taxon};
          if (unseen) {
            rec.split = Split::unseen;
          } else if (j < train_n) {
            rec.split = Split::train;
          } else if (j < train_n + val_n) {
            rec.split = Split::val;
          } else {
            rec.split = Split::test;
          }
          records.push_back(std::move(rec));
        }
      }
    }
  }
  return finalize(std::move(records), cfg.dim);
}

std::vector<Batch> make_batches(const Dataset& ds, Split split,
                                std::size_t batch_size, std::uint64_t seed,
                                std::uint64_t epoch) {
  if (batch_size < 2) throw InvalidConfig("batch_size must be >= 2");
  std::vector<std::size_t> indices = ds.split_indices(split);
  if (indices.empty()) {
    throw EmptySplit(std::string("split '") + split_name(split) + "' is empty");
  }

  Rng rng(Rng::mix(seed, epoch));
  rng.shuffle(indices);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, indices.size());
    if (end - start < 2) break;  // a single trailing record cannot form a pair
    Batch batch;
    batch.indices.assign(indices.begin() + start, indices.begin() + end);
    batch.features = Matrix(end - start, ds.dim);
    for (std::size_t r = 0; r < batch.indices.size(); ++r) {
      const auto& rec = ds.records[batch.indices[r]];
      std::copy(rec.features.begin(), rec.features.end(), batch.features.row(r).begin());
      batch.labels.push_back(rec.label);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<double> augment(std::span<const double> features, double sigma,
                            Rng& rng) {
  std::vector<double> out(features.begin(), features.end());
  if (sigma == 0.0) return out;
  for (auto& v : out) v += sigma * rng.normal();
  return out;
}

}  // namespace hiercon
