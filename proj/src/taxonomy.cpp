#include "hiercon/taxonomy.hpp"

#include <algorithm>
#include <cctype>

namespace hiercon {

const char* level_name(Level level) {
  switch (level) {
    case Level::individual: return "individual";
    case Level::species: return "species";
    default: return "taxon";
  }
}

Level level_from_index(std::size_t index) {
  if (index >= kLevelCount) throw Error("level index out of range");
  return static_cast<Level>(static_cast<int>(index));
}

std::string trim(const std::string& s) {
  auto begin = s.begin();
  auto end = s.end();
  while (begin != end && std::isspace(static_cast<unsigned char>(*begin))) ++begin;
  while (end != begin && std::isspace(static_cast<unsigned char>(*(end - 1)))) --end;
  return {begin, end};
}

bool Taxonomy::has_label(Level level, const std::string& label) const {
  const auto& v = classes_[static_cast<std::size_t>(level)];
  return std::binary_search(v.begin(), v.end(), trim(label));
}

const std::string& Taxonomy::parent(Level level, const std::string& label) const {
  const std::string key = trim(label);
  const auto& map = level == Level::individual ? species_of_ : taxon_of_;
  if (level == Level::taxon) throw UnknownLabel("taxon level has no parent");
  auto it = map.find(key);
  if (it == map.end()) {
    throw UnknownLabel(std::string("unknown ") + level_name(level) + " label: " + key);
  }
  return it->second;
}

const std::vector<std::string>& Taxonomy::classes(Level level) const {
  return classes_[static_cast<std::size_t>(level)];
}

Taxonomy build_taxonomy(const std::vector<LabelTriple>& triples) {
  if (triples.empty()) throw Error("build_taxonomy: empty triple list");

  Taxonomy tax;
  auto link = [](std::unordered_map<std::string, std::string>& map,
                 const std::string& child, const std::string& parent,
                 const char* child_level) {
    auto [it, inserted] = map.emplace(child, parent);
    if (!inserted && it->second != parent) {
      throw ConflictingParent(std::string(child_level) + " '" + child +
                              "' appears with parents '" + it->second +
                              "' and '" + parent + "'");
    }
  };

  for (const auto& raw : triples) {
    const LabelTriple t{trim(raw.individual), trim(raw.species), trim(raw.taxon)};
    if (t.individual.empty() || t.species.empty() || t.taxon.empty()) {
      throw EmptyLabel("label triple has a blank field");
    }
    link(tax.species_of_, t.individual, t.species, "individual");
    link(tax.taxon_of_, t.species, t.taxon, "species");
  }

  for (const auto& [individual, _] : tax.species_of_) {
    tax.classes_[0].push_back(individual);
  }
  for (const auto& [species, taxon] : tax.taxon_of_) {
    tax.classes_[1].push_back(species);
    tax.classes_[2].push_back(taxon);
  }
  for (auto& v : tax.classes_) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }

  // No label string may appear at two different levels.
  for (std::size_t a = 0; a < kLevelCount; ++a) {
    for (std::size_t b = a + 1; b < kLevelCount; ++b) {
      for (const auto& label : tax.classes_[a]) {
        if (std::binary_search(tax.classes_[b].begin(), tax.classes_[b].end(), label)) {
          throw ConflictingParent("label '" + label + "' appears at levels " +
                                  level_name(level_from_index(a)) + " and " +
                                  level_name(level_from_index(b)));
        }
      }
    }
  }
  return tax;
}

std::pair<std::string, std::string> ancestors(const Taxonomy& tax,
                                              const std::string& individual) {
  const std::string& species = tax.parent(Level::individual, individual);
  const std::string& taxon = tax.parent(Level::species, species);
  return {species, taxon};
}

PairMask positive_mask(const Taxonomy& tax,
                       const std::vector<LabelTriple>& batch_labels,
                       Level level) {
  (void)tax;  // triples carry their own ancestor labels at every level
  const std::size_t n = batch_labels.size();
  std::vector<std::string> at_level(n);
  for (std::size_t i = 0; i < n; ++i) at_level[i] = trim(batch_labels[i].at(level));

  PairMask mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = i + 1; p < n; ++p) {
      if (at_level[i] == at_level[p]) {
        mask.set(i, p, true);
        mask.set(p, i, true);
      }
    }
  }
  return mask;
}

ConsistencyReport check_consistency(const Taxonomy& tax,
                                    const std::vector<PredictionTriple>& predictions) {
  ConsistencyReport report;
  report.total_predictions = predictions.size();
  for (const auto& pred : predictions) {
    const std::string& species_parent = tax.parent(Level::individual, pred.individual);
    const std::string& taxon_parent = tax.parent(Level::species, pred.species);
    if (species_parent != trim(pred.species)) ++report.species_id_errors;
    if (taxon_parent != trim(pred.taxon)) ++report.taxon_species_errors;
  }
  return report;
}

}  // namespace hiercon
