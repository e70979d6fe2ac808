#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "hiercon/dataset.hpp"
#include "hiercon/eval.hpp"
#include "support/oracles.hpp"

using namespace hiercon;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("load_dataset reads a CSV fixture") {
  const auto path = temp_file("fixture_ok.csv");
  write_file(path,
             "key,split,taxon,species,individual,f0,f1,f2\n"
             "r1,train,Birds,CHF,chf01,0.1,0.2,0.3\n"
             "r2,train,Birds,CHF,chf02,1.5,-0.5,0.25\n"
             "r3,val,Birds,CHF,chf01,0.11,0.19,0.29\n"
             "r4,test,Birds,CHF,chf02,1.51,-0.49,0.26\n");
  const Dataset ds = load_dataset(path);
  CHECK(ds.dim == 3);
  CHECK(ds.records.size() == 4);
  CHECK(ds.taxonomy.num_classes(Level::individual) == 2);
  CHECK(ds.records[1].features[1] == doctest::Approx(-0.5));
  CHECK(ds.records[2].split == Split::val);
}

TEST_CASE("load_dataset names the offending row") {
  const auto path = temp_file("fixture_short_row.csv");
  write_file(path,
             "key,split,taxon,species,individual,f0,f1,f2\n"
             "r1,train,Birds,CHF,chf01,0.1,0.2,0.3\n"
             "r2,train,Birds,CHF,chf02,1.5,-0.5,0.25\n"
             "r3,train,Birds,CHF,chf01,0.1,0.2,0.3\n"
             "r4,train,Birds,CHF,chf02,0.4,0.5\n");
  try {
    load_dataset(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find('5') != std::string::npos);
  }
}

TEST_CASE("load_dataset rejects split leakage") {
  const auto path = temp_file("fixture_leak.csv");
  write_file(path,
             "key,split,taxon,species,individual,f0\n"
             "r1,train,Birds,CHF,x,0.1\n"
             "r2,unseen,Birds,CHF,x,0.2\n");
  CHECK_THROWS_AS(load_dataset(path), SplitLeakage);
}

TEST_CASE("load_dataset rejects non-finite features and bad splits") {
  const auto bad_value = temp_file("fixture_nan.csv");
  write_file(bad_value,
             "key,split,taxon,species,individual,f0\n"
             "r1,train,Birds,CHF,chf01,nan\n");
  CHECK_THROWS_AS(load_dataset(bad_value), ParseError);

  const auto bad_split = temp_file("fixture_split.csv");
  write_file(bad_split,
             "key,split,taxon,species,individual,f0\n"
             "r1,holdout,Birds,CHF,chf01,0.5\n");
  CHECK_THROWS_AS(load_dataset(bad_split), ParseError);
}

TEST_CASE("jsonl round trip preserves the dataset") {
  SynthConfig cfg;
  cfg.samples_per_id = 10;
  cfg.seed = 3;
  const Dataset ds = generate_synthetic(cfg);

  const auto path = temp_file("roundtrip.jsonl");
  save_dataset(ds, path);
  const Dataset loaded = load_dataset(path);

  REQUIRE(loaded.records.size() == ds.records.size());
  CHECK(loaded.dim == ds.dim);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    CHECK(loaded.records[i].key == ds.records[i].key);
    CHECK(loaded.records[i].split == ds.records[i].split);
    CHECK(loaded.records[i].label == ds.records[i].label);
    for (std::size_t j = 0; j < ds.dim; ++j) {
      CHECK(loaded.records[i].features[j] == ds.records[i].features[j]);
    }
  }
}

TEST_CASE("generate_synthetic produces the enumerated counts") {
  SynthConfig cfg;
  cfg.n_taxa = 2;
  cfg.species_per_taxon = 2;
  cfg.ids_per_species = 3;
  cfg.samples_per_id = 20;
  cfg.unseen_ids_per_species = 1;
  cfg.dim = 8;
  cfg.seed = 7;
  const Dataset ds = generate_synthetic(cfg);

  std::map<Split, std::size_t> counts;
  std::set<std::string> seen_ids, unseen_ids;
  for (const auto& rec : ds.records) {
    counts[rec.split]++;
    (rec.split == Split::unseen ? unseen_ids : seen_ids).insert(rec.label.individual);
  }
  CHECK(counts[Split::train] + counts[Split::val] + counts[Split::test] == 240);
  CHECK(counts[Split::unseen] == 80);
  CHECK(seen_ids.size() == 12);
  CHECK(unseen_ids.size() == 4);
  // 80/10/10 of 20 samples
  CHECK(counts[Split::train] == 192);
  CHECK(counts[Split::val] == 24);
  CHECK(counts[Split::test] == 24);
}

TEST_CASE("generate_synthetic is deterministic per seed") {
  SynthConfig cfg;
  cfg.seed = 99;
  const Dataset a = generate_synthetic(cfg);
  const Dataset b = generate_synthetic(cfg);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].key == b.records[i].key);
    CHECK(a.records[i].features == b.records[i].features);
  }

  const auto pa = temp_file("synth_a.csv");
  const auto pb = temp_file("synth_b.csv");
  save_dataset(a, pa);
  save_dataset(b, pb);
  CHECK(read_file(pa) == read_file(pb));
}

TEST_CASE("generate_synthetic with zero noise collapses each individual") {
  SynthConfig cfg;
  cfg.noise = 0.0;
  cfg.samples_per_id = 5;
  cfg.seed = 1;
  const Dataset ds = generate_synthetic(cfg);
  std::map<std::string, std::vector<double>> first;
  for (const auto& rec : ds.records) {
    auto [it, inserted] = first.emplace(rec.label.individual, rec.features);
    if (!inserted) CHECK(rec.features == it->second);
  }
}

TEST_CASE("generate_synthetic keeps unseen ids and species aligned with train") {
  SynthConfig cfg;
  cfg.seed = 21;
  const Dataset ds = generate_synthetic(cfg);
  std::set<std::string> train_ids, unseen_ids, train_species, unseen_species;
  for (const auto& rec : ds.records) {
    if (rec.split == Split::unseen) {
      unseen_ids.insert(rec.label.individual);
      unseen_species.insert(rec.label.species);
    } else {
      train_ids.insert(rec.label.individual);
      if (rec.split == Split::train) train_species.insert(rec.label.species);
    }
  }
  for (const auto& id : unseen_ids) CHECK(train_ids.count(id) == 0);
  for (const auto& sp : unseen_species) CHECK(train_species.count(sp) == 1);
}

TEST_CASE("generate_synthetic validates its config") {
  SynthConfig cfg;
  cfg.ids_per_species = 0;
  CHECK_THROWS_AS(generate_synthetic(cfg), InvalidConfig);
  cfg = SynthConfig{};
  cfg.noise = -0.5;
  CHECK_THROWS_AS(generate_synthetic(cfg), InvalidConfig);
}

TEST_CASE("make_batches chunks and drops singleton tails") {
  SynthConfig cfg;
  cfg.n_taxa = 1;
  cfg.species_per_taxon = 1;
  cfg.ids_per_species = 1;
  cfg.samples_per_id = 12;  // 10 train, 1 val, 1 test
  cfg.seed = 5;
  const Dataset ds = generate_synthetic(cfg);
  REQUIRE(ds.split_indices(Split::train).size() == 10);

  const auto batches = make_batches(ds, Split::train, 4, 1, 0);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].indices.size() == 4);
  CHECK(batches[1].indices.size() == 4);
  CHECK(batches[2].indices.size() == 2);

  // 5 -> one batch of 4, trailing 1 dropped
  const auto val5 = make_batches(ds, Split::train, 9, 1, 0);
  REQUIRE(val5.size() == 1);
  CHECK(val5[0].indices.size() == 9);
}

TEST_CASE("make_batches is keyed by seed and epoch and covers the split") {
  SynthConfig cfg;
  cfg.seed = 13;
  const Dataset ds = generate_synthetic(cfg);

  const auto a = make_batches(ds, Split::train, 16, 7, 3);
  const auto b = make_batches(ds, Split::train, 16, 7, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].indices == b[i].indices);

  const auto c = make_batches(ds, Split::train, 16, 7, 4);
  bool any_different = false;
  for (std::size_t i = 0; i < std::min(a.size(), c.size()); ++i) {
    if (a[i].indices != c[i].indices) any_different = true;
  }
  CHECK(any_different);

  std::multiset<std::size_t> covered;
  std::size_t batched = 0;
  for (const auto& batch : a) {
    covered.insert(batch.indices.begin(), batch.indices.end());
    batched += batch.indices.size();
  }
  const auto train_idx = ds.split_indices(Split::train);
  const std::multiset<std::size_t> expected(train_idx.begin(), train_idx.end());
  CHECK(expected.size() - covered.size() <= 1);  // at most one dropped record
  for (const auto& idx : covered) CHECK(expected.count(idx) == 1);
  CHECK(covered.size() == batched);
}

TEST_CASE("make_batches rejects bad inputs") {
  SynthConfig cfg;
  const Dataset ds = generate_synthetic(cfg);
  CHECK_THROWS_AS(make_batches(ds, Split::train, 1, 0, 0), InvalidConfig);

  SynthConfig no_val = cfg;
  no_val.samples_per_id = 4;  // 10% rounds to zero: no val records
  const Dataset ds2 = generate_synthetic(no_val);
  CHECK_THROWS_AS(make_batches(ds2, Split::val, 2, 0, 0), EmptySplit);
}

TEST_CASE("augment adds seeded gaussian noise") {
  const std::vector<double> v = {1.0, -2.0, 0.5};

  Rng rng0(3);
  CHECK(augment(v, 0.0, rng0) == v);

  Rng rng1(3);
  Rng rng2(3);
  CHECK(augment(v, 0.1, rng1) == augment(v, 0.1, rng2));

  // Monte-Carlo oracle: the mean over many draws recovers the input.
  const double sigma = 0.1;
  const std::size_t n = 10000;
  Rng rng(12);
  std::vector<double> mean(v.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto sample = augment(v, sigma, rng);
    for (std::size_t j = 0; j < v.size(); ++j) mean[j] += sample[j];
  }
  for (std::size_t j = 0; j < v.size(); ++j) {
    mean[j] /= static_cast<double>(n);
    CHECK(std::abs(mean[j] - v[j]) <= 3.0 * sigma / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("default spreads keep raw features 1-NN separable") {
  SynthConfig cfg;  // spreads (10, 3, 1), noise 0.2
  cfg.ids_per_species = 4;
  cfg.samples_per_id = 20;
  cfg.dim = 16;
  cfg.seed = 7;
  const Dataset ds = generate_synthetic(cfg);
  const EvalReport report = evaluate_closed_raw(ds, Split::val, 1, Metric::euclidean);
  CHECK(report.balanced_accuracy[static_cast<std::size_t>(Level::individual)] > 0.9);
}
