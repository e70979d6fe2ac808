#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hiercon/losses.hpp"
#include "support/oracles.hpp"

using namespace hiercon;

namespace {

// Two tight individual clusters far apart inside one species makes the
// individual-level maximum large while species-level pair losses stay small,
// so the enforcing variant clamps.
struct ClampFixture {
  Taxonomy tax = oracles::small_taxonomy();
  std::vector<LabelTriple> labels = {
      {"T0_S0_I0", "T0_S0", "T0"}, {"T0_S0_I0", "T0_S0", "T0"},
      {"T0_S1_I0", "T0_S1", "T0"}, {"T0_S1_I1", "T0_S1", "T0"},
      {"T1_S0_I0", "T1_S0", "T1"}, {"T1_S0_I1", "T1_S0", "T1"}};
  std::vector<Matrix> z;

  ClampFixture() {
    Rng rng(1234);
    auto unit = [&](std::initializer_list<double> base) {
      std::vector<double> v(base);
      for (auto& x : v) x += 0.01 * rng.normal();
      const double norm = std::sqrt(dot(v, v));
      for (auto& x : v) x /= norm;
      return v;
    };
    auto rows = [&](std::initializer_list<std::vector<double>> rs) {
      Matrix m(rs.size(), rs.begin()->size());
      std::size_t i = 0;
      for (const auto& r : rs) {
        std::copy(r.begin(), r.end(), m.row(i++).begin());
      }
      return m;
    };
    // individual level: rows 0 and 1 (an individual-positive pair) antipodal
    z.push_back(rows({unit({1, 0, 0}), unit({-1, 0.05, 0}), unit({0, 1, 0}),
                      unit({0, 0, 1}), unit({0.7, 0.7, 0}), unit({0.7, 0, 0.7})}));
    // species level: every species-positive pair tightly clustered
    z.push_back(rows({unit({1, 0.05, 0}), unit({1, 0, 0.05}), unit({0, 1, 0.05}),
                      unit({0, 1, 0}), unit({0, 0.05, 1}), unit({0.05, 0, 1})}));
    // taxon level: mixed geometry
    z.push_back(rows({unit({1, 0.1, 0}), unit({1, 0, 0.1}), unit({0.9, 0.3, 0}),
                      unit({0.9, 0, 0.3}), unit({0, 0.1, 1}), unit({0.1, 0, 1})}));
  }
};

}  // namespace

TEST_CASE("pair_loss matches direct evaluation") {
  SUBCASE("two identical rows give zero") {
    Matrix z(2, 3);
    z.at(0, 0) = 1.0;
    z.at(1, 0) = 1.0;
    CHECK(pair_loss(z, 0, 1, 0.5) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(pair_loss(z, 0, 1, 0.05) == doctest::Approx(0.0).epsilon(1e-15));
  }

  SUBCASE("three rows at 0/0/180 degrees") {
    Matrix z(3, 2);
    z.at(0, 0) = 1.0;
    z.at(1, 0) = 1.0;
    z.at(2, 0) = -1.0;
    const double expected = std::log(1.0 + std::exp(-2.0));  // about 0.1269
    CHECK(pair_loss(z, 0, 1, 1.0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(pair_loss(z, 0, 1, 1.0) == doctest::Approx(0.126928).epsilon(1e-5));
  }

  SUBCASE("lower temperature sharpens a separable pair") {
    Matrix z(3, 2);
    z.at(0, 0) = 1.0;
    z.at(1, 0) = 1.0;
    z.at(2, 0) = -1.0;
    CHECK(oracles::pair_loss(z, 0, 1, 0.1) < oracles::pair_loss(z, 0, 1, 1.0));
    CHECK(pair_loss(z, 0, 1, 0.1) < pair_loss(z, 0, 1, 1.0));
  }

  SUBCASE("random batches agree with the naive oracle and stay nonnegative") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const Matrix z = oracles::random_unit_rows(6, 4, rng);
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t p = 0; p < 6; ++p) {
          if (i == p) continue;
          const double got = pair_loss(z, i, p, 0.2);
          CHECK(got >= 0.0);
          CHECK(got == doctest::Approx(oracles::pair_loss(z, i, p, 0.2)).epsilon(1e-10));
        }
      }
    }
  }

  SUBCASE("anchor equal to positive is rejected") {
    Matrix z(2, 2);
    CHECK_THROWS_AS(pair_loss(z, 1, 1, 0.5), InvalidPair);
  }

  SUBCASE("values stay finite for duplicated and extreme rows") {
    Matrix z(4, 2);
    z.at(0, 0) = 1.0;
    z.at(1, 0) = 1.0;
    z.at(2, 0) = 1.0;
    z.at(3, 0) = 1.0;
    CHECK(std::isfinite(pair_loss(z, 0, 1, 0.01)));
  }
}

TEST_CASE("supcon reduces correctly and matches the double-loop oracle") {
  SUBCASE("a two-row batch with one label is exactly zero") {
    Rng rng(5);
    const Matrix z = oracles::random_unit_rows(2, 4, rng);
    const LossResult result = supcon(z, {"A", "A"}, 0.3);
    CHECK(result.total == doctest::Approx(0.0).epsilon(1e-15));
  }

  SUBCASE("random batches match the oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
      const Matrix z = oracles::random_unit_rows(4, 3, rng);
      const std::vector<std::string> labels = {"A", "A", "B", "B"};
      const LossResult result = supcon(z, labels, 0.5);
      CHECK(result.total ==
            doctest::Approx(oracles::supcon(z, labels, 0.5)).epsilon(1e-10));
    }
  }

  SUBCASE("all labels distinct throws NoPositives") {
    Rng rng(2);
    const Matrix z = oracles::random_unit_rows(4, 3, rng);
    CHECK_THROWS_AS(supcon(z, {"A", "B", "C", "D"}, 0.5), NoPositives);
  }

  SUBCASE("anchors without positives are skipped, not fatal") {
    Rng rng(21);
    const Matrix z = oracles::random_unit_rows(3, 3, rng);
    const std::vector<std::string> labels = {"A", "A", "B"};
    const LossResult result = supcon(z, labels, 0.5);
    CHECK(result.total ==
          doctest::Approx(oracles::supcon(z, labels, 0.5)).epsilon(1e-10));
  }

  SUBCASE("invariant under relabeling") {
    Rng rng(9);
    const Matrix z = oracles::random_unit_rows(6, 4, rng);
    const LossResult a = supcon(z, {"A", "A", "B", "B", "C", "C"}, 0.2);
    const LossResult b = supcon(z, {"Z9", "Z9", "Q", "Q", "m_m", "m_m"}, 0.2);
    CHECK(a.total == doctest::Approx(b.total).epsilon(1e-15));
  }

  SUBCASE("invariant under batch permutation, gradients permuted") {
    Rng rng(10);
    const Matrix z = oracles::random_unit_rows(4, 3, rng);
    const std::vector<std::string> labels = {"A", "B", "A", "B"};
    const LossResult orig = supcon(z, labels, 0.4);

    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    Matrix zp(4, 3);
    std::vector<std::string> labelsp(4);
    for (std::size_t i = 0; i < 4; ++i) {
      std::copy(z.row(perm[i]).begin(), z.row(perm[i]).end(), zp.row(i).begin());
      labelsp[i] = labels[perm[i]];
    }
    const LossResult permuted = supcon(zp, labelsp, 0.4);
    CHECK(orig.total == doctest::Approx(permuted.total).epsilon(1e-12));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(permuted.grad_wrt_z[0].at(i, j) ==
              doctest::Approx(orig.grad_wrt_z[0].at(perm[i], j)).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("himulcon composes per-level losses") {
  const Taxonomy tax = oracles::small_taxonomy();

  SUBCASE("a single level with lambda one equals supcon") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      const auto labels = oracles::random_labels(tax, 6, rng);
      const Matrix z = oracles::random_unit_rows(6, 4, rng);
      std::vector<std::string> ids;
      for (const auto& t : labels) ids.push_back(t.individual);
      bool has_positive = false;
      for (std::size_t i = 0; i < ids.size() && !has_positive; ++i) {
        for (std::size_t p = i + 1; p < ids.size(); ++p) {
          if (ids[i] == ids[p]) has_positive = true;
        }
      }
      if (!has_positive) continue;

      LossConfig cfg;
      cfg.variant = LossVariant::himulcon;
      cfg.lambdas = {1.0, 0.0, 0.0};
      const LossResult hier = himulcon({z}, labels, tax, cfg);
      const LossResult flat = supcon(z, ids, cfg.tau);
      CHECK(std::abs(hier.total - flat.total) <= 1e-12);
    }
  }

  SUBCASE("three levels match the triple-loop oracle") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      const auto labels = oracles::random_labels(tax, 6, rng);
      const std::vector<Matrix> z = {oracles::random_unit_rows(6, 4, rng),
                                     oracles::random_unit_rows(6, 4, rng),
                                     oracles::random_unit_rows(6, 4, rng)};
      LossConfig cfg;
      cfg.variant = LossVariant::himulcon;
      cfg.lambdas = {1.0 / 3, 1.0 / 3, 1.0 / 3};
      const LossResult result = himulcon(z, labels, tax, cfg);
      const double expected =
          oracles::himulcon(z, labels, tax, {1.0 / 3, 1.0 / 3, 1.0 / 3}, cfg.tau);
      CHECK(result.total == doctest::Approx(expected).epsilon(1e-10));
    }
  }

  SUBCASE("loss and gradients are linear in lambda") {
    Rng rng(7);
    const auto labels = oracles::random_labels(tax, 6, rng);
    const std::vector<Matrix> z = {oracles::random_unit_rows(6, 4, rng),
                                   oracles::random_unit_rows(6, 4, rng),
                                   oracles::random_unit_rows(6, 4, rng)};
    LossConfig cfg;
    cfg.variant = LossVariant::himulcon;
    cfg.lambdas = {2.0, 1.0, 0.5};
    const LossResult base = himulcon(z, labels, tax, cfg);
    cfg.lambdas = {4.0, 2.0, 1.0};
    const LossResult doubled = himulcon(z, labels, tax, cfg);
    CHECK(doubled.total == doctest::Approx(2.0 * base.total).epsilon(1e-12));
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t i = 0; i < base.grad_wrt_z[l].data.size(); ++i) {
        CHECK(doubled.grad_wrt_z[l].data[i] ==
              doctest::Approx(2.0 * base.grad_wrt_z[l].data[i]).epsilon(1e-10));
      }
    }
  }

  SUBCASE("lambda (1,0,0) equals supcon scaled by the level count") {
    Rng rng(8);
    const auto labels = oracles::random_labels(tax, 6, rng);
    const std::vector<Matrix> z = {oracles::random_unit_rows(6, 4, rng),
                                   oracles::random_unit_rows(6, 4, rng),
                                   oracles::random_unit_rows(6, 4, rng)};
    std::vector<std::string> ids;
    for (const auto& t : labels) ids.push_back(t.individual);

    LossConfig cfg;
    cfg.variant = LossVariant::himulcon;
    cfg.lambdas = {1.0, 0.0, 0.0};
    const LossResult hier = himulcon(z, labels, tax, cfg);
    const LossResult flat = supcon(z[0], ids, cfg.tau);
    CHECK(hier.total == doctest::Approx(flat.total / 3.0).epsilon(1e-12));
  }

  SUBCASE("NoPositives only when every level is empty") {
    Rng rng(14);
    const Matrix z = oracles::random_unit_rows(2, 3, rng);
    LossConfig cfg;
    cfg.variant = LossVariant::himulcon;

    // different individuals, same species: fine
    const std::vector<LabelTriple> same_species = {{"T0_S0_I0", "T0_S0", "T0"},
                                                   {"T0_S0_I1", "T0_S0", "T0"}};
    CHECK_NOTHROW(himulcon({z, z, z}, same_species, tax, cfg));

    // different taxa entirely: empty at all levels
    const std::vector<LabelTriple> disjoint = {{"T0_S0_I0", "T0_S0", "T0"},
                                               {"T1_S0_I0", "T1_S0", "T1"}};
    CHECK_THROWS_AS(himulcon({z, z, z}, disjoint, tax, cfg), NoPositives);
  }

  SUBCASE("per_pair_max records each level's maximum pair loss") {
    Rng rng(15);
    const auto labels = oracles::random_labels(tax, 6, rng);
    const std::vector<Matrix> z = {oracles::random_unit_rows(6, 4, rng),
                                   oracles::random_unit_rows(6, 4, rng),
                                   oracles::random_unit_rows(6, 4, rng)};
    LossConfig cfg;
    cfg.variant = LossVariant::himulcon;
    const LossResult result = himulcon(z, labels, tax, cfg);
    for (std::size_t l = 0; l < 3; ++l) {
      double expected = 0.0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        for (const std::size_t p :
             oracles::positives_at_level(tax, labels, i, level_from_index(l))) {
          expected = std::max(expected, oracles::pair_loss(z[l], i, p, cfg.tau));
        }
      }
      CHECK(result.per_pair_max[l] == doctest::Approx(expected).epsilon(1e-10));
    }
  }
}

TEST_CASE("himulcone clamps coarse pair losses from below") {
  const ClampFixture fx;
  LossConfig cfg;
  cfg.variant = LossVariant::himulcone;
  cfg.lambdas = {1.0 / 3, 1.0 / 3, 1.0 / 3};

  SUBCASE("matches the brute-force clamp oracle on the constructed batch") {
    const LossResult result = himulcone(fx.z, fx.labels, fx.tax, cfg);
    const auto oracle =
        oracles::himulcone(fx.z, fx.labels, fx.tax,
                           {cfg.lambdas[0], cfg.lambdas[1], cfg.lambdas[2]}, cfg.tau);
    CHECK(result.total == doctest::Approx(oracle.total).epsilon(1e-10));

    // the fixture must actually clamp
    cfg.variant = LossVariant::himulcon;
    const LossResult plain = himulcon(fx.z, fx.labels, fx.tax, cfg);
    CHECK(result.total > plain.total);

    // term-wise: every clamped term is at least the finer level's max
    for (std::size_t l = 1; l < oracle.terms.size(); ++l) {
      for (const double term : oracle.terms[l]) {
        CHECK(term >= oracle.unclamped_max[l - 1] - 1e-12);
      }
    }
  }

  SUBCASE("equals himulcon when every coarse loss already exceeds the fine max") {
    // losses grow strictly with level: a near-zero individual pair loss, a
    // tight species cluster (losses around log 2), orthogonal taxon rows
    // (losses around log 3) -- the clamp never binds
    const Taxonomy tax = fx.tax;
    const std::vector<LabelTriple> labels = {{"T0_S0_I0", "T0_S0", "T0"},
                                             {"T0_S0_I0", "T0_S0", "T0"},
                                             {"T0_S0_I1", "T0_S0", "T0"},
                                             {"T1_S0_I0", "T1_S0", "T1"}};
    Matrix z_id(4, 3), z_sp(4, 3), z_tx(4, 3);
    auto set_row = [](Matrix& m, std::size_t i, double a, double b, double c) {
      const double norm = std::sqrt(a * a + b * b + c * c);
      m.at(i, 0) = a / norm;
      m.at(i, 1) = b / norm;
      m.at(i, 2) = c / norm;
    };
    // individual pair (0,1) identical, everything else far
    set_row(z_id, 0, 1, 0, 0);
    set_row(z_id, 1, 1, 0, 0);
    set_row(z_id, 2, 0, 1, 0);
    set_row(z_id, 3, 0, 0, 1);
    // species positives (pairs among rows 0..2) in one tight cluster
    set_row(z_sp, 0, 1, 0.01, 0);
    set_row(z_sp, 1, 1, 0, 0.01);
    set_row(z_sp, 2, 1, 0.01, 0.01);
    set_row(z_sp, 3, 0, 0, 1);
    // taxon positives mutually orthogonal
    set_row(z_tx, 0, 1, 0, 0);
    set_row(z_tx, 1, 0, 1, 0);
    set_row(z_tx, 2, 0, 0, 1);
    set_row(z_tx, 3, 0.577, 0.577, 0.577);

    LossConfig cfg2;
    cfg2.variant = LossVariant::himulcone;
    const LossResult enforced = himulcone({z_id, z_sp, z_tx}, labels, tax, cfg2);
    cfg2.variant = LossVariant::himulcon;
    const LossResult plain = himulcon({z_id, z_sp, z_tx}, labels, tax, cfg2);
    CHECK(enforced.total == doctest::Approx(plain.total).epsilon(1e-14));
  }

  SUBCASE("always at least himulcon on random batches") {
    Rng rng(31);
    LossConfig rcfg;
    for (int trial = 0; trial < 50; ++trial) {
      const auto labels = oracles::random_labels(fx.tax, 6, rng);
      const std::vector<Matrix> z = {oracles::random_unit_rows(6, 4, rng),
                                     oracles::random_unit_rows(6, 4, rng),
                                     oracles::random_unit_rows(6, 4, rng)};
      rcfg.variant = LossVariant::himulcone;
      double enforced = 0.0;
      try {
        enforced = himulcone(z, labels, fx.tax, rcfg).total;
      } catch (const NoPositives&) {
        continue;
      }
      rcfg.variant = LossVariant::himulcon;
      const double plain = himulcon(z, labels, fx.tax, rcfg).total;
      CHECK(enforced >= plain - 1e-12);
    }
  }

  SUBCASE("clamped pairs contribute no gradient") {
    const LossResult enforced = himulcone(fx.z, fx.labels, fx.tax, cfg);
    // species-level clusters in the fixture are all clamped; their gradient
    // rows must be exactly zero
    cfg.variant = LossVariant::himulcon;
    const LossResult plain = himulcon(fx.z, fx.labels, fx.tax, cfg);
    bool some_zeroed = false;
    for (std::size_t i = 0; i < enforced.grad_wrt_z[1].data.size(); ++i) {
      if (plain.grad_wrt_z[1].data[i] != 0.0 && enforced.grad_wrt_z[1].data[i] == 0.0) {
        some_zeroed = true;
      }
    }
    CHECK(some_zeroed);
  }
}

TEST_CASE("grad_check certifies the analytic gradients") {
  const Taxonomy tax = oracles::small_taxonomy();
  Rng rng(40);

  SUBCASE("supcon") {
    auto labels = oracles::random_labels(tax, 8, rng);
    labels[1] = labels[0];
    LossConfig cfg;
    cfg.variant = LossVariant::supcon;
    const std::vector<Matrix> z = {oracles::random_unit_rows(8, 4, rng)};
    CHECK(grad_check(z, labels, tax, cfg, 1e-5) <= 1e-4);
  }

  SUBCASE("himulcon over three levels") {
    auto labels = oracles::random_labels(tax, 8, rng);
    labels[1] = labels[0];
    LossConfig cfg;
    cfg.variant = LossVariant::himulcon;
    cfg.lambdas = {10.0, 5.0, 1.0};
    const std::vector<Matrix> z = {oracles::random_unit_rows(8, 4, rng),
                                   oracles::random_unit_rows(8, 4, rng),
                                   oracles::random_unit_rows(8, 4, rng)};
    CHECK(grad_check(z, labels, tax, cfg, 1e-5) <= 1e-4);
  }

  SUBCASE("himulcone with active clamps") {
    const ClampFixture fx;
    LossConfig cfg;
    cfg.variant = LossVariant::himulcone;
    CHECK(grad_check(fx.z, fx.labels, fx.tax, cfg, 1e-5) <= 1e-4);
  }
}

TEST_CASE("loss config validation") {
  const Taxonomy tax = oracles::small_taxonomy();
  Rng rng(50);
  const auto labels = oracles::random_labels(tax, 4, rng);
  const std::vector<Matrix> z = {oracles::random_unit_rows(4, 3, rng),
                                 oracles::random_unit_rows(4, 3, rng),
                                 oracles::random_unit_rows(4, 3, rng)};

  LossConfig cfg;
  cfg.tau = 0.0;
  CHECK_THROWS_AS(himulcon(z, labels, tax, cfg), InvalidConfig);
  cfg = LossConfig{};
  cfg.lambdas = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(himulcon(z, labels, tax, cfg), InvalidConfig);
  cfg = LossConfig{};
  CHECK_THROWS_AS(supcon(Matrix(1, 3), {"A"}, 0.5), InvalidConfig);
}
