#pragma once

#include <array>
#include <string>
#include <vector>

#include "hiercon/matrix.hpp"
#include "hiercon/taxonomy.hpp"

namespace hiercon {

enum class LossVariant : int { supcon = 0, himulcon = 1, himulcone = 2 };

const char* loss_variant_name(LossVariant variant);
LossVariant loss_variant_from_name(const std::string& name);

/// Loss selection: variant, temperature, and per-level penalty factors
/// indexed finest to coarsest (individual, species, taxon).
struct LossConfig {
  LossVariant variant = LossVariant::himulcon;
  double tau = 0.1;
  std::array<double, kLevelCount> lambdas = {1.0 / 3, 1.0 / 3, 1.0 / 3};
};

/// Scalar losses plus exact gradients w.r.t. each level's projected
/// embeddings. per_level holds the lambda-weighted level losses, so
/// total == mean(per_level). per_pair_max holds each level's maximum
/// UNCLAMPED per-pair loss (0 when a level realizes no positive pairs).
struct LossResult {
  double total = 0.0;
  std::vector<double> per_level;
  std::vector<Matrix> grad_wrt_z;
  std::vector<double> per_pair_max;
};

/// Cross-entropy form of the per-pair contrastive term:
///   -log( exp(z_i.z_p / tau) / sum_{n != i} exp(z_i.z_n / tau) )
/// computed with a max-subtracted log-sum-exp. Always >= 0.
double pair_loss(const Matrix& z, std::size_t i, std::size_t p, double tau);

/// Single-level supervised contrastive loss over flat labels. Anchors with no
/// positive are skipped; throws NoPositives when every anchor is skipped.
LossResult supcon(const Matrix& z, const std::vector<std::string>& labels,
                  double tau);

/// Level-weighted sum of per-level contrastive losses. z_per_level carries
/// one B x P matrix per level, finest first; passing a single matrix treats
/// the batch as individual-level only (and reproduces supcon).
LossResult himulcon(const std::vector<Matrix>& z_per_level,
                    const std::vector<LabelTriple>& labels, const Taxonomy& tax,
                    const LossConfig& cfg);

/// himulcon with constraint enforcement: each per-pair term at a coarse level
/// is clamped from below by the next-finer level's maximum unclamped per-pair
/// loss in the same batch. The clamp value is a constant for gradient
/// purposes; a clamped pair contributes zero gradient, and exact ties take
/// the pair-loss branch.
LossResult himulcone(const std::vector<Matrix>& z_per_level,
                     const std::vector<LabelTriple>& labels, const Taxonomy& tax,
                     const LossConfig& cfg);

/// Constraint-enforcing loss with the clamp floor at each level pinned to
/// floors[l] instead of the batch's previous-level maximum (floors[0] is
/// ignored; no clamp applies at the finest level). With floors taken from an
/// unperturbed himulcone call this evaluates exactly the function whose
/// gradient himulcone reports, which is what the finite-difference check
/// must difference.
LossResult himulcone_with_floors(const std::vector<Matrix>& z_per_level,
                                 const std::vector<LabelTriple>& labels,
                                 const Taxonomy& tax, const LossConfig& cfg,
                                 const std::vector<double>& floors);

/// Dispatches on cfg.variant (supcon uses the individual labels and the first
/// z matrix only).
LossResult evaluate_loss(const std::vector<Matrix>& z_per_level,
                         const std::vector<LabelTriple>& labels,
                         const Taxonomy& tax, const LossConfig& cfg);

/// Central finite differences on every z entry against the analytic gradient.
/// Returns the maximum relative error, |a - n| / max(1, |a|, |n|).
double grad_check(const std::vector<Matrix>& z_per_level,
                  const std::vector<LabelTriple>& labels, const Taxonomy& tax,
                  const LossConfig& cfg, double step);

}  // namespace hiercon
