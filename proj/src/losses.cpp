#include "hiercon/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hiercon {

namespace {

void validate_config(const LossConfig& cfg, std::size_t n_levels) {
  if (cfg.tau <= 0.0) throw InvalidConfig("temperature must be positive");
  double lambda_sum = 0.0;
  for (std::size_t l = 0; l < n_levels; ++l) {
    if (cfg.lambdas[l] < 0.0) throw InvalidConfig("lambdas must be nonnegative");
    lambda_sum += cfg.lambdas[l];
  }
  if (lambda_sum <= 0.0) throw InvalidConfig("at least one lambda must be positive");
}

// Softmax over an anchor's negatives N(i) = I \ {i}, shared by every positive
// pair of that anchor.
struct AnchorTerms {
  double log_denom = 0.0;     // log sum_{n != i} exp(s_in / tau)
  std::vector<double> w;      // softmax weights, w[i] = 0
};

AnchorTerms anchor_terms(const Matrix& sims, std::size_t i, double tau) {
  const std::size_t b = sims.rows;
  AnchorTerms terms;
  terms.w.assign(b, 0.0);

  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < b; ++n) {
    if (n == i) continue;
    max_logit = std::max(max_logit, sims.at(i, n) / tau);
  }
  double sum = 0.0;
  for (std::size_t n = 0; n < b; ++n) {
    if (n == i) continue;
    terms.w[n] = std::exp(sims.at(i, n) / tau - max_logit);
    sum += terms.w[n];
  }
  terms.log_denom = max_logit + std::log(sum);
  for (auto& w : terms.w) w /= sum;
  return terms;
}

// Shared engine for all variants: one positive mask and one lambda per level,
// optional clamp enforcement. When fixed_floors is non-null the clamp floor at
// level l is fixed_floors[l] instead of the running previous-level maximum.
// Reference semantics are sequential summation in index order.
LossResult contrastive_core(const std::vector<const Matrix*>& z_levels,
                            const std::vector<PairMask>& masks,
                            const std::vector<double>& lambdas, double tau,
                            bool enforce,
                            const std::vector<double>* fixed_floors = nullptr) {
  const std::size_t n_levels = z_levels.size();
  const std::size_t b = z_levels[0]->rows;
  if (b < 2) throw InvalidConfig("batch size must be >= 2");
  for (const Matrix* z : z_levels) {
    if (z->rows != b) throw ShapeMismatch("levels disagree on batch size");
  }

  LossResult result;
  result.per_level.assign(n_levels, 0.0);
  result.per_pair_max.assign(n_levels, 0.0);
  for (const Matrix* z : z_levels) result.grad_wrt_z.emplace_back(z->rows, z->cols);

  bool any_positive = false;
  double prev_level_max = 0.0;  // pair losses are >= 0, so 0 means "no clamp"

  for (std::size_t l = 0; l < n_levels; ++l) {
    const Matrix& z = *z_levels[l];
    Matrix& grad = result.grad_wrt_z[l];
    const PairMask& mask = masks[l];
    const Matrix sims = matmul_a_bt(z, z);
    const bool clamp_active = enforce && l > 0;
    const double floor = fixed_floors != nullptr ? (*fixed_floors)[l] : prev_level_max;

    double level_loss = 0.0;
    double level_max = 0.0;

    for (std::size_t i = 0; i < b; ++i) {
      std::vector<std::size_t> positives;
      for (std::size_t p = 0; p < b; ++p) {
        if (mask(i, p)) positives.push_back(p);
      }
      if (positives.empty()) continue;  // contributes zero at this level
      any_positive = true;

      const AnchorTerms terms = anchor_terms(sims, i, tau);
      const double pair_weight = lambdas[l] / static_cast<double>(positives.size());

      // Aggregate the per-pair gradients of this anchor. For an active pair
      // (i, p) with coefficient c:
      //   d/dz_i += c/tau (-z_p + sum_n w_n z_n)
      //   d/dz_q += c/tau (w_q - [q == p]) z_i      for q != i
      double active_weight = 0.0;
      for (const std::size_t p : positives) {
        const double loss_ip = terms.log_denom - sims.at(i, p) / tau;
        level_max = std::max(level_max, loss_ip);
        if (clamp_active && loss_ip < floor) {
          level_loss += pair_weight * floor;  // constant branch
          continue;
        }
        level_loss += pair_weight * loss_ip;
        active_weight += pair_weight;
        for (std::size_t j = 0; j < z.cols; ++j) {
          grad.at(i, j) -= pair_weight / tau * z.at(p, j);
          grad.at(p, j) -= pair_weight / tau * z.at(i, j);
        }
      }
      if (active_weight == 0.0) continue;
      for (std::size_t n = 0; n < b; ++n) {
        if (n == i || terms.w[n] == 0.0) continue;
        const double c = active_weight * terms.w[n] / tau;
        for (std::size_t j = 0; j < z.cols; ++j) {
          grad.at(i, j) += c * z.at(n, j);
          grad.at(n, j) += c * z.at(i, j);
        }
      }
    }

    result.per_level[l] = level_loss;
    result.per_pair_max[l] = level_max;
    prev_level_max = level_max;
  }

  if (!any_positive) {
    throw NoPositives("no anchor has a positive pair at any level");
  }
  for (std::size_t l = 0; l < n_levels; ++l) {
    result.total += result.per_level[l];
  }
  result.total /= static_cast<double>(n_levels);
  for (auto& grad : result.grad_wrt_z) {
    for (auto& g : grad.data) g /= static_cast<double>(n_levels);
  }
  return result;
}

std::vector<PairMask> level_masks(const std::vector<Matrix>& z_per_level,
                                  const std::vector<LabelTriple>& labels,
                                  const Taxonomy& tax) {
  std::vector<PairMask> masks;
  for (std::size_t l = 0; l < z_per_level.size(); ++l) {
    masks.push_back(positive_mask(tax, labels, level_from_index(l)));
  }
  return masks;
}

LossResult hierarchical(const std::vector<Matrix>& z_per_level,
                        const std::vector<LabelTriple>& labels,
                        const Taxonomy& tax, const LossConfig& cfg, bool enforce,
                        const std::vector<double>* fixed_floors = nullptr) {
  if (z_per_level.empty() || z_per_level.size() > kLevelCount) {
    throw ShapeMismatch("expected 1 to 3 projection matrices");
  }
  if (labels.size() != z_per_level[0].rows) {
    throw ShapeMismatch("label count does not match batch size");
  }
  validate_config(cfg, z_per_level.size());

  std::vector<const Matrix*> z_ptrs;
  std::vector<double> lambdas;
  for (std::size_t l = 0; l < z_per_level.size(); ++l) {
    z_ptrs.push_back(&z_per_level[l]);
    lambdas.push_back(cfg.lambdas[l]);
  }
  return contrastive_core(z_ptrs, level_masks(z_per_level, labels, tax), lambdas,
                          cfg.tau, enforce, fixed_floors);
}

}  // namespace

const char* loss_variant_name(LossVariant variant) {
  switch (variant) {
    case LossVariant::supcon: return "SupCon";
    case LossVariant::himulcon: return "HiMulCon";
    default: return "HiMulConE";
  }
}

LossVariant loss_variant_from_name(const std::string& name) {
  if (name == "SupCon") return LossVariant::supcon;
  if (name == "HiMulCon") return LossVariant::himulcon;
  if (name == "HiMulConE") return LossVariant::himulcone;
  throw InvalidConfig("unknown loss variant '" + name + "'");
}

double pair_loss(const Matrix& z, std::size_t i, std::size_t p, double tau) {
  if (i == p) throw InvalidPair("pair_loss requires i != p");
  if (i >= z.rows || p >= z.rows) throw ShapeMismatch("pair index out of range");
  if (z.rows < 2) throw InvalidConfig("batch size must be >= 2");
  if (tau <= 0.0) throw InvalidConfig("temperature must be positive");

  const Matrix sims = matmul_a_bt(z, z);
  const AnchorTerms terms = anchor_terms(sims, i, tau);
  return terms.log_denom - sims.at(i, p) / tau;
}

LossResult supcon(const Matrix& z, const std::vector<std::string>& labels,
                  double tau) {
  if (labels.size() != z.rows) {
    throw ShapeMismatch("label count does not match batch size");
  }
  if (tau <= 0.0) throw InvalidConfig("temperature must be positive");
  if (z.rows < 2) throw InvalidConfig("batch size must be >= 2");

  PairMask mask(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t p = i + 1; p < labels.size(); ++p) {
      if (trim(labels[i]) == trim(labels[p])) {
        mask.set(i, p, true);
        mask.set(p, i, true);
      }
    }
  }
  return contrastive_core({&z}, {mask}, {1.0}, tau, false);
}

LossResult himulcon(const std::vector<Matrix>& z_per_level,
                    const std::vector<LabelTriple>& labels, const Taxonomy& tax,
                    const LossConfig& cfg) {
  return hierarchical(z_per_level, labels, tax, cfg, false);
}

LossResult himulcone(const std::vector<Matrix>& z_per_level,
                     const std::vector<LabelTriple>& labels, const Taxonomy& tax,
                     const LossConfig& cfg) {
  return hierarchical(z_per_level, labels, tax, cfg, true);
}

LossResult himulcone_with_floors(const std::vector<Matrix>& z_per_level,
                                 const std::vector<LabelTriple>& labels,
                                 const Taxonomy& tax, const LossConfig& cfg,
                                 const std::vector<double>& floors) {
  if (floors.size() != z_per_level.size()) {
    throw ShapeMismatch("one clamp floor required per level");
  }
  return hierarchical(z_per_level, labels, tax, cfg, true, &floors);
}

LossResult evaluate_loss(const std::vector<Matrix>& z_per_level,
                         const std::vector<LabelTriple>& labels,
                         const Taxonomy& tax, const LossConfig& cfg) {
  switch (cfg.variant) {
    case LossVariant::supcon: {
      std::vector<std::string> ids;
      ids.reserve(labels.size());
      for (const auto& t : labels) ids.push_back(t.individual);
      return supcon(z_per_level[0], ids, cfg.tau);
    }
    case LossVariant::himulcon:
      return himulcon(z_per_level, labels, tax, cfg);
    default:
      return himulcone(z_per_level, labels, tax, cfg);
  }
}

double grad_check(const std::vector<Matrix>& z_per_level,
                  const std::vector<LabelTriple>& labels, const Taxonomy& tax,
                  const LossConfig& cfg, double step) {
  if (step <= 0.0) throw InvalidConfig("finite-difference step must be positive");

  const LossResult analytic = evaluate_loss(z_per_level, labels, tax, cfg);

  // The reported gradient of the constraint-enforcing variant holds the clamp
  // floors constant, so the differenced function must pin them too.
  std::vector<double> floors;
  if (cfg.variant == LossVariant::himulcone) {
    floors.push_back(0.0);
    for (std::size_t l = 0; l + 1 < z_per_level.size(); ++l) {
      floors.push_back(analytic.per_pair_max[l]);
    }
  }
  auto value = [&](const std::vector<Matrix>& z) {
    if (cfg.variant == LossVariant::himulcone) {
      return himulcone_with_floors(z, labels, tax, cfg, floors).total;
    }
    return evaluate_loss(z, labels, tax, cfg).total;
  };

  std::vector<Matrix> z = z_per_level;
  double max_rel_err = 0.0;
  // The supcon variant only consumes the first matrix; check the levels the
  // analytic result actually covers.
  for (std::size_t l = 0; l < analytic.grad_wrt_z.size(); ++l) {
    for (std::size_t idx = 0; idx < z[l].data.size(); ++idx) {
      const double saved = z[l].data[idx];
      z[l].data[idx] = saved + step;
      const double up = value(z);
      z[l].data[idx] = saved - step;
      const double down = value(z);
      z[l].data[idx] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.grad_wrt_z[l].data[idx];
      const double rel = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
      max_rel_err = std::max(max_rel_err, rel);
    }
  }
  return max_rel_err;
}

}  // namespace hiercon
