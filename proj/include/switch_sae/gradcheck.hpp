#pragma once

#include "switch_sae/grad.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ssae {

struct BlockCheck {
  std::string name;
  double max_rel_error = 0.0;
  Index worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  Index checked = 0;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;
  /// Coordinates whose perturbation changed a TopK, ReLU or routing decision.
  std::vector<std::string> skipped;
  double max_rel_error = 0.0;

  bool passed(double tol) const { return max_rel_error <= tol && !blocks.empty(); }
};

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Central differences on every coordinate of `params`, compared against
/// `analytic` block by block. `selection(params)` returns a comparable
/// summary of discrete decisions; a coordinate whose +h or -h perturbation
/// changes it is listed in `skipped` instead of compared.
template <typename Params, typename LossFn, typename SelectionFn>
GradCheckReport finite_diff_check(const Params& params, const Params& analytic, LossFn&& loss,
                                  SelectionFn&& selection, double h) {
  detail::require(h > 0, "finite_diff_check: h must be positive");
  GradCheckReport report;
  Params probe = params;
  const auto base = selection(probe);
  for_each_block(
      [&](const std::string& name, auto& block, const auto& grad) {
        BlockCheck check{name};
        for (Index i = 0; i < block.size(); ++i) {
          auto& coord = block.data()[i];
          const auto saved = coord;
          coord = saved + h;
          const double up = loss(probe);
          const bool up_same = selection(probe) == base;
          coord = saved - h;
          const double down = loss(probe);
          const bool down_same = selection(probe) == base;
          coord = saved;
          if (!up_same || !down_same) {
            report.skipped.push_back(name + "[" + std::to_string(i) + "]");
            continue;
          }
          const double fd = (up - down) / (2.0 * h);
          const double err = relative_error(fd, static_cast<double>(grad.data()[i]));
          ++check.checked;
          if (check.worst_coord < 0 || err > check.max_rel_error) {
            check.max_rel_error = err;
            check.worst_coord = i;
            check.worst_analytic = static_cast<double>(grad.data()[i]);
            check.worst_numeric = fd;
          }
        }
        report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
        report.blocks.push_back(std::move(check));
      },
      probe, analytic);
  return report;
}

/// Discrete decisions of a forward pass, for tie detection.
template <typename Scalar>
std::vector<Index> selection_signature(const SparseLatents<Scalar>& latents) {
  std::vector<Index> sig;
  for (std::size_t t = 0; t < latents.rows.size(); ++t) {
    sig.push_back(latents.expert.empty() ? -1 : latents.expert[t]);
    for (const auto& e : latents.rows[t].entries) sig.push_back(e.index);
    sig.push_back(-2);
  }
  return sig;
}

struct GradCheckOptions {
  double h = 1e-4;
  Index batch = 6;
  double alpha = 3.0;
  double l1_coeff = 0.1;
  int max_attempts = 1000;
};

/// Smallest decision margin of an instance: the gap between the k-th and
/// (k+1)-th pre-activation (TopK), the smallest |pre-activation| (ReLU),
/// and the gap between the two largest router logits (Switch).
double decision_margin(const ArchDescriptor& arch, const DenseSaeParams<double>& params,
                       const Batchd& x);
double decision_margin(const ArchDescriptor& arch, const SwitchSaeParams<double>& params,
                       const Batchd& x);

struct GradCheckInstance {
  ArchDescriptor arch;
  std::uint64_t seed = 0;
  Batchd x;
  DenseSaeParams<double> dense;
  SwitchSaeParams<double> switched;
  double margin = 0.0;
};

/// Random instance whose decision margin exceeds 10 h. Instances are drawn
/// from sub-streams of `seed` until one qualifies.
GradCheckInstance make_gradcheck_instance(const ArchDescriptor& arch, std::uint64_t seed,
                                          const GradCheckOptions& opts = {});

/// Builds a qualifying instance and checks the analytic gradient of the
/// architecture's loss against central differences.
GradCheckReport finite_diff_check(const ArchDescriptor& arch, std::uint64_t seed,
                                  const GradCheckOptions& opts = {});

}  // namespace ssae
