#include "switch_sae/gradcheck.hpp"

#include "switch_sae/errors.hpp"
#include "switch_sae/rng.hpp"

#include <limits>

namespace ssae {
namespace {

Matrixd gaussian(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrixd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  return m;
}

Matrixd unit_columns(Rng& rng, Index rows, Index cols) {
  Matrixd m = gaussian(rng, rows, cols);
  m.colwise().normalize();
  return m;
}

/// Gap between the k-th and (k+1)-th largest entries of each row.
double topk_gap(const Batchd& pre, Index k) {
  double gap = std::numeric_limits<double>::infinity();
  for (Index t = 0; t < pre.rows(); ++t) {
    if (k >= pre.cols()) continue;
    Vectord row = pre.row(t).transpose();
    std::sort(row.data(), row.data() + row.size(), std::greater<>());
    gap = std::min(gap, row(k - 1) - row(k));
  }
  return gap;
}

}  // namespace

double decision_margin(const ArchDescriptor& arch, const DenseSaeParams<double>& params,
                       const Batchd& x) {
  const Batchd pre = (x.rowwise() - params.b_pre.transpose()) * params.w_enc.transpose();
  if (arch.kind == ArchKind::ReLU) return pre.cwiseAbs().minCoeff();
  return topk_gap(pre, static_cast<Index>(arch.k));
}

double decision_margin(const ArchDescriptor& arch, const SwitchSaeParams<double>& params,
                       const Batchd& x) {
  const Batchd logits = (x.rowwise() - params.b_router.transpose()) * params.w_router.transpose();
  double margin = params.num_experts() > 1 ? topk_gap(logits, 1)
                                           : std::numeric_limits<double>::infinity();
  const auto routing = route(params, x);
  for (Index t = 0; t < x.rows(); ++t) {
    const auto& expert = params.experts[static_cast<std::size_t>(routing.selected[static_cast<std::size_t>(t)])];
    const Batchd pre = (x.row(t) - params.b_pre.transpose()) * expert.w_enc.transpose();
    margin = std::min(margin, topk_gap(pre, static_cast<Index>(arch.k)));
  }
  return margin;
}

GradCheckInstance make_gradcheck_instance(const ArchDescriptor& arch, std::uint64_t seed,
                                          const GradCheckOptions& opts) {
  const Index d = static_cast<Index>(arch.d);
  const Index n = static_cast<Index>(std::max<std::uint64_t>(arch.experts, 1));
  const Index width = static_cast<Index>(arch.width);
  detail::require(d >= 1 && width >= 1, "gradcheck: empty dimensions");
  detail::require(opts.batch >= 1, "gradcheck: batch must be positive");
  if (arch.kind == ArchKind::Switch) {
    detail::require(width % n == 0, "gradcheck: M must be divisible by N");
    detail::require(arch.k >= 1 && static_cast<Index>(arch.k) <= width / n,
                    "gradcheck: k must lie in [1, M/N]");
  } else if (arch.kind == ArchKind::TopK) {
    detail::require(arch.k >= 1 && static_cast<Index>(arch.k) <= width,
                    "gradcheck: k must lie in [1, M]");
  }

  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(attempt)));
    GradCheckInstance inst;
    inst.arch = arch;
    inst.seed = seed;
    inst.x = gaussian(rng, opts.batch, d);
    if (arch.kind == ArchKind::Switch) {
      const Index m = width / n;
      inst.switched = SwitchSaeParams<double>::zeros(d, n, m);
      for (auto& e : inst.switched.experts) {
        e.w_dec = unit_columns(rng, d, m);
        e.w_enc = gaussian(rng, m, d, 0.5);
      }
      inst.switched.w_router = gaussian(rng, n, d);
      inst.switched.b_router = gaussian(rng, d, 1, 0.1);
      inst.switched.b_pre = gaussian(rng, d, 1, 0.1);
      inst.margin = decision_margin(arch, inst.switched, inst.x);
    } else {
      inst.dense = DenseSaeParams<double>::zeros(d, width);
      inst.dense.w_dec = unit_columns(rng, d, width);
      inst.dense.w_enc = gaussian(rng, width, d, 0.5);
      inst.dense.b_pre = gaussian(rng, d, 1, 0.1);
      inst.margin = decision_margin(arch, inst.dense, inst.x);
    }
    if (inst.margin > 10.0 * opts.h) return inst;
  }
  throw NumericalError("gradcheck: no instance with decision margin > 10h after " +
                       std::to_string(opts.max_attempts) + " attempts");
}

GradCheckReport finite_diff_check(const ArchDescriptor& arch, std::uint64_t seed,
                                  const GradCheckOptions& opts) {
  const GradCheckInstance inst = make_gradcheck_instance(arch, seed, opts);
  const Batchd& x = inst.x;
  const Index k = static_cast<Index>(arch.k);
  switch (arch.kind) {
    case ArchKind::TopK: {
      const auto analytic = topk_sae_backward(inst.dense, x, k);
      return finite_diff_check(
          inst.dense, analytic.grads,
          [&](const DenseSaeParams<double>& p) { return topk_sae_backward(p, x, k).loss.total; },
          [&](const DenseSaeParams<double>& p) {
            return selection_signature(topk_sae_forward(p, x, k).latents);
          },
          opts.h);
    }
    case ArchKind::ReLU: {
      const auto analytic = relu_sae_backward(inst.dense, x, opts.l1_coeff);
      return finite_diff_check(
          inst.dense, analytic.grads,
          [&](const DenseSaeParams<double>& p) {
            return relu_sae_backward(p, x, opts.l1_coeff).loss.total;
          },
          [&](const DenseSaeParams<double>& p) {
            const Batchd pre = (x.rowwise() - p.b_pre.transpose()) * p.w_enc.transpose();
            std::vector<bool> active(static_cast<std::size_t>(pre.size()));
            for (Index i = 0; i < pre.size(); ++i) active[static_cast<std::size_t>(i)] = pre.data()[i] > 0;
            return active;
          },
          opts.h);
    }
    case ArchKind::Switch: {
      const auto analytic = switch_sae_backward(inst.switched, x, k, opts.alpha);
      const Vectord frozen_f = analytic.forward.routing.f;
      return finite_diff_check(
          inst.switched, analytic.grads,
          [&](const SwitchSaeParams<double>& p) {
            return switch_sae_loss(p, x, k, opts.alpha, &frozen_f);
          },
          [&](const SwitchSaeParams<double>& p) {
            return selection_signature(switch_sae_forward(p, x, k).latents);
          },
          opts.h);
    }
  }
  throw std::invalid_argument("gradcheck: unknown architecture");
}

}  // namespace ssae
