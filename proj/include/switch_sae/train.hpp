#pragma once

#include "switch_sae/errors.hpp"
#include "switch_sae/grad.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <variant>
#include <vector>

namespace ssae {

class BatchSource;

struct TrainConfig {
  ArchKind arch = ArchKind::TopK;
  Index d = 0;
  Index width = 0;  // M, total features
  Index experts = 1;
  Index k = 0;
  bool topk_relu = false;
  double alpha = 3.0;
  double l1_coeff = 0.0;
  double base_lr_scale = 0.0128;
  Index steps = 1;
  Index batch_size = 256;
  std::uint64_t seed = 0;
  Index eval_every = 100;
  double lr_decay_fraction = 0.2;

  /// Throws std::invalid_argument on the first violated constraint.
  void validate() const;
};

/// A trained or initialized model of any of the three architectures.
struct SaeModel {
  ArchKind kind = ArchKind::TopK;
  Index k = 0;  // unused for ReLU
  bool topk_relu = false;
  std::variant<DenseSaeParams<double>, SwitchSaeParams<double>> params;

  Index d() const;
  Index width() const;
  Index experts() const;
  const DenseSaeParams<double>& dense() const { return std::get<DenseSaeParams<double>>(params); }
  const SwitchSaeParams<double>& switched() const { return std::get<SwitchSaeParams<double>>(params); }
  DenseSaeParams<double>& dense() { return std::get<DenseSaeParams<double>>(params); }
  SwitchSaeParams<double>& switched() { return std::get<SwitchSaeParams<double>>(params); }
};

/// base_lr_scale / sqrt(M), held until (1 - decay_fraction) * total_steps and
/// then decayed linearly to 0 at total_steps.
double lr_schedule(Index step, Index total_steps, Index width, double base_lr_scale,
                   double decay_fraction);

template <typename Params>
struct AdamState {
  Params m;
  Params v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const Params& params) {
    return {zeros_like(params), zeros_like(params)};
  }
};

/// Bias-corrected Adam update, in place.
template <typename Params>
void adam_step(AdamState<Params>& state, Params& params, const Params& grads, double lr) {
  detail::require(lr >= 0, "adam_step: learning rate must be non-negative");
  for_each_block(
      [](const std::string& name, const auto& p, const auto& m, const auto& v, const auto& g) {
        detail::require(p.rows() == g.rows() && p.cols() == g.cols() && m.rows() == p.rows() &&
                            m.cols() == p.cols() && v.rows() == p.rows() && v.cols() == p.cols(),
                        "adam_step: shape mismatch in block " + name);
      },
      params, state.m, state.v, grads);

  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const double b1 = state.beta1, b2 = state.beta2, eps = state.eps;
  for_each_block(
      [&](const std::string&, auto& p, auto& m, auto& v, const auto& g) {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
        p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
      },
      params, state.m, state.v, grads);
}

/// Calls fn(label, decoder, others...) for each decoder matrix.
template <typename Fn, typename First, typename... Rest>
void for_each_decoder(Fn&& fn, First& first, Rest&... rest) {
  using Base = std::remove_const_t<First>;
  if constexpr (is_dense_params<Base>::value) {
    fn(std::string("decoder"), first.w_dec, rest.w_dec...);
  } else {
    for (std::size_t e = 0; e < first.experts.size(); ++e)
      fn("expert " + std::to_string(e) + " decoder", first.experts[e].w_dec,
         rest.experts[e].w_dec...);
  }
}

/// Removes from each decoder-column gradient its component along that
/// (unit-norm) column: g_j <- g_j - (g_j . d_j) d_j.
template <typename Params>
void project_decoder_grads(const Params& params, Params& grads) {
  for_each_decoder(
      [](const std::string&, const auto& dec, auto& g) {
        const auto along = g.cwiseProduct(dec).colwise().sum().eval();
        g.noalias() -= dec * along.asDiagonal();
      },
      params, grads);
}

/// Scales every decoder column to unit L2 norm.
template <typename Params>
void renormalize_decoder(Params& params) {
  for_each_decoder(
      [](const std::string& label, auto& dec) {
        for (Index j = 0; j < dec.cols(); ++j) {
          const auto norm = dec.col(j).norm();
          if (!(norm > 0) || !std::isfinite(static_cast<double>(norm)))
            throw NumericalError(label + " column " + std::to_string(j) +
                                 " has degenerate norm " + std::to_string(static_cast<double>(norm)));
          dec.col(j) /= norm;
        }
      },
      params);
}

/// Largest |norm - 1| over all decoder columns.
template <typename Params>
double max_decoder_norm_error(const Params& params) {
  double err = 0.0;
  for_each_decoder(
      [&err](const std::string&, const auto& dec) {
        for (Index j = 0; j < dec.cols(); ++j)
          err = std::max(err, std::abs(static_cast<double>(dec.col(j).norm()) - 1.0));
      },
      params);
  return err;
}

/// Largest |g_j . d_j| over all decoder columns.
template <typename Params>
double max_decoder_grad_alignment(const Params& params, const Params& grads) {
  double worst = 0.0;
  for_each_decoder(
      [&worst](const std::string&, const auto& dec, const auto& g) {
        worst = std::max(worst, static_cast<double>(g.cwiseProduct(dec).colwise().sum().cwiseAbs().maxCoeff()));
      },
      params, grads);
  return worst;
}

/// Tied initialization: unit-norm Gaussian decoder columns, encoder rows
/// equal to the decoder columns, b_pre (and, independently, b_router) at
/// the geometric median of `init_batch`. Router weights are N(0, 1/d).
SaeModel init_params(const TrainConfig& config, const Batchd& init_batch, std::uint64_t seed);

struct TrainLogRow {
  Index step = 0;
  double lr = 0.0;
  double recon = 0.0;
  double aux = 0.0;
  double total = 0.0;
  double dead_frac = 0.0;
  std::vector<double> f;
};

/// Per-step view handed to a training observer. `before` is the model the
/// gradients were taken at; `grads` are the decoder-projected gradients fed
/// to Adam; `after` is the model after the update and renormalization.
struct StepView {
  Index step;
  double lr;
  const LossBreakdown& loss;
  const std::vector<double>& f;
  const SaeModel& before;
  const std::variant<DenseSaeParams<double>, SwitchSaeParams<double>>& grads;
  const SaeModel& after;
};

using StepObserver = std::function<void(const StepView&)>;

struct TrainResult {
  SaeModel model;
  std::vector<TrainLogRow> log;
};

/// forward -> backward -> project_decoder_grads -> adam_step ->
/// renormalize_decoder, once per step. The first batch initializes the
/// model and is also the batch of step 0. A row is logged every
/// `eval_every` steps (and at the last step), averaging losses and f over
/// the steps since the previous row; dead_frac counts features with no
/// activation in that window.
TrainResult train(const TrainConfig& config, BatchSource& source,
                  const StepObserver& observer = {});

}  // namespace ssae
