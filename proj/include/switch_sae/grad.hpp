#pragma once

#include "switch_sae/model.hpp"

#include <optional>

namespace ssae {

/// Loss terms of one batch. total = recon + alpha * d * aux + l1.
/// aux is zero for dense SAEs and l1 is zero for TopK and Switch SAEs.
struct LossBreakdown {
  double recon = 0.0;
  double aux = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  Index d = 0;
};

template <typename Params, typename Forward>
struct BackwardResult {
  Params grads;
  LossBreakdown loss;
  Forward forward;
};

template <typename Scalar>
using TopKBackward = BackwardResult<DenseSaeParams<Scalar>, TopKForward<Scalar>>;
template <typename Scalar>
using ReluBackward = BackwardResult<DenseSaeParams<Scalar>, ReluForward<Scalar>>;
template <typename Scalar>
using SwitchBackward = BackwardResult<SwitchSaeParams<Scalar>, SwitchForward<Scalar>>;

namespace detail {

template <typename Scalar, typename A, typename B>
double mean_squared_error(const Eigen::MatrixBase<A>& recon, const Eigen::MatrixBase<B>& x) {
  return static_cast<double>((recon - x).squaredNorm()) / static_cast<double>(x.rows());
}

/// Aux loss N * sum_i f_i P_i.
template <typename Scalar>
double aux_loss(const Vector<Scalar>& f, const Vector<Scalar>& P) {
  return static_cast<double>(f.size()) * static_cast<double>(f.dot(P));
}

}  // namespace detail

/// Gradients of mean_t ||x_t - x_hat_t||^2. The TopK mask chosen by the
/// forward pass is held fixed; unselected latents receive no gradient.
template <typename Scalar, typename Derived>
TopKBackward<Scalar> topk_sae_backward(const DenseSaeParams<Scalar>& params,
                                       const Eigen::MatrixBase<Derived>& x, Index k,
                                       bool rectify = false) {
  TopKBackward<Scalar> out{zeros_like(params), {}, topk_sae_forward(params, x, k, rectify)};
  const Index T = x.rows();
  const Scalar scale = Scalar(2) / Scalar(T);
  auto& g = out.grads;

  Vector<Scalar> gr(params.d());
  Vector<Scalar> centered(params.d());
  for (Index t = 0; t < T; ++t) {
    gr = scale * (out.forward.recon.row(t) - x.row(t)).transpose();
    centered = (x.row(t).transpose() - params.b_pre);
    g.b_pre += gr;
    for (const auto& e : out.forward.latents.rows[static_cast<std::size_t>(t)].entries) {
      g.w_dec.col(e.index).noalias() += e.value * gr;
      const Scalar dz = params.w_dec.col(e.index).dot(gr);
      g.w_enc.row(e.index).noalias() += dz * centered.transpose();
      g.b_pre.noalias() -= dz * params.w_enc.row(e.index).transpose();
    }
  }
  out.loss.recon = detail::mean_squared_error<Scalar>(out.forward.recon, x);
  out.loss.d = params.d();
  out.loss.total = out.loss.recon;
  return out;
}

/// Gradients of mean_t ||x_t - x_hat_t||^2 + l1_coeff * mean_t ||z_t||_1.
/// Subgradients of ReLU and |.| are taken as 0 at exactly 0.
template <typename Scalar, typename Derived>
ReluBackward<Scalar> relu_sae_backward(const DenseSaeParams<Scalar>& params,
                                       const Eigen::MatrixBase<Derived>& x, double l1_coeff) {
  detail::require(l1_coeff >= 0, "relu_sae_backward: l1_coeff must be non-negative");
  ReluBackward<Scalar> out{zeros_like(params), {}, relu_sae_forward(params, x)};
  const auto& fw = out.forward;
  const Index T = x.rows();
  const Scalar inv_t = Scalar(1) / Scalar(T);

  const Batch<Scalar> grad_recon = (Scalar(2) * inv_t) * (fw.recon - x);
  const Batch<Scalar> centered = x.rowwise() - params.b_pre.transpose();
  const auto active = (fw.pre.array() > Scalar(0)).template cast<Scalar>();
  Batch<Scalar> grad_pre = grad_recon * params.w_dec;
  grad_pre.array() += Scalar(l1_coeff) * inv_t * (fw.latents.array() > Scalar(0)).template cast<Scalar>();
  grad_pre.array() *= active;

  auto& g = out.grads;
  g.w_dec.noalias() = grad_recon.transpose() * fw.latents;
  g.w_enc.noalias() = grad_pre.transpose() * centered;
  g.b_pre = grad_recon.colwise().sum().transpose() -
            (grad_pre * params.w_enc).colwise().sum().transpose();

  out.loss.recon = detail::mean_squared_error<Scalar>(fw.recon, x);
  out.loss.l1 = l1_coeff * static_cast<double>(fw.latents.cwiseAbs().sum()) / static_cast<double>(T);
  out.loss.d = params.d();
  out.loss.total = out.loss.recon + out.loss.l1;
  return out;
}

/// Gradients of L_recon + alpha * d * L_aux for a Switch SAE.
///
/// Reconstruction reaches the router only through the selected
/// probability p_{i*}. In the aux term f is a constant (the argmax
/// indicator has no gradient) and P_i carries the gradient, so
/// dL_aux/dp_i(x) = N f_i / T. Both routes then pass through the softmax
/// Jacobian. Expert blocks are written by one task each; b_pre
/// contributions are summed in sample order.
template <typename Scalar, typename Derived>
SwitchBackward<Scalar> switch_sae_backward(const SwitchSaeParams<Scalar>& params,
                                           const Eigen::MatrixBase<Derived>& x, Index k,
                                           double alpha, bool rectify = false) {
  detail::require(alpha >= 0, "switch_sae_backward: alpha must be non-negative");
  SwitchBackward<Scalar> out{zeros_like(params), {}, switch_sae_forward(params, x, k, rectify)};
  const auto& fw = out.forward;
  const auto& routing = fw.routing;
  const Index T = x.rows();
  const Index N = params.num_experts();
  const Index d = params.d();
  auto& g = out.grads;

  const Batch<Scalar> grad_recon = (Scalar(2) / Scalar(T)) * (fw.recon - x);
  Batch<Scalar> b_pre_terms = grad_recon;

  parallel_for(static_cast<std::size_t>(N), [&](std::size_t e) {
    const auto& expert = params.experts[e];
    auto& ge = g.experts[e];
    Vector<Scalar> gr(d);
    Vector<Scalar> centered(d);
    for (Index t : routing.group(static_cast<Index>(e))) {
      const Scalar p = routing.selected_prob(t);
      gr = grad_recon.row(t).transpose();
      centered = x.row(t).transpose() - params.b_pre;
      for (const auto& z : fw.latents.rows[static_cast<std::size_t>(t)].entries) {
        ge.w_dec.col(z.index).noalias() += (p * z.value) * gr;
        const Scalar dz = p * expert.w_dec.col(z.index).dot(gr);
        ge.w_enc.row(z.index).noalias() += dz * centered.transpose();
        b_pre_terms.row(t).noalias() -= dz * expert.w_enc.row(z.index);
      }
    }
  });
  g.b_pre = b_pre_terms.colwise().sum().transpose();

  const Scalar aux_scale = Scalar(alpha) * Scalar(d) * Scalar(N) / Scalar(T);
  RowMatrix<Scalar> grad_logits(T, N);
  Vector<Scalar> dp(N);
  for (Index t = 0; t < T; ++t) {
    dp = aux_scale * routing.f;
    const Index sel = routing.selected[static_cast<std::size_t>(t)];
    dp(sel) += grad_recon.row(t).dot(fw.expert_out.row(t));
    const auto p = routing.probs.row(t).transpose();
    grad_logits.row(t) = (p.array() * (dp.array() - p.dot(dp))).matrix().transpose();
  }
  const Batch<Scalar> router_in = x.rowwise() - params.b_router.transpose();
  g.w_router.noalias() = grad_logits.transpose() * router_in;
  g.b_router = -(grad_logits * params.w_router).colwise().sum().transpose();

  out.loss.recon = detail::mean_squared_error<Scalar>(fw.recon, x);
  out.loss.aux = detail::aux_loss(routing.f, routing.P);
  out.loss.alpha = alpha;
  out.loss.d = d;
  out.loss.total = out.loss.recon + alpha * static_cast<double>(d) * out.loss.aux;
  return out;
}

/// Scalar L_total with an optionally frozen f (the stop-gradient convention).
template <typename Scalar, typename Derived>
double switch_sae_loss(const SwitchSaeParams<Scalar>& params, const Eigen::MatrixBase<Derived>& x,
                       Index k, double alpha, const Vector<Scalar>* frozen_f = nullptr,
                       bool rectify = false) {
  const auto fw = switch_sae_forward(params, x, k, rectify);
  const Vector<Scalar>& f = frozen_f ? *frozen_f : fw.routing.f;
  return detail::mean_squared_error<Scalar>(fw.recon, x) +
         alpha * static_cast<double>(params.d()) * detail::aux_loss(f, fw.routing.P);
}

}  // namespace ssae
