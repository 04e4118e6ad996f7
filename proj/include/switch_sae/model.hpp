#pragma once

#include "switch_sae/numerics.hpp"
#include "switch_sae/parallel.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace ssae {

enum class ArchKind : std::uint8_t { TopK = 0, ReLU = 1, Switch = 2 };

std::string to_string(ArchKind kind);
ArchKind arch_from_string(const std::string& name);

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}
}  // namespace detail

/// Dense SAE: w_enc is M x d, w_dec is d x M (one feature per column).
template <typename Scalar>
struct DenseSaeParams {
  Matrix<Scalar> w_enc;
  Matrix<Scalar> w_dec;
  Vector<Scalar> b_pre;

  Index d() const { return w_dec.rows(); }
  Index width() const { return w_dec.cols(); }

  static DenseSaeParams zeros(Index d, Index m) {
    return {Matrix<Scalar>::Zero(m, d), Matrix<Scalar>::Zero(d, m), Vector<Scalar>::Zero(d)};
  }

  void validate() const {
    detail::require(w_enc.rows() == width() && w_enc.cols() == d(),
                    "DenseSaeParams: w_enc must be M x d");
    detail::require(b_pre.size() == d(), "DenseSaeParams: b_pre must have length d");
    detail::require(width() >= 1 && d() >= 1, "DenseSaeParams: empty dimensions");
  }
};

/// One expert: a TopK SAE without biases. w_enc is (M/N) x d, w_dec is d x (M/N).
template <typename Scalar>
struct ExpertParams {
  Matrix<Scalar> w_enc;
  Matrix<Scalar> w_dec;
};

template <typename Scalar>
struct SwitchSaeParams {
  std::vector<ExpertParams<Scalar>> experts;
  Matrix<Scalar> w_router;  // N x d
  Vector<Scalar> b_router;
  Vector<Scalar> b_pre;

  Index num_experts() const { return static_cast<Index>(experts.size()); }
  Index d() const { return b_pre.size(); }
  Index expert_width() const { return experts.empty() ? 0 : experts.front().w_dec.cols(); }
  Index width() const { return num_experts() * expert_width(); }

  static SwitchSaeParams zeros(Index d, Index n, Index expert_width) {
    SwitchSaeParams p;
    p.experts.assign(static_cast<std::size_t>(n),
                     {Matrix<Scalar>::Zero(expert_width, d), Matrix<Scalar>::Zero(d, expert_width)});
    p.w_router = Matrix<Scalar>::Zero(n, d);
    p.b_router = Vector<Scalar>::Zero(d);
    p.b_pre = Vector<Scalar>::Zero(d);
    return p;
  }

  void validate() const {
    detail::require(!experts.empty(), "SwitchSaeParams: need at least one expert");
    const Index m = expert_width();
    detail::require(m >= 1 && d() >= 1, "SwitchSaeParams: empty dimensions");
    for (const auto& e : experts) {
      detail::require(e.w_enc.rows() == m && e.w_enc.cols() == d(),
                      "SwitchSaeParams: expert w_enc must be (M/N) x d");
      detail::require(e.w_dec.rows() == d() && e.w_dec.cols() == m,
                      "SwitchSaeParams: expert w_dec must be d x (M/N)");
    }
    detail::require(w_router.rows() == num_experts() && w_router.cols() == d(),
                    "SwitchSaeParams: w_router must be N x d");
    detail::require(b_router.size() == d(), "SwitchSaeParams: b_router must have length d");
  }
};

template <typename T>
struct is_dense_params : std::false_type {};
template <typename S>
struct is_dense_params<DenseSaeParams<S>> : std::true_type {};
template <typename T>
struct is_switch_params : std::false_type {};
template <typename S>
struct is_switch_params<SwitchSaeParams<S>> : std::true_type {};

/// Calls fn(name, block_of_first, block_of_rest...) for each parameter block,
/// in the fixed order used everywhere (serialization, optimizer, checks):
/// dense: w_enc, w_dec, b_pre;
/// switch: per expert ascending (w_enc, w_dec), then w_router, b_router, b_pre.
template <typename Fn, typename First, typename... Rest>
void for_each_block(Fn&& fn, First& first, Rest&... rest) {
  using Base = std::remove_const_t<First>;
  if constexpr (is_dense_params<Base>::value) {
    fn(std::string("w_enc"), first.w_enc, rest.w_enc...);
    fn(std::string("w_dec"), first.w_dec, rest.w_dec...);
    fn(std::string("b_pre"), first.b_pre, rest.b_pre...);
  } else {
    static_assert(is_switch_params<Base>::value, "for_each_block: unsupported parameter type");
    for (std::size_t e = 0; e < first.experts.size(); ++e) {
      const std::string prefix = "expert" + std::to_string(e) + ".";
      fn(prefix + "w_enc", first.experts[e].w_enc, rest.experts[e].w_enc...);
      fn(prefix + "w_dec", first.experts[e].w_dec, rest.experts[e].w_dec...);
    }
    fn(std::string("w_router"), first.w_router, rest.w_router...);
    fn(std::string("b_router"), first.b_router, rest.b_router...);
    fn(std::string("b_pre"), first.b_pre, rest.b_pre...);
  }
}

/// Zero-valued parameters with the same shapes as `like`.
template <typename Params>
Params zeros_like(const Params& like) {
  Params out = like;
  for_each_block([](const std::string&, auto& block) { block.setZero(); }, out);
  return out;
}

template <typename Params>
Index parameter_count(const Params& params) {
  Index n = 0;
  for_each_block([&n](const std::string&, const auto& block) { n += block.size(); }, params);
  return n;
}

/// Decoder matrices of a model, one per expert (a single one for dense SAEs).
template <typename Scalar>
std::vector<Matrix<Scalar>> decoder_blocks(const DenseSaeParams<Scalar>& p) {
  return {p.w_dec};
}
template <typename Scalar>
std::vector<Matrix<Scalar>> decoder_blocks(const SwitchSaeParams<Scalar>& p) {
  std::vector<Matrix<Scalar>> out;
  for (const auto& e : p.experts) out.push_back(e.w_dec);
  return out;
}

/// All decoder columns side by side, experts in ascending order.
template <typename Params>
auto concatenated_decoder(const Params& p) {
  const auto blocks = decoder_blocks(p);
  using M = typename std::decay_t<decltype(blocks)>::value_type;
  Index cols = 0;
  for (const auto& b : blocks) cols += b.cols();
  M out(blocks.front().rows(), cols);
  Index at = 0;
  for (const auto& b : blocks) {
    out.middleCols(at, b.cols()) = b;
    at += b.cols();
  }
  return out;
}

/// Per-sample sparse codes. `expert` is filled only for Switch SAEs.
template <typename Scalar>
struct SparseLatents {
  std::vector<SparseVector<Scalar>> rows;
  std::vector<Index> expert;

  Index size() const { return static_cast<Index>(rows.size()); }
};

template <typename Scalar>
struct TopKForward {
  SparseLatents<Scalar> latents;
  Batch<Scalar> recon;
};

template <typename Scalar>
struct ReluForward {
  Batch<Scalar> pre;  // W_enc (x - b_pre), before the rectifier
  Batch<Scalar> latents;
  Batch<Scalar> recon;
};

/// Router output for one batch.
template <typename Scalar>
struct RoutingRecord {
  RowMatrix<Scalar> probs;  // T x N
  std::vector<Index> selected;
  Vector<Scalar> selected_prob;
  Vector<Scalar> f;  // fraction of samples routed to each expert
  Vector<Scalar> P;  // mean router probability per expert

  Index num_experts() const { return probs.cols(); }
  /// Samples routed to expert e, ascending.
  std::vector<Index> group(Index e) const {
    std::vector<Index> out;
    for (std::size_t t = 0; t < selected.size(); ++t)
      if (selected[t] == e) out.push_back(static_cast<Index>(t));
    return out;
  }
};

template <typename Scalar>
struct SwitchForward {
  RoutingRecord<Scalar> routing;
  SparseLatents<Scalar> latents;
  Batch<Scalar> expert_out;  // W_dec^{i*} z, before the probability scaling
  Batch<Scalar> recon;
};

namespace detail {

template <typename Scalar, typename Derived>
void check_batch(const Eigen::MatrixBase<Derived>& x, Index d) {
  require(x.cols() == d, "batch width " + std::to_string(x.cols()) +
                             " does not match model dimension " + std::to_string(d));
}

template <typename Scalar, typename Dec>
void accumulate_sparse(const Eigen::MatrixBase<Dec>& w_dec, const SparseVector<Scalar>& z,
                       Vector<Scalar>& out) {
  for (const auto& e : z.entries) out.noalias() += e.value * w_dec.col(e.index);
}

}  // namespace detail

/// z = TopK(W_enc (x - b_pre)), x_hat = W_dec z + b_pre. Decoding touches
/// only the k selected columns.
template <typename Scalar, typename Derived>
TopKForward<Scalar> topk_sae_forward(const DenseSaeParams<Scalar>& params,
                                     const Eigen::MatrixBase<Derived>& x, Index k,
                                     bool rectify = false) {
  params.validate();
  detail::check_batch<Scalar>(x, params.d());
  detail::require(k >= 1 && k <= params.width(), "topk_sae_forward: k must lie in [1, M]");

  const Index T = x.rows();
  const Batch<Scalar> centered = x.rowwise() - params.b_pre.transpose();
  const Batch<Scalar> pre = centered * params.w_enc.transpose();

  TopKForward<Scalar> out;
  out.latents.rows.resize(static_cast<std::size_t>(T));
  out.recon.resize(T, params.d());
  Vector<Scalar> acc(params.d());
  for (Index t = 0; t < T; ++t) {
    auto& z = out.latents.rows[static_cast<std::size_t>(t)];
    z = topk_select(pre.row(t).transpose(), k, rectify);
    acc = params.b_pre;
    detail::accumulate_sparse(params.w_dec, z, acc);
    out.recon.row(t) = acc.transpose();
  }
  return out;
}

/// z = max(0, W_enc (x - b_pre)), x_hat = W_dec z + b_pre.
template <typename Scalar, typename Derived>
ReluForward<Scalar> relu_sae_forward(const DenseSaeParams<Scalar>& params,
                                     const Eigen::MatrixBase<Derived>& x) {
  params.validate();
  detail::check_batch<Scalar>(x, params.d());
  ReluForward<Scalar> out;
  out.pre = (x.rowwise() - params.b_pre.transpose()) * params.w_enc.transpose();
  out.latents = out.pre.cwiseMax(Scalar(0));
  out.recon = (out.latents * params.w_dec.transpose()).rowwise() + params.b_pre.transpose();
  return out;
}

/// p = softmax(W_router (x - b_router)), routed to the most probable expert.
template <typename Scalar, typename Derived>
RoutingRecord<Scalar> route(const SwitchSaeParams<Scalar>& params,
                            const Eigen::MatrixBase<Derived>& x) {
  const Index T = x.rows();
  const Index N = params.num_experts();
  const RowMatrix<Scalar> logits =
      (x.rowwise() - params.b_router.transpose()) * params.w_router.transpose();

  RoutingRecord<Scalar> r;
  r.probs.resize(T, N);
  r.selected.resize(static_cast<std::size_t>(T));
  r.selected_prob.resize(T);
  r.f = Vector<Scalar>::Zero(N);
  for (Index t = 0; t < T; ++t) {
    r.probs.row(t) = softmax(logits.row(t).transpose()).transpose();
    const Index best = argmax(r.probs.row(t).transpose());
    r.selected[static_cast<std::size_t>(t)] = best;
    r.selected_prob(t) = r.probs(t, best);
    r.f(best) += Scalar(1);
  }
  if (T > 0) {
    r.f /= Scalar(T);
    r.P = r.probs.colwise().mean().transpose();
  } else {
    r.P = Vector<Scalar>::Zero(N);
  }
  return r;
}

/// x_hat = p_{i*} W_dec^{i*} TopK(W_enc^{i*} (x - b_pre)) + b_pre.
/// Samples are grouped by expert and each group is encoded with a single
/// (M/N) x d product; other experts' weights are never read for that group.
template <typename Scalar, typename Derived>
SwitchForward<Scalar> switch_sae_forward(const SwitchSaeParams<Scalar>& params,
                                         const Eigen::MatrixBase<Derived>& x, Index k,
                                         bool rectify = false) {
  params.validate();
  detail::check_batch<Scalar>(x, params.d());
  detail::require(k >= 1 && k <= params.expert_width(),
                  "switch_sae_forward: k must lie in [1, M/N]");

  const Index T = x.rows();
  const Index d = params.d();
  SwitchForward<Scalar> out;
  out.routing = route(params, x);
  out.latents.rows.resize(static_cast<std::size_t>(T));
  out.latents.expert = out.routing.selected;
  out.expert_out.resize(T, d);
  out.recon.resize(T, d);

  parallel_for(static_cast<std::size_t>(params.num_experts()), [&](std::size_t e) {
    const auto& expert = params.experts[e];
    const std::vector<Index> rows = out.routing.group(static_cast<Index>(e));
    if (rows.empty()) return;
    const Batch<Scalar> centered = x(rows, Eigen::all).rowwise() - params.b_pre.transpose();
    const Batch<Scalar> pre = centered * expert.w_enc.transpose();
    Vector<Scalar> acc(d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Index t = rows[r];
      auto& z = out.latents.rows[static_cast<std::size_t>(t)];
      z = topk_select(pre.row(static_cast<Index>(r)).transpose(), k, rectify);
      acc.setZero();
      detail::accumulate_sparse(expert.w_dec, z, acc);
      out.expert_out.row(t) = acc.transpose();
      out.recon.row(t) = (out.routing.selected_prob(t) * acc + params.b_pre).transpose();
    }
  });
  return out;
}

/// Per-activation FLOP counts. One multiply-accumulate counts as 2 FLOPs,
/// each bias add/subtract over d coordinates as d FLOPs; activation
/// functions, softmax and comparisons are not counted.
struct FlopReport {
  std::uint64_t encoder_flops = 0;
  std::uint64_t router_flops = 0;
  std::uint64_t decoder_flops = 0;
  std::uint64_t bias_flops = 0;
  std::uint64_t total_flops = 0;
};

struct ArchDescriptor {
  ArchKind kind = ArchKind::TopK;
  std::uint64_t d = 0;
  std::uint64_t width = 0;  // M, total features
  std::uint64_t experts = 1;
  std::uint64_t k = 0;
};

FlopReport flops_per_activation(const ArchDescriptor& arch);

}  // namespace ssae
