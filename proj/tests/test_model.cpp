#include "support.hpp"

#include "switch_sae/model.hpp"

#include <doctest.h>

#include <numeric>

using namespace ssae;
using namespace ssae::testing;

namespace {

double rel_err(const Batchd& a, const Batchd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

/// Dense reference: full pre-activation vector, zero everything outside the
/// top k, full matrix-vector decode.
Batchd dense_masked_topk(const DenseSaeParams<double>& p, const Batchd& x, Index k) {
  Batchd out(x.rows(), p.d());
  for (Index t = 0; t < x.rows(); ++t) {
    Vectord pre = p.w_enc * (x.row(t).transpose() - p.b_pre);
    std::vector<Index> order(static_cast<std::size_t>(pre.size()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return pre(a) > pre(b); });
    Vectord z = Vectord::Zero(pre.size());
    for (Index j = 0; j < k; ++j) z(order[static_cast<std::size_t>(j)]) = pre(order[static_cast<std::size_t>(j)]);
    out.row(t) = (p.w_dec * z + p.b_pre).transpose();
  }
  return out;
}

/// Evaluates every expert densely for every sample, then keeps the one the
/// router prefers, weighted by its probability.
Batchd all_experts_oracle(const SwitchSaeParams<double>& p, const Batchd& x, Index k) {
  Batchd out(x.rows(), p.d());
  for (Index t = 0; t < x.rows(); ++t) {
    const Vectord xt = x.row(t).transpose();
    const Vectord logits = p.w_router * (xt - p.b_router);
    Vectord prob = (logits.array() - logits.maxCoeff()).exp();
    prob /= prob.sum();
    std::vector<Vectord> expert_out;
    for (const auto& e : p.experts) {
      DenseSaeParams<double> single{e.w_enc, e.w_dec, Vectord::Zero(p.d())};
      expert_out.push_back(dense_masked_topk(single, (xt - p.b_pre).transpose(), k).row(0).transpose());
    }
    Index best = 0;
    for (Index i = 1; i < prob.size(); ++i)
      if (prob(i) > prob(best)) best = i;
    out.row(t) = (prob(best) * expert_out[static_cast<std::size_t>(best)] + p.b_pre).transpose();
  }
  return out;
}

}  // namespace

TEST_CASE("identity TopK autoencoder reproduces its input") {
  const Index d = 5;
  DenseSaeParams<double> p{Matrixd::Identity(d, d), Matrixd::Identity(d, d), Vectord::Zero(d)};
  Rng rng(1);
  const Batchd x = gaussian_batch(rng, 7, d);
  const auto fw = topk_sae_forward(p, x, d);
  CHECK(fw.recon == x);
}

TEST_CASE("TopK sparse decode matches the dense masked reference") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = 2 + static_cast<Index>(rng.below(6));
    const Index m = 2 + static_cast<Index>(rng.below(14));
    const Index k = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(m)));
    const auto p = random_dense(rng, d, m);
    const Batchd x = gaussian_batch(rng, 3, d);
    const auto fw = topk_sae_forward(p, x, k);
    CHECK(rel_err(fw.recon, dense_masked_topk(p, x, k)) <= 1e-12);
    for (const auto& z : fw.latents.rows) CHECK(z.nnz() == k);
  }
}

TEST_CASE("TopK d=2, M=4, k=2 hand-sized instance") {
  Rng rng(3);
  const auto p = random_dense(rng, 2, 4);
  const Batchd x = gaussian_batch(rng, 3, 2);
  CHECK(rel_err(topk_sae_forward(p, x, 2).recon, dense_masked_topk(p, x, 2)) <= 1e-6);
}

TEST_CASE("TopK reconstruction lies in the span of the selected columns") {
  Rng rng(4);
  const auto p = random_dense(rng, 8, 16);
  const Batchd x = gaussian_batch(rng, 20, 8);
  const Index k = 3;
  const auto fw = topk_sae_forward(p, x, k);
  for (Index t = 0; t < x.rows(); ++t) {
    Matrixd cols(8, k);
    Index c = 0;
    for (const auto& e : fw.latents.rows[static_cast<std::size_t>(t)].entries) cols.col(c++) = p.w_dec.col(e.index);
    const Vectord r = fw.recon.row(t).transpose() - p.b_pre;
    const Vectord coef = cols.colPivHouseholderQr().solve(r);
    CHECK((cols * coef - r).norm() < 1e-6);
  }
}

TEST_CASE("forward passes reject mismatched shapes") {
  Rng rng(5);
  const auto p = random_dense(rng, 4, 8);
  const Batchd bad = gaussian_batch(rng, 2, 3);
  CHECK_THROWS_AS(topk_sae_forward(p, bad, 2), std::invalid_argument);
  CHECK_THROWS_AS(relu_sae_forward(p, bad), std::invalid_argument);
  CHECK_THROWS_AS(topk_sae_forward(p, gaussian_batch(rng, 2, 4), 9), std::invalid_argument);
  CHECK_THROWS_AS(topk_sae_forward(p, gaussian_batch(rng, 2, 4), 0), std::invalid_argument);
  const auto s = random_switch(rng, 4, 2, 4);
  CHECK_THROWS_AS(switch_sae_forward(s, bad, 2), std::invalid_argument);
  CHECK_THROWS_AS(switch_sae_forward(s, gaussian_batch(rng, 2, 4), 5), std::invalid_argument);
}

TEST_CASE("ReLU forward examples") {
  DenseSaeParams<double> p;
  p.w_enc.resize(3, 2);
  p.w_enc << 1, 0, 0, 1, 1, 1;
  p.w_dec.resize(2, 3);
  p.w_dec << 1, 0, 0.6, 0, 1, 0.8;
  p.b_pre = Vectord::Zero(2);

  Batchd neg(1, 2);
  neg << -1, -2;
  auto fw = relu_sae_forward(p, neg);
  CHECK(fw.latents.isZero(0.0));
  CHECK(fw.recon == RowMatrix<double>::Zero(1, 2));

  // Hand case: x = (2, -1): pre = (2, -1, 1), z = (2, 0, 1),
  // x_hat = 2*(1,0) + 1*(0.6, 0.8) = (2.6, 0.8).
  Batchd x(1, 2);
  x << 2, -1;
  fw = relu_sae_forward(p, x);
  CHECK(fw.latents(0, 0) == 2.0);
  CHECK(fw.latents(0, 1) == 0.0);
  CHECK(fw.latents(0, 2) == 1.0);
  CHECK(std::abs(fw.recon(0, 0) - 2.6) < 1e-15);
  CHECK(std::abs(fw.recon(0, 1) - 0.8) < 1e-15);

  // All positive pre-activations: same as TopK with k = M.
  Batchd pos(1, 2);
  pos << 1, 2;
  CHECK(rel_err(relu_sae_forward(p, pos).recon, topk_sae_forward(p, pos, 3).recon) <= 1e-15);
}

TEST_CASE("single-expert Switch SAE is a TopK SAE with p = 1") {
  Rng rng(6);
  auto s = random_switch(rng, 5, 1, 6);
  const Batchd x = gaussian_batch(rng, 9, 5);
  const auto fw = switch_sae_forward(s, x, 2);
  DenseSaeParams<double> dense{s.experts[0].w_enc, s.experts[0].w_dec, s.b_pre};
  CHECK(rel_err(fw.recon, topk_sae_forward(dense, x, 2).recon) <= 1e-15);
  for (Index t = 0; t < x.rows(); ++t) CHECK(fw.routing.selected_prob(t) == 1.0);
  CHECK(fw.routing.f(0) == 1.0);
}

TEST_CASE("saturated router selects the favoured expert with p = 1") {
  Rng rng(7);
  auto s = random_switch(rng, 3, 3, 4);
  s.w_router.setZero();
  s.b_router.setZero();
  s.w_router(2, 0) = 40.0;  // logit margin 40 * x0 with x0 = 1
  Batchd x = gaussian_batch(rng, 4, 3);
  x.col(0).setOnes();
  const auto fw = switch_sae_forward(s, x, 2);
  for (Index t = 0; t < x.rows(); ++t) {
    CHECK(fw.routing.selected[static_cast<std::size_t>(t)] == 2);
    CHECK(std::abs(fw.routing.selected_prob(t) - 1.0) <= 1e-9);
  }
}

TEST_CASE("Switch forward d=3, N=2, M/N=4, k=2 matches the all-experts oracle") {
  Rng rng(8);
  const auto s = random_switch(rng, 3, 2, 4);
  const Batchd x = gaussian_batch(rng, 4, 3);
  CHECK(rel_err(switch_sae_forward(s, x, 2).recon, all_experts_oracle(s, x, 2)) <= 1e-6);
}

TEST_CASE("Switch forward equals the all-experts oracle on 200 random instances") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const Index d = 1 + static_cast<Index>(rng.below(8));
    const Index n = 1 + static_cast<Index>(rng.below(4));
    const Index m = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(16 / n)));
    const Index k = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(m)));
    const Index T = 1 + static_cast<Index>(rng.below(12));
    const auto s = random_switch(rng, d, n, m);
    const Batchd x = gaussian_batch(rng, T, d);
    const auto fw = switch_sae_forward(s, x, k);
    CHECK(rel_err(fw.recon, all_experts_oracle(s, x, k)) <= 1e-6);
    for (const auto& z : fw.latents.rows) CHECK(z.nnz() == k);
  }
}

TEST_CASE("routing record invariants") {
  Rng rng(10);
  const auto s = random_switch(rng, 6, 4, 3);
  const Batchd x = gaussian_batch(rng, 37, 6);
  const auto r = route(s, x);
  for (Index t = 0; t < x.rows(); ++t) {
    CHECK(std::abs(r.probs.row(t).sum() - 1.0) <= 1e-9);
    CHECK(r.selected[static_cast<std::size_t>(t)] == argmax(r.probs.row(t).transpose()));
    CHECK(r.selected_prob(t) == r.probs(t, r.selected[static_cast<std::size_t>(t)]));
  }
  CHECK(std::abs(r.f.sum() - 1.0) <= 1e-9);
  CHECK(std::abs(r.P.sum() - 1.0) <= 1e-9);
  for (Index i = 0; i < r.f.size(); ++i) {
    const double count = r.f(i) * 37.0;
    CHECK(std::abs(count - std::round(count)) <= 1e-9);
    CHECK(static_cast<Index>(r.group(i).size()) == static_cast<Index>(std::round(count)));
  }
}

TEST_CASE("router is invariant to a constant logit shift") {
  Rng rng(11);
  const auto s = random_switch(rng, 4, 3, 2);
  const Batchd x = gaussian_batch(rng, 10, 4);
  // Moving b_router by u with W u = -c 1 adds c to every logit.
  SwitchSaeParams<double> shifted = s;
  const Vectord c = Vectord::Constant(3, 7.5);
  const Vectord u = s.w_router.completeOrthogonalDecomposition().solve(-c);
  REQUIRE((s.w_router * u + c).norm() < 1e-10);
  shifted.b_router += u;
  const auto a = route(s, x);
  const auto b = route(shifted, x);
  CHECK(a.selected == b.selected);
  CHECK((a.probs - b.probs).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("non-selected experts are never read") {
  Rng rng(12);
  auto s = random_switch(rng, 4, 3, 4);
  const Batchd x = gaussian_batch(rng, 16, 4);
  const auto before = switch_sae_forward(s, x, 2);
  std::vector<bool> used(3, false);
  for (Index e : before.routing.selected) used[static_cast<std::size_t>(e)] = true;
  for (std::size_t e = 0; e < 3; ++e) {
    if (used[e]) continue;
    s.experts[e].w_enc.setConstant(std::numeric_limits<double>::quiet_NaN());
    s.experts[e].w_dec.setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  const auto after = switch_sae_forward(s, x, 2);
  CHECK(after.recon == before.recon);
}

TEST_CASE("FLOP accounting examples") {
  const auto dense = flops_per_activation({ArchKind::TopK, 768, 24576, 1, 32});
  CHECK(dense.encoder_flops == 37748736);
  CHECK(dense.router_flops == 0);

  const auto sw = flops_per_activation({ArchKind::Switch, 768, 24576, 16, 32});
  CHECK(sw.encoder_flops == 2359296);
  CHECK(sw.router_flops == 24576);
  const double ratio = static_cast<double>(dense.encoder_flops) / static_cast<double>(sw.encoder_flops + sw.router_flops);
  CHECK(std::abs(ratio - 15.84) < 0.005);

  const auto one = flops_per_activation({ArchKind::Switch, 64, 256, 1, 8});
  const auto base = flops_per_activation({ArchKind::TopK, 64, 256, 1, 8});
  CHECK(one.encoder_flops == base.encoder_flops);
}

TEST_CASE("FLOP report totals and monotonicity") {
  for (ArchKind kind : {ArchKind::TopK, ArchKind::ReLU, ArchKind::Switch}) {
    for (std::uint64_t n : {1, 2, 4, 8}) {
      if (kind != ArchKind::Switch && n != 1) continue;
      const auto r = flops_per_activation({kind, 64, 512, n, 8});
      CHECK(r.total_flops == r.encoder_flops + r.router_flops + r.decoder_flops + r.bias_flops);
    }
  }
  const auto a = flops_per_activation({ArchKind::TopK, 64, 256, 1, 8});
  const auto b = flops_per_activation({ArchKind::TopK, 64, 512, 1, 8});
  CHECK(b.encoder_flops == 2 * a.encoder_flops);
  const auto s2 = flops_per_activation({ArchKind::Switch, 64, 512, 2, 8});
  const auto s8 = flops_per_activation({ArchKind::Switch, 64, 512, 8, 8});
  CHECK(s2.encoder_flops == 4 * s8.encoder_flops);
  CHECK(s8.router_flops == 4 * s2.router_flops);
  CHECK(s8.decoder_flops == 2 * 8 * 64);
}

TEST_CASE("block order and helpers") {
  Rng rng(13);
  const auto s = random_switch(rng, 3, 2, 4);
  std::vector<std::string> names;
  for_each_block([&](const std::string& n, const auto&) { names.push_back(n); }, s);
  CHECK(names == std::vector<std::string>{"expert0.w_enc", "expert0.w_dec", "expert1.w_enc", "expert1.w_dec",
                                          "w_router", "b_router", "b_pre"});
  CHECK(parameter_count(s) == 2 * (4 * 3 + 3 * 4) + 2 * 3 + 3 + 3);
  const Matrixd cat = concatenated_decoder(s);
  CHECK(cat.cols() == 8);
  CHECK(cat.leftCols(4) == s.experts[0].w_dec);
  CHECK(cat.rightCols(4) == s.experts[1].w_dec);
  CHECK(arch_from_string(to_string(ArchKind::Switch)) == ArchKind::Switch);
  CHECK_THROWS_AS(arch_from_string("gated"), std::invalid_argument);
}
