#include "switch_sae/eval.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace ssae {
namespace {

constexpr Index kGramBlock = 1024;

double clamp_cos(double c) { return std::clamp(c, -1.0, 1.0); }

/// Best cosine of every column of `a` against the columns of `b`. Both
/// must be unit-normalized. When `same`, the diagonal is skipped.
Vectord best_match(const Matrixd& a, const Matrixd& b, bool same) {
  Vectord best = Vectord::Constant(a.cols(), -std::numeric_limits<double>::infinity());
  for (Index start = 0; start < b.cols(); start += kGramBlock) {
    const Index width = std::min(kGramBlock, b.cols() - start);
    const Matrixd gram = a.transpose() * b.middleCols(start, width);
    for (Index j = 0; j < width; ++j) {
      for (Index i = 0; i < a.cols(); ++i) {
        if (same && i == start + j) continue;
        best(i) = std::max(best(i), gram(i, j));
      }
    }
  }
  return best.unaryExpr(&clamp_cos);
}

}  // namespace

Matrixd unit_columns(const Matrixd& m) {
  Matrixd out = m;
  for (Index j = 0; j < out.cols(); ++j) {
    const double n = out.col(j).norm();
    if (n > 0) out.col(j) /= n;
  }
  return out;
}

EvalAccumulator::EvalAccumulator(Index d, Index width, Index experts)
    : d_(d),
      experts_(experts),
      shifted_sum_(Vectord::Zero(d)),
      fired_(static_cast<std::size_t>(width), 0),
      routed_(Vectord::Zero(experts)),
      prob_mass_(Vectord::Zero(experts)) {}

void EvalAccumulator::add_reconstruction(const Batchd& x, const Batchd& recon) {
  detail::require(x.cols() == d_ && recon.rows() == x.rows() && recon.cols() == d_,
                  "EvalAccumulator: batch shape mismatch");
  if (x.rows() == 0) return;
  if (!shift_) shift_ = x.row(0).transpose();
  squared_error_ += (x - recon).squaredNorm();
  const Batchd shifted = x.rowwise() - shift_->transpose();
  shifted_sum_ += shifted.colwise().sum().transpose();
  shifted_sumsq_ += shifted.squaredNorm();
  samples_ += x.rows();
}

void EvalAccumulator::add_sparse_activity(const SparseLatents<double>& latents, Index expert_width) {
  for (std::size_t t = 0; t < latents.rows.size(); ++t) {
    const Index offset = latents.expert.empty() ? 0 : latents.expert[t] * expert_width;
    for (const auto& e : latents.rows[t].entries) {
      if (e.value != 0) {
        l0_total_ += 1;
        fired_[static_cast<std::size_t>(offset + e.index)] = 1;
      }
    }
  }
}

void EvalAccumulator::add_dense_activity(const Batchd& latents) {
  for (Index t = 0; t < latents.rows(); ++t)
    for (Index j = 0; j < latents.cols(); ++j)
      if (latents(t, j) != 0) {
        l0_total_ += 1;
        fired_[static_cast<std::size_t>(j)] = 1;
      }
}

void EvalAccumulator::add_routing(const RoutingRecord<double>& routing) {
  for (Index sel : routing.selected) routed_(sel) += 1;
  prob_mass_ += routing.probs.colwise().sum().transpose();
}

EvalReport EvalAccumulator::finish() const {
  if (samples_ == 0) throw std::invalid_argument("reconstruction_metrics: empty data");
  EvalReport r;
  const double n = static_cast<double>(samples_);
  r.samples = samples_;
  r.mse = squared_error_ / n;
  const Vectord mean_shifted = shifted_sum_ / n;
  const double variance = std::max(0.0, shifted_sumsq_ / n - mean_shifted.squaredNorm());
  r.fvu = variance > 0 ? r.mse / variance
                       : (r.mse == 0 ? 0.0 : std::numeric_limits<double>::infinity());
  r.mean_l0 = l0_total_ / n;
  const auto dead = std::count(fired_.begin(), fired_.end(), 0);
  r.dead_feature_fraction = fired_.empty() ? 0.0 : static_cast<double>(dead) / static_cast<double>(fired_.size());
  if (experts_ > 1 || routed_.sum() > 0) {
    const Vectord f = routed_ / n;
    const Vectord P = prob_mass_ / n;
    r.aux_loss = static_cast<double>(experts_) * f.dot(P);
    r.f.assign(f.data(), f.data() + f.size());
  }
  return r;
}

namespace {

void accumulate(const SaeModel& model, const Batchd& x, EvalAccumulator& acc) {
  switch (model.kind) {
    case ArchKind::TopK: {
      const auto fw = topk_sae_forward(model.dense(), x, model.k, model.topk_relu);
      acc.add_reconstruction(x, fw.recon);
      acc.add_sparse_activity(fw.latents, model.width());
      break;
    }
    case ArchKind::ReLU: {
      const auto fw = relu_sae_forward(model.dense(), x);
      acc.add_reconstruction(x, fw.recon);
      acc.add_dense_activity(fw.latents);
      break;
    }
    case ArchKind::Switch: {
      const auto fw = switch_sae_forward(model.switched(), x, model.k, model.topk_relu);
      acc.add_reconstruction(x, fw.recon);
      acc.add_sparse_activity(fw.latents, model.switched().expert_width());
      acc.add_routing(fw.routing);
      break;
    }
  }
}

}  // namespace

EvalReport reconstruction_metrics(const SaeModel& model, const Batchd& data) {
  if (data.rows() == 0) throw std::invalid_argument("reconstruction_metrics: empty data");
  detail::require(data.cols() == model.d(), "reconstruction_metrics: data width does not match d");
  EvalAccumulator acc(model.d(), model.width(), model.kind == ArchKind::Switch ? model.experts() : 0);
  accumulate(model, data, acc);
  return acc.finish();
}

EvalReport reconstruction_metrics(const SaeModel& model, ActivationReader& reader,
                                  Index chunk_rows) {
  detail::require(reader.dim() == model.d(), "reconstruction_metrics: data width does not match d");
  detail::require(chunk_rows >= 1, "reconstruction_metrics: chunk size must be positive");
  EvalAccumulator acc(model.d(), model.width(), model.kind == ArchKind::Switch ? model.experts() : 0);
  while (!reader.done()) accumulate(model, reader.read(chunk_rows), acc);
  return acc.finish();
}

NnCosineStats nn_cosine_stats(const Matrixd& decoder, double threshold) {
  detail::require(decoder.cols() >= 2, "nn_cosine_stats: need at least 2 columns");
  const Matrixd unit = unit_columns(decoder);
  NnCosineStats s;
  s.per_feature = best_match(unit, unit, true);
  s.mean_nn_cosine = s.per_feature.mean();
  s.fraction_above = static_cast<double>((s.per_feature.array() > threshold).count()) /
                     static_cast<double>(s.per_feature.size());
  return s;
}

Matrixd cross_block_similarity(const std::vector<Matrixd>& blocks) {
  detail::require(!blocks.empty(), "cross_block_similarity: no blocks");
  const Index n = static_cast<Index>(blocks.size());
  std::vector<Matrixd> unit;
  for (const auto& b : blocks) {
    detail::require(b.rows() == blocks.front().rows() && b.cols() >= 1,
                    "cross_block_similarity: blocks must share d and be non-empty");
    unit.push_back(unit_columns(b));
  }
  Matrixd out = Matrixd::Identity(n, n);
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b)
      if (a != b) out(a, b) = best_match(unit[static_cast<std::size_t>(a)], unit[static_cast<std::size_t>(b)], false).mean();
  return out;
}

Matrixd cross_expert_similarity(const SwitchSaeParams<double>& params) {
  detail::require(params.num_experts() >= 2, "cross_expert_similarity: need at least 2 experts");
  return cross_block_similarity(decoder_blocks(params));
}

double random_block_baseline(const Matrixd& decoder, Index n, std::uint64_t seed) {
  detail::require(n >= 2, "random_block_baseline: need at least 2 blocks");
  detail::require(decoder.cols() % n == 0,
                  "random_block_baseline: column count " + std::to_string(decoder.cols()) +
                      " not divisible by " + std::to_string(n));
  std::vector<Index> perm(static_cast<std::size_t>(decoder.cols()));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(seed);
  for (std::size_t i = perm.size() - 1; i > 0; --i)
    std::swap(perm[i], perm[static_cast<std::size_t>(rng.below(i + 1))]);

  const Index width = decoder.cols() / n;
  std::vector<Matrixd> blocks;
  for (Index b = 0; b < n; ++b) {
    const std::vector<Index> cols(perm.begin() + b * width, perm.begin() + (b + 1) * width);
    blocks.push_back(decoder(Eigen::all, cols));
  }
  const Matrixd sim = cross_block_similarity(blocks);
  return (sim.sum() - sim.trace()) / static_cast<double>(n * (n - 1));
}

RecoveryReport ground_truth_recovery(const Matrixd& learned, const Matrixd& truth) {
  detail::require(learned.rows() == truth.rows(), "ground_truth_recovery: dimension mismatch");
  detail::require(learned.cols() >= 1 && truth.cols() >= 1, "ground_truth_recovery: empty dictionary");
  RecoveryReport r;
  r.best_cosine = best_match(unit_columns(truth), unit_columns(learned), false);
  r.mmcs = r.best_cosine.mean();
  return r;
}

}  // namespace ssae
