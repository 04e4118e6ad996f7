#pragma once

#include "switch_sae/data.hpp"
#include "switch_sae/train.hpp"

#include <optional>
#include <vector>

namespace ssae {

struct EvalReport {
  Index samples = 0;
  double mse = 0.0;
  double fvu = 0.0;  // mse / mean ||x - mean(x)||^2
  double mean_l0 = 0.0;
  double dead_feature_fraction = 0.0;
  double aux_loss = 0.0;
  std::vector<double> f;  // empty for dense SAEs
};

/// Streaming accumulator behind reconstruction_metrics. Batches are folded
/// in order; finish() may be called at any point.
class EvalAccumulator {
 public:
  EvalAccumulator(Index d, Index width, Index experts);

  void add_reconstruction(const Batchd& x, const Batchd& recon);
  void add_sparse_activity(const SparseLatents<double>& latents, Index expert_width);
  void add_dense_activity(const Batchd& latents);
  void add_routing(const RoutingRecord<double>& routing);

  EvalReport finish() const;

 private:
  Index d_;
  Index experts_;
  Index samples_ = 0;
  double squared_error_ = 0.0;
  std::optional<Vectord> shift_;
  Vectord shifted_sum_;
  double shifted_sumsq_ = 0.0;
  double l0_total_ = 0.0;
  std::vector<char> fired_;
  Vectord routed_;
  Vectord prob_mass_;
};

/// MSE, FVU, mean L0, dead features (inactive over all of `data`) and, for
/// Switch SAEs, f, P and the aux loss over the whole set.
EvalReport reconstruction_metrics(const SaeModel& model, const Batchd& data);

/// Same, streamed from a reader in chunks of `chunk_rows`.
EvalReport reconstruction_metrics(const SaeModel& model, ActivationReader& reader,
                                  Index chunk_rows = 4096);

struct NnCosineStats {
  double fraction_above = 0.0;
  double mean_nn_cosine = 0.0;
  Vectord per_feature;
};

/// Nearest-neighbour cosine similarity among decoder columns (self
/// excluded). Columns are renormalized first; cosines are clamped to [-1, 1].
NnCosineStats nn_cosine_stats(const Matrixd& decoder, double threshold);

/// Entry (A, B), A != B: mean over columns of block A of the best cosine
/// with any column of block B. Asymmetric; the diagonal is 1.
Matrixd cross_block_similarity(const std::vector<Matrixd>& blocks);

Matrixd cross_expert_similarity(const SwitchSaeParams<double>& params);

/// Mean off-diagonal cross_block_similarity after shuffling the columns of
/// a dense decoder into n equal blocks.
double random_block_baseline(const Matrixd& decoder, Index n, std::uint64_t seed);

struct RecoveryReport {
  double mmcs = 0.0;
  Vectord best_cosine;  // per ground-truth feature
};

/// For each ground-truth column, the largest signed cosine with a learned
/// column. Sign flips are not forgiven.
RecoveryReport ground_truth_recovery(const Matrixd& learned, const Matrixd& truth);

struct GeometryReport {
  double threshold = 0.9;
  NnCosineStats nn;
  std::optional<Matrixd> cross_expert;
  std::optional<double> random_block_baseline;
};

/// Columns rescaled to unit norm; zero columns stay zero.
Matrixd unit_columns(const Matrixd& m);

}  // namespace ssae
