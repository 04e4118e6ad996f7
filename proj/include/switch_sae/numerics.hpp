#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssae {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// T x d activation batch, one sample per row.
template <typename Scalar>
using Batch = RowMatrix<Scalar>;

using Matrixd = Matrix<double>;
using Vectord = Vector<double>;
using Batchd = Batch<double>;

template <typename Scalar>
struct SparseEntry {
  Index index;
  Scalar value;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

/// Sparse vector of dimension `dim`; entries sorted by strictly increasing index.
template <typename Scalar>
struct SparseVector {
  Index dim = 0;
  std::vector<SparseEntry<Scalar>> entries;

  Index nnz() const { return static_cast<Index>(entries.size()); }

  Vector<Scalar> to_dense() const {
    Vector<Scalar> out = Vector<Scalar>::Zero(dim);
    for (const auto& e : entries) out(e.index) = e.value;
    return out;
  }
};

/// Keeps the k largest entries of v by value (ties to the lowest index).
/// Values are copied unmodified. With `rectify`, selected entries that are
/// not strictly positive are dropped afterwards, so fewer than k may remain.
template <typename Derived>
SparseVector<typename Derived::Scalar> topk_select(const Eigen::MatrixBase<Derived>& v, Index k,
                                                   bool rectify = false) {
  using Scalar = typename Derived::Scalar;
  const Index n = v.size();
  if (k < 1 || k > n) {
    throw std::invalid_argument("topk_select: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(n) + "]");
  }
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const auto before = [&v](Index a, Index b) {
    return v(a) > v(b) || (v(a) == v(b) && a < b);
  };
  if (k < n) std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), before);
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());

  SparseVector<Scalar> out;
  out.dim = n;
  out.entries.reserve(order.size());
  for (Index i : order) {
    if (rectify && !(v(i) > Scalar(0))) continue;
    out.entries.push_back({i, v(i)});
  }
  return out;
}

/// Numerically stable softmax (max subtracted before exponentiation).
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw std::invalid_argument("softmax: empty vector");
  const Scalar shift = v.maxCoeff();
  Vector<Scalar> e = (v.array() - shift).exp().matrix();
  e /= e.sum();
  return e;
}

/// Index of the largest entry; ties go to the lowest index.
template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

struct GeometricMedianOptions {
  double tol = 1e-6;
  int max_iter = 100;
};

template <typename Scalar>
struct GeometricMedianResult {
  Vector<Scalar> median;
  int iterations = 0;
  /// Sum of distances at the initial point and after every update.
  std::vector<Scalar> objective;
};

template <typename Scalar, typename Derived>
Scalar sum_of_distances(const Eigen::MatrixBase<Derived>& points, const Vector<Scalar>& x) {
  return (points.rowwise() - x.transpose()).rowwise().norm().sum();
}

/// Weiszfeld iteration over the rows of `points`, started at the
/// coordinate-wise mean. An iterate within 1e-12 of a data point is nudged
/// by tol along (1, ..., 1)/sqrt(d) before the update; convergence is
/// measured from the un-nudged iterate.
template <typename Derived>
GeometricMedianResult<typename Derived::Scalar> geometric_median_trace(
    const Eigen::MatrixBase<Derived>& points, GeometricMedianOptions opts = {}) {
  using Scalar = typename Derived::Scalar;
  if (points.rows() == 0) throw std::invalid_argument("geometric_median: empty point set");
  if (!(opts.tol > 0)) throw std::invalid_argument("geometric_median: tol must be positive");
  const Index d = points.cols();

  GeometricMedianResult<Scalar> result;
  Vector<Scalar> x = points.colwise().mean().transpose();
  result.objective.push_back(sum_of_distances<Scalar>(points, x));
  const Vector<Scalar> nudge =
      Vector<Scalar>::Constant(d, Scalar(opts.tol) / std::sqrt(Scalar(d)));

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Vector<Scalar> dist = (points.rowwise() - x.transpose()).rowwise().norm();
    Vector<Scalar> probe = x;
    if (dist.minCoeff() < Scalar(1e-12)) {
      probe += nudge;
      dist = (points.rowwise() - probe.transpose()).rowwise().norm();
    }
    const Vector<Scalar> w = dist.cwiseInverse();
    const Vector<Scalar> next = (points.transpose() * w) / w.sum();
    const Scalar moved = (next - x).norm();
    x = next;
    result.iterations = iter + 1;
    result.objective.push_back(sum_of_distances<Scalar>(points, x));
    if (moved < Scalar(opts.tol)) break;
  }
  result.median = std::move(x);
  return result;
}

template <typename Derived>
Vector<typename Derived::Scalar> geometric_median(const Eigen::MatrixBase<Derived>& points,
                                                  GeometricMedianOptions opts = {}) {
  return geometric_median_trace(points, opts).median;
}

}  // namespace ssae
