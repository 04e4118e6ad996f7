#include "support.hpp"

#include "switch_sae/numerics.hpp"
#include "switch_sae/rng.hpp"

#include <doctest.h>
#include <json.hpp>

#include <bit>
#include <cmath>
#include <limits>
#include <fstream>
#include <numeric>

using namespace ssae;
using ssae::testing::data_file;

namespace {

Vectord vec(std::initializer_list<double> v) {
  Vectord out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST_CASE("topk_select keeps the largest values, indices ascending") {
  const auto z = topk_select(vec({3, -1, 2, 5}), 2);
  REQUIRE(z.nnz() == 2);
  CHECK(z.dim == 4);
  CHECK(z.entries[0] == SparseEntry<double>{0, 3.0});
  CHECK(z.entries[1] == SparseEntry<double>{3, 5.0});
}

TEST_CASE("topk_select breaks ties toward the lowest index") {
  const auto z = topk_select(vec({1, 1, 0}), 1);
  REQUIRE(z.nnz() == 1);
  CHECK(z.entries[0] == SparseEntry<double>{0, 1.0});

  const auto all_equal = topk_select(vec({2, 2, 2, 2, 2}), 3);
  CHECK(all_equal.entries[0].index == 0);
  CHECK(all_equal.entries[1].index == 1);
  CHECK(all_equal.entries[2].index == 2);
}

TEST_CASE("topk_select with k = n is the identity") {
  const Vectord v = vec({0.5, -2, 7, 0, -0.25});
  const auto z = topk_select(v, v.size());
  REQUIRE(z.nnz() == 5);
  for (Index i = 0; i < v.size(); ++i) {
    CHECK(z.entries[static_cast<std::size_t>(i)].index == i);
    CHECK(z.entries[static_cast<std::size_t>(i)].value == v(i));
  }
  CHECK(z.to_dense() == v);
}

TEST_CASE("topk_select selects by value, not magnitude") {
  const auto z = topk_select(vec({-10, 1, 2}), 1);
  CHECK(z.entries[0].index == 2);
}

TEST_CASE("topk_select rectified variant drops non-positive survivors") {
  CHECK(topk_select(vec({-3, -1, -2}), 2, true).nnz() == 0);
  const auto z = topk_select(vec({4, -1, 0, 2}), 3, true);
  REQUIRE(z.nnz() == 2);
  CHECK(z.entries[0] == SparseEntry<double>{0, 4.0});
  CHECK(z.entries[1] == SparseEntry<double>{3, 2.0});
}

TEST_CASE("topk_select rejects k outside [1, n]") {
  CHECK_THROWS_AS(topk_select(vec({1, 2}), 0), std::invalid_argument);
  CHECK_THROWS_AS(topk_select(vec({1, 2}), 3), std::invalid_argument);
}

TEST_CASE("topk_select beats every other k-subset (brute force, dim <= 8)") {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(8));
    const Index k = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    Vectord v(n);
    for (Index i = 0; i < n; ++i) v(i) = rng.normal();
    const auto z = topk_select(v, k);

    REQUIRE(z.nnz() == k);
    for (std::size_t i = 1; i < z.entries.size(); ++i)
      CHECK(z.entries[i - 1].index < z.entries[i].index);

    double chosen = 0.0;
    for (const auto& e : z.entries) chosen += e.value;
    double best = -std::numeric_limits<double>::infinity();
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      if (std::popcount(mask) != k) continue;
      double s = 0.0;
      for (Index i = 0; i < n; ++i)
        if (mask & (1u << i)) s += v(i);
      best = std::max(best, s);
    }
    CHECK(chosen >= best);
  }
}

TEST_CASE("softmax examples") {
  const Vectord a = softmax(vec({0, 0}));
  CHECK(a(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a(1) == doctest::Approx(0.5).epsilon(1e-15));

  const Vectord b = softmax(vec({std::log(2.0), 0}));
  CHECK(std::abs(b(0) - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(b(1) - 1.0 / 3.0) < 1e-15);

  CHECK_THROWS_AS(softmax(Vectord()), std::invalid_argument);
}

TEST_CASE("softmax is a distribution and shift invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(16));
    Vectord v(n);
    for (Index i = 0; i < n; ++i) v(i) = 20.0 * rng.normal();
    const Vectord p = softmax(v);
    CHECK(std::abs(p.sum() - 1.0) <= 1e-12);
    CHECK(p.minCoeff() >= 0.0);
    CHECK(p.maxCoeff() <= 1.0);

    const double c = 1000.0 * rng.normal();
    const Vectord q = softmax((v.array() + c).matrix());
    CHECK((p - q).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(argmax(p) == argmax(q));
  }
}

TEST_CASE("softmax survives huge logits") {
  const Vectord p = softmax(vec({1000, 0, -1000}));
  CHECK(p.allFinite());
  CHECK(p(0) == 1.0);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  CHECK(argmax(vec({0.25, 0.5, 0.5, 0.1})) == 1);
  CHECK(argmax(vec({1, 1, 1})) == 0);
}

TEST_CASE("geometric median examples") {
  Batchd one(1, 3);
  one << 1.5, -2, 4;
  CHECK((geometric_median(one).transpose() - one.row(0)).norm() == 0.0);

  Batchd line(3, 1);
  line << 0, 1, 10;
  CHECK(std::abs(geometric_median(line)(0) - 1.0) <= 1e-5);

  Batchd tri(3, 2);
  tri << 0, 0, 1, 0, 0.5, std::sqrt(3.0) / 2;
  const Vectord centroid = tri.colwise().mean().transpose();
  CHECK((geometric_median(tri) - centroid).norm() <= 1e-5);
}

TEST_CASE("geometric median objective never increases") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(40));
    const Index d = 1 + static_cast<Index>(rng.below(6));
    Batchd pts = testing::gaussian_batch(rng, n, d);
    if (trial % 5 == 0) pts.row(1) = pts.row(0);  // coincident points
    const auto res = geometric_median_trace(pts);
    REQUIRE(res.objective.size() >= 1);
    for (std::size_t i = 1; i < res.objective.size(); ++i)
      CHECK(res.objective[i] <= res.objective[i - 1] * (1 + 1e-12));
    CHECK(res.iterations <= 100);
    CHECK(res.median.allFinite());
  }
}

TEST_CASE("geometric median handles all-identical points") {
  Batchd pts(4, 2);
  pts.rowwise() = RowMatrix<double>::Constant(1, 2, 3.0).row(0);
  const Vectord m = geometric_median(pts);
  CHECK((m.array() - 3.0).abs().maxCoeff() <= 1e-6);
  CHECK_THROWS_AS(geometric_median(Batchd(0, 2)), std::invalid_argument);
}

TEST_CASE("geometric median beats the mean on skewed data") {
  Batchd pts(5, 1);
  pts << 0, 0, 0, 1, 100;
  const double med = geometric_median(pts)(0);
  CHECK(std::abs(med) <= 1e-5);
}

TEST_CASE("rng matches the reference stream") {
  std::ifstream in(data_file("rng_golden.json"));
  const auto golden = nlohmann::json::parse(in);

  CHECK(splitmix64(1234567 + 0x9E3779B97F4A7C15ULL) == 6457827717110365317ULL);
  CHECK(mix_seed(3, 5) == std::stoull(golden["mix_seed_3_5"].get<std::string>()));

  Rng a(42);
  for (const auto& v : golden["seed42_next"]) CHECK(a.next() == std::stoull(v.get<std::string>()));
  Rng b(7);
  for (const auto& v : golden["seed7_uniform"]) CHECK(b.uniform() == v.get<double>());
  Rng c(7);
  for (const auto& v : golden["seed7_normal"]) CHECK(std::abs(c.normal() - v.get<double>()) <= 1e-15);
}

TEST_CASE("rng reproducibility") {
  Rng a(99), b(99), c(100);
  bool any_diff = false;
  for (int i = 0; i < 10000; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    any_diff |= x != c.next();
  }
  CHECK(any_diff);
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
  CHECK(mix_seed(1, 0) != mix_seed(2, 0));
}

TEST_CASE("rng normal moments") {
  Rng rng(3);
  const int n = 200000;
  double s = 0, s2 = 0, s4 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
    s4 += x * x * x * x;
  }
  // standard errors: mean 1/sqrt(n), second moment sqrt(2/n), fourth sqrt(96/n)
  CHECK(std::abs(s / n) < 5 / std::sqrt(n));
  CHECK(std::abs(s2 / n - 1.0) < 5 * std::sqrt(2.0 / n));
  CHECK(std::abs(s4 / n - 3.0) < 5 * std::sqrt(96.0 / n));
}

TEST_CASE("rng uniform and below") {
  Rng rng(17);
  const int bins = 10, n = 100000;
  std::vector<int> counts(bins, 0);
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    ++counts[static_cast<std::size_t>(rng.below(bins))];
  }
  double chi2 = 0.0;
  const double expected = static_cast<double>(n) / bins;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 27.88);  // chi-square, 9 dof, p = 0.001
  CHECK(rng.below(1) == 0);
  CHECK(rng.below(0) == 0);
}
