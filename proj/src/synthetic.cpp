#include "switch_sae/data.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ssae {

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("SyntheticSpec: " + what); };
  if (d < 1) fail("d must be at least 1");
  if (num_true_features < 1) fail("num_true_features must be at least 1");
  if (active_per_sample < 1 || active_per_sample > num_true_features)
    fail("active_per_sample must lie in [1, num_true_features]");
  if (num_clusters < 1 || num_clusters > num_true_features)
    fail("num_clusters must lie in [1, num_true_features]");
  if (!(coeff_low <= coeff_high)) fail("coeff_low must not exceed coeff_high");
  if (!(noise_sigma >= 0)) fail("noise_sigma must be non-negative");
  if (!std::isfinite(feature_frequency_exponent)) fail("feature_frequency_exponent must be finite");
  if (cluster_exclusive) {
    const Index smallest = num_true_features / num_clusters;
    if (active_per_sample > smallest)
      fail("active_per_sample " + std::to_string(active_per_sample) +
           " exceeds the smallest cluster size " + std::to_string(smallest));
  }
}

SyntheticGenerator::SyntheticGenerator(const SyntheticSpec& spec) : spec_(spec) {
  spec_.validate();
  const Index F = spec_.num_true_features;
  const Index C = spec_.num_clusters;

  Rng rng(mix_seed(spec_.seed, 0));
  truth_.features.resize(spec_.d, F);
  for (Index j = 0; j < F; ++j) {
    for (Index i = 0; i < spec_.d; ++i) truth_.features(i, j) = rng.normal();
    truth_.features.col(j).normalize();
  }
  truth_.cluster.resize(static_cast<std::size_t>(F));
  for (Index j = 0; j < F; ++j) truth_.cluster[static_cast<std::size_t>(j)] = (j * C) / F;

  if (spec_.cluster_exclusive) {
    members_.resize(static_cast<std::size_t>(C));
    for (Index j = 0; j < F; ++j)
      members_[static_cast<std::size_t>(truth_.cluster[static_cast<std::size_t>(j)])].push_back(j);
  } else {
    members_.resize(1);
    for (Index j = 0; j < F; ++j) members_[0].push_back(j);
  }
  for (const auto& m : members_) {
    std::vector<double> w(m.size());
    std::vector<double> cdf(m.size());
    double acc = 0.0;
    for (std::size_t r = 0; r < m.size(); ++r) {
      w[r] = std::pow(static_cast<double>(r + 1), -spec_.feature_frequency_exponent);
      acc += w[r];
      cdf[r] = acc;
    }
    weights_.push_back(std::move(w));
    cdf_.push_back(std::move(cdf));
  }
}

Batchd SyntheticGenerator::sample(Index count, Rng& rng,
                                  std::vector<std::vector<Index>>* active) const {
  const Index s = spec_.active_per_sample;
  Batchd x = Batchd::Zero(count, spec_.d);
  std::vector<std::size_t> picked;
  std::vector<Index> features;
  for (Index t = 0; t < count; ++t) {
    const auto cluster = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(spec_.num_clusters)));
    const std::size_t set = spec_.cluster_exclusive ? cluster : 0;
    const auto& cdf = cdf_[set];
    const auto& weights = weights_[set];

    // Successive weighted draws, rejecting repeats. Falls back to an
    // explicit renormalized scan if rejections pile up.
    picked.clear();
    int rejections = 0;
    while (static_cast<Index>(picked.size()) < s) {
      std::size_t r;
      if (rejections < 64 * s) {
        const double u = rng.uniform() * cdf.back();
        r = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        r = std::min(r, cdf.size() - 1);
        if (std::find(picked.begin(), picked.end(), r) != picked.end()) {
          ++rejections;
          continue;
        }
      } else {
        double remaining = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i)
          if (std::find(picked.begin(), picked.end(), i) == picked.end()) remaining += weights[i];
        double u = rng.uniform() * remaining;
        r = weights.size();
        for (std::size_t i = 0; i < weights.size(); ++i) {
          if (std::find(picked.begin(), picked.end(), i) != picked.end()) continue;
          r = i;
          if (u < weights[i]) break;
          u -= weights[i];
        }
      }
      picked.push_back(r);
    }

    features.clear();
    for (std::size_t r : picked) features.push_back(members_[set][r]);
    std::sort(features.begin(), features.end());
    for (Index j : features) {
      const double c = rng.uniform(spec_.coeff_low, spec_.coeff_high);
      x.row(t) += c * truth_.features.col(j).transpose();
    }
    if (spec_.noise_sigma > 0)
      for (Index i = 0; i < spec_.d; ++i) x(t, i) += spec_.noise_sigma * rng.normal();
    if (active) active->push_back(features);
  }
  return x;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec, Index count, std::uint64_t stream) {
  SyntheticGenerator gen(spec);
  Rng rng(mix_seed(spec.seed, 1 + stream));
  SyntheticData out;
  out.x = gen.sample(count, rng, &out.active);
  out.truth = gen.truth();
  return out;
}

SyntheticSource::SyntheticSource(const SyntheticSpec& spec, Index batch_size,
                                 std::uint64_t stream_seed)
    : generator_(spec), batch_size_(batch_size), rng_(stream_seed) {
  if (batch_size_ < 1) throw std::invalid_argument("SyntheticSource: batch size must be at least 1");
}

}  // namespace ssae
