#pragma once

#include "switch_sae/errors.hpp"
#include "switch_sae/numerics.hpp"
#include "switch_sae/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <vector>

namespace ssae {

// ---------------------------------------------------------------------------
// Activation files
//
// Little-endian, 32-byte header followed by count * d float32 values,
// row-major (one activation vector per row):
//
//   offset  size  field
//        0     8  magic "SAEACT1\0"
//        8     4  version (u32, currently 1)
//       12     4  d (u32, >= 1)
//       16     8  count (u64)
//       24     1  dtype (u8, 0 = float32)
//       25     7  reserved, zero
// ---------------------------------------------------------------------------

inline constexpr char kActivationMagic[8] = {'S', 'A', 'E', 'A', 'C', 'T', '1', '\0'};
inline constexpr std::uint32_t kActivationVersion = 1;
inline constexpr std::size_t kActivationHeaderBytes = 32;

struct ActivationHeader {
  std::uint32_t version = kActivationVersion;
  std::uint32_t d = 0;
  std::uint64_t count = 0;
  std::uint8_t dtype = 0;
};

/// Writes `batch` rounded to float32. Throws FormatError on non-finite
/// values and IoError on I/O failure.
void write_activations(const std::filesystem::path& path, const Batchd& batch);

/// Streaming reader; only the header is read on open.
class ActivationReader {
 public:
  explicit ActivationReader(const std::filesystem::path& path);

  const ActivationHeader& header() const { return header_; }
  Index dim() const { return static_cast<Index>(header_.d); }
  std::uint64_t count() const { return header_.count; }
  std::uint64_t position() const { return position_; }
  bool done() const { return position_ >= header_.count; }

  /// Reads up to `max_rows` further rows (fewer at end of file).
  Batchd read(Index max_rows);
  void rewind();

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  ActivationHeader header_;
  std::uint64_t position_ = 0;
};

/// Whole file in memory; convenient for small held-out sets.
Batchd read_activations(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Batch sources
// ---------------------------------------------------------------------------

/// Endless supply of fixed-size batches.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Index dim() const = 0;
  virtual Index batch_size() const = 0;
  virtual Batchd next_batch() = 0;
};

/// Batches of exactly T rows from an activation file, shuffled through a
/// fixed-size buffer: the buffer is filled from the stream, and each
/// emitted row is drawn uniformly from it and replaced by the next streamed
/// row. At end of file the buffer drains; rows that cannot fill a whole
/// batch are dropped and the next epoch starts from a rewound stream.
/// A buffer of one row preserves file order.
class BatchIterator : public BatchSource {
 public:
  BatchIterator(std::unique_ptr<ActivationReader> reader, Index batch_size, Index shuffle_buffer,
                std::uint64_t seed);

  Index dim() const override { return reader_->dim(); }
  Index batch_size() const override { return batch_size_; }
  Batchd next_batch() override;

  /// Epoch of the most recently returned batch (0-based).
  std::uint64_t epoch() const { return epoch_; }

 private:
  bool next_row(Vectord& row);
  void start_epoch();

  std::unique_ptr<ActivationReader> reader_;
  Index batch_size_;
  Index shuffle_buffer_;
  Rng rng_;
  std::vector<Vectord> buffer_;
  Batchd staged_;
  Index staged_pos_ = 0;
  std::uint64_t epoch_ = 0;
  std::uint64_t emitted_in_epoch_ = 0;
  bool started_ = false;
};

/// Batches served round-robin from an in-memory matrix, in order.
class InMemorySource : public BatchSource {
 public:
  InMemorySource(Batchd data, Index batch_size);
  Index dim() const override { return data_.cols(); }
  Index batch_size() const override { return batch_size_; }
  Batchd next_batch() override;

 private:
  Batchd data_;
  Index batch_size_;
  Index cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic superposition data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  Index d = 64;
  Index num_true_features = 256;
  Index active_per_sample = 8;
  Index num_clusters = 1;
  bool cluster_exclusive = false;
  double coeff_low = 0.5;
  double coeff_high = 1.5;
  double noise_sigma = 0.0;
  double feature_frequency_exponent = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Unit-norm ground-truth features (columns) and their cluster labels.
/// Feature j belongs to cluster (j * C) / num_true_features.
struct GroundTruthDictionary {
  Matrixd features;  // d x num_true_features
  std::vector<Index> cluster;
};

struct SyntheticData {
  Batchd x;
  GroundTruthDictionary truth;
  std::vector<std::vector<Index>> active;
};

/// Draws samples x = sum_j c_j f_j + sigma * noise. Each sample picks a
/// cluster uniformly, then s distinct features without replacement from
/// that cluster (exclusive mode) or from all features, with weights
/// proportional to (rank + 1)^-exponent where rank is the feature's
/// position within the candidate set. Coefficients are uniform in
/// [coeff_low, coeff_high].
class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(const SyntheticSpec& spec);

  const SyntheticSpec& spec() const { return spec_; }
  const GroundTruthDictionary& truth() const { return truth_; }

  /// Appends active sets to `active` when non-null.
  Batchd sample(Index count, Rng& rng, std::vector<std::vector<Index>>* active = nullptr) const;

 private:
  SyntheticSpec spec_;
  GroundTruthDictionary truth_;
  std::vector<std::vector<Index>> members_;  // candidate features per cluster
  std::vector<std::vector<double>> weights_;
  std::vector<std::vector<double>> cdf_;
};

/// Dictionary from Rng(mix_seed(seed, 0)), samples from
/// Rng(mix_seed(seed, 1 + stream)). Different streams share the dictionary,
/// so stream 1 serves as held-out data for stream 0.
SyntheticData generate_synthetic(const SyntheticSpec& spec, Index count, std::uint64_t stream = 0);

/// Fresh synthetic samples per batch; never repeats.
class SyntheticSource : public BatchSource {
 public:
  SyntheticSource(const SyntheticSpec& spec, Index batch_size, std::uint64_t stream_seed);

  Index dim() const override { return generator_.spec().d; }
  Index batch_size() const override { return batch_size_; }
  Batchd next_batch() override { return generator_.sample(batch_size_, rng_); }
  const SyntheticGenerator& generator() const { return generator_; }

 private:
  SyntheticGenerator generator_;
  Index batch_size_;
  Rng rng_;
};

}  // namespace ssae
