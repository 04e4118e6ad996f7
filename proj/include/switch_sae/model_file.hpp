#pragma once

#include "switch_sae/train.hpp"

#include <filesystem>

namespace ssae {

// Model files, little-endian throughout. 29-byte header:
//
//   offset  size  field
//        0     8  magic "SAEMDL1\0"
//        8     4  version (u32, currently 1)
//       12     1  arch (u8: 0 = topk, 1 = relu, 2 = switch)
//       13     4  d (u32)
//       17     4  M, total features (u32)
//       21     4  N, experts (u32, 1 for dense)
//       25     4  k (u32, 0 for relu)
//
// followed by float32 parameter blocks, each matrix row-major, in the
// for_each_block order:
//   dense:  w_enc (M x d), w_dec (d x M), b_pre (d)
//   switch: for each expert ascending: w_enc (M/N x d), w_dec (d x M/N);
//           then w_router (N x d), b_router (d), b_pre (d)

inline constexpr char kModelMagic[8] = {'S', 'A', 'E', 'M', 'D', 'L', '1', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::size_t kModelHeaderBytes = 29;

/// Decoder columns must be unit norm within this tolerance on load.
inline constexpr double kLoadNormTolerance = 1e-4;

void save_model(const std::filesystem::path& path, const SaeModel& model);
SaeModel load_model(const std::filesystem::path& path);

}  // namespace ssae
