#pragma once

#include "switch_sae/data.hpp"
#include "switch_sae/model.hpp"
#include "switch_sae/rng.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

namespace ssae::testing {

inline Matrixd gaussian(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrixd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  return m;
}

inline Batchd gaussian_batch(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  return gaussian(rng, rows, cols, scale);
}

inline Matrixd unit_columns(Rng& rng, Index rows, Index cols) {
  Matrixd m = gaussian(rng, rows, cols);
  m.colwise().normalize();
  return m;
}

inline DenseSaeParams<double> random_dense(Rng& rng, Index d, Index m) {
  DenseSaeParams<double> p;
  p.w_dec = unit_columns(rng, d, m);
  p.w_enc = gaussian(rng, m, d, 0.5);
  p.b_pre = gaussian(rng, d, 1, 0.1);
  return p;
}

inline SwitchSaeParams<double> random_switch(Rng& rng, Index d, Index n, Index m) {
  auto p = SwitchSaeParams<double>::zeros(d, n, m);
  for (auto& e : p.experts) {
    e.w_dec = unit_columns(rng, d, m);
    e.w_enc = gaussian(rng, m, d, 0.5);
  }
  p.w_router = gaussian(rng, n, d);
  p.b_router = gaussian(rng, d, 1, 0.1);
  p.b_pre = gaussian(rng, d, 1, 0.1);
  return p;
}

inline std::filesystem::path data_file(const std::string& name) {
  return std::filesystem::path(SSAE_TEST_DATA_DIR) / name;
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("ssae_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace ssae::testing
