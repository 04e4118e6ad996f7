#include "support.hpp"

#include "switch_sae/data.hpp"

#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <map>
#include <set>

using namespace ssae;
using namespace ssae::testing;

namespace {

Batchd round_to_float(const Batchd& x) { return x.cast<float>().cast<double>(); }

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

std::vector<double> row_key(const Batchd& x, Index t) {
  return {x.row(t).data(), x.row(t).data() + x.cols()};
}

}  // namespace

TEST_CASE("activation file round trip is bit-exact at 32-bit precision") {
  TempDir dir("act");
  Rng rng(1);
  const Batchd x = gaussian_batch(rng, 37, 5, 3.0);
  write_activations(dir / "a.bin", x);
  const Batchd back = read_activations(dir / "a.bin");
  CHECK(back == round_to_float(x));
  CHECK(std::filesystem::file_size(dir / "a.bin") == 32 + 37 * 5 * 4);

  ActivationReader reader(dir / "a.bin");
  CHECK(reader.dim() == 5);
  CHECK(reader.count() == 37);
  Batchd streamed(0, 5);
  while (!reader.done()) {
    const Batchd part = reader.read(10);
    Batchd grown(streamed.rows() + part.rows(), 5);
    grown << streamed, part;
    streamed = grown;
  }
  CHECK(streamed == back);
  CHECK(reader.read(10).rows() == 0);
  reader.rewind();
  CHECK(reader.position() == 0);
  CHECK(reader.read(3) == back.topRows(3));
}

TEST_CASE("golden activation file decodes bit-exactly") {
  std::ifstream in(data_file("golden_models.json"));
  const auto golden = nlohmann::json::parse(in)["activations"];
  const Batchd x = read_activations(data_file("golden_activations.bin"));
  REQUIRE(x.rows() == 2);
  REQUIRE(x.cols() == 3);
  for (Index t = 0; t < 2; ++t)
    for (Index j = 0; j < 3; ++j) CHECK(x(t, j) == golden[t][j].get<double>());
  CHECK(std::signbit(x(1, 2)));

  TempDir dir("golden");
  write_activations(dir / "g.bin", x);
  CHECK(read_bytes(dir / "g.bin") == read_bytes(data_file("golden_activations.bin")));
}

TEST_CASE("activation reader rejects corrupt files") {
  TempDir dir("corrupt");
  Rng rng(2);
  write_activations(dir / "ok.bin", gaussian_batch(rng, 4, 3));
  const std::string good = read_bytes(dir / "ok.bin");
  auto write = [&](const std::string& name, const std::string& bytes) {
    std::ofstream(dir / name, std::ios::binary) << bytes;
    return dir / name;
  };

  SUBCASE("truncated mid-row") {
    const auto p = write("trunc.bin", good.substr(0, good.size() - 6));
    const std::string msg = error_of([&] { ActivationReader r(p); });
    CHECK(msg.find("expected 48 bytes") != std::string::npos);
    CHECK(msg.find("found 42") != std::string::npos);
    CHECK_THROWS_AS(ActivationReader{p}, FormatError);
  }
  SUBCASE("bad magic") {
    std::string bad = good;
    bad.replace(0, 4, "XXXX");
    const auto p = write("magic.bin", bad);
    CHECK_THROWS_AS(ActivationReader{p}, FormatError);
    CHECK(error_of([&] { ActivationReader r(p); }).find("magic") != std::string::npos);
  }
  SUBCASE("bad version") {
    std::string bad = good;
    bad[8] = 2;
    CHECK(error_of([&] { ActivationReader r(write("v.bin", bad)); }).find("version") != std::string::npos);
  }
  SUBCASE("bad dtype") {
    std::string bad = good;
    bad[24] = 1;
    CHECK(error_of([&] { ActivationReader r(write("t.bin", bad)); }).find("dtype") != std::string::npos);
  }
  SUBCASE("short header") {
    CHECK_THROWS_AS(ActivationReader{write("h.bin", good.substr(0, 20))}, FormatError);
  }
  SUBCASE("trailing bytes") {
    CHECK_THROWS_AS(ActivationReader{write("tail.bin", good + "xx")}, FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(ActivationReader{dir / "nope.bin"}, IoError);
  }
  SUBCASE("non-finite values are not written") {
    Batchd x = Batchd::Zero(2, 2);
    x(1, 1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(write_activations(dir / "inf.bin", x), FormatError);
  }
}

TEST_CASE("batch iterator") {
  TempDir dir("iter");
  Rng rng(3);
  const Index n = 1000;
  const Batchd x = round_to_float(gaussian_batch(rng, n, 4));
  write_activations(dir / "x.bin", x);
  auto open = [&] { return std::make_unique<ActivationReader>(dir / "x.bin"); };

  SUBCASE("buffer of one keeps file order and wraps epochs") {
    BatchIterator it(open(), 64, 1, 7);
    for (Index b = 0; b < 15; ++b) {
      CHECK(it.next_batch() == x.middleRows(b * 64, 64));
      CHECK(it.epoch() == 0);
    }
    CHECK(it.next_batch() == x.topRows(64));  // tail of 40 rows dropped
    CHECK(it.epoch() == 1);
  }
  SUBCASE("same seed, same sequence; different seed, different sequence") {
    BatchIterator a(open(), 32, 256, 11), b(open(), 32, 256, 11), c(open(), 32, 256, 12);
    bool differs = false;
    for (int i = 0; i < 70; ++i) {
      const Batchd ba = a.next_batch();
      CHECK(ba == b.next_batch());
      differs |= ba != c.next_batch();
    }
    CHECK(differs);
  }
  SUBCASE("one epoch with a full-file buffer yields a sub-multiset of the file") {
    std::map<std::vector<double>, int> file_rows;
    for (Index t = 0; t < n; ++t) ++file_rows[row_key(x, t)];
    BatchIterator it(open(), 64, 2000, 5);
    std::map<std::vector<double>, int> seen;
    for (int b = 0; b < 15; ++b) {
      const Batchd batch = it.next_batch();
      for (Index t = 0; t < batch.rows(); ++t) ++seen[row_key(batch, t)];
    }
    int total = 0;
    for (const auto& [row, count] : seen) {
      CHECK(count <= file_rows[row]);
      total += count;
    }
    CHECK(total == 960);
    CHECK(it.epoch() == 0);
  }
  SUBCASE("partial shuffle buffer still covers each row at most once per epoch") {
    BatchIterator it(open(), 50, 100, 9);
    std::set<std::vector<double>> seen;
    for (int b = 0; b < 20; ++b) {
      const Batchd batch = it.next_batch();
      for (Index t = 0; t < batch.rows(); ++t) CHECK(seen.insert(row_key(batch, t)).second);
    }
    CHECK(seen.size() == 1000);
  }
  SUBCASE("batch larger than the file is rejected") {
    CHECK_THROWS_AS(BatchIterator(open(), 1001, 10, 1), std::invalid_argument);
  }
}

TEST_CASE("in-memory source cycles in order") {
  Batchd x(5, 1);
  x << 0, 1, 2, 3, 4;
  InMemorySource src(x, 2);
  CHECK(src.next_batch() == x.topRows(2));
  CHECK(src.next_batch() == x.middleRows(2, 2));
  const Batchd third = src.next_batch();
  CHECK(third.rows() == 2);
}

TEST_CASE("single-feature samples are dictionary columns") {
  SyntheticSpec spec;
  spec.d = 16;
  spec.num_true_features = 32;
  spec.active_per_sample = 1;
  spec.coeff_low = spec.coeff_high = 1.0;
  spec.noise_sigma = 0.0;
  const auto data = generate_synthetic(spec, 200);
  for (Index t = 0; t < 200; ++t) {
    const Index j = data.active[static_cast<std::size_t>(t)].at(0);
    CHECK((data.x.row(t).transpose() - data.truth.features.col(j)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("cluster-exclusive samples never mix clusters") {
  SyntheticSpec spec;
  spec.d = 16;
  spec.num_true_features = 64;
  spec.active_per_sample = 4;
  spec.num_clusters = 2;
  spec.cluster_exclusive = true;
  const auto data = generate_synthetic(spec, 2000);
  Matrixd co = Matrixd::Zero(2, 2);
  for (const auto& set : data.active)
    for (Index a : set)
      for (Index b : set) co(data.truth.cluster[static_cast<std::size_t>(a)], data.truth.cluster[static_cast<std::size_t>(b)]) += 1;
  CHECK(co(0, 1) == 0.0);
  CHECK(co(1, 0) == 0.0);
  CHECK(co(0, 0) > 0.0);
  CHECK(co(1, 1) > 0.0);
  for (Index j = 0; j < 64; ++j) CHECK(data.truth.cluster[static_cast<std::size_t>(j)] == j * 2 / 64);
  for (const auto& set : data.active) {
    CHECK(set.size() == 4);
    CHECK(std::set<Index>(set.begin(), set.end()).size() == 4);
  }
}

TEST_CASE("second moment matches s E[c^2] + d sigma^2") {
  SyntheticSpec spec;
  spec.d = 64;
  spec.num_true_features = 256;
  spec.active_per_sample = 8;
  spec.noise_sigma = 0.1;
  spec.seed = 4;
  const auto data = generate_synthetic(spec, 100000);
  const double a = spec.coeff_low, b = spec.coeff_high;
  const double ec2 = (a * a + a * b + b * b) / 3.0;
  const double expected = 8 * ec2 + 64 * 0.01;
  const double measured = data.x.rowwise().squaredNorm().mean();
  CHECK(std::abs(measured - expected) / expected < 0.05);
}

TEST_CASE("feature selection is uniform with exponent 0") {
  SyntheticSpec spec;
  spec.d = 8;
  spec.num_true_features = 50;
  spec.active_per_sample = 1;
  const auto data = generate_synthetic(spec, 100000);
  std::vector<double> counts(50, 0.0);
  for (const auto& set : data.active) counts[static_cast<std::size_t>(set[0])] += 1;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - 2000.0) * (c - 2000.0) / 2000.0;
  CHECK(chi2 < 85.35);  // 49 dof, p = 0.001
}

TEST_CASE("Zipf exponent skews selection toward low ranks") {
  SyntheticSpec spec;
  spec.d = 8;
  spec.num_true_features = 20;
  spec.active_per_sample = 1;
  spec.feature_frequency_exponent = 1.0;
  const auto data = generate_synthetic(spec, 50000);
  std::vector<double> counts(20, 0.0);
  for (const auto& set : data.active) counts[static_cast<std::size_t>(set[0])] += 1;
  double h20 = 0.0;
  for (int r = 1; r <= 20; ++r) h20 += 1.0 / r;
  CHECK(std::abs(counts[0] / 50000.0 - 1.0 / h20) < 0.01);
  CHECK(std::abs(counts[1] / 50000.0 - 0.5 / h20) < 0.01);
  CHECK(counts[0] > counts[19] * 10);
}

TEST_CASE("generator determinism, streams and validity") {
  SyntheticSpec spec;
  spec.seed = 9;
  spec.noise_sigma = 0.05;
  const auto a = generate_synthetic(spec, 300);
  const auto b = generate_synthetic(spec, 300);
  const auto c = generate_synthetic(spec, 300, 1);
  CHECK(a.x == b.x);
  CHECK(a.truth.features == c.truth.features);
  CHECK(a.x != c.x);
  CHECK(a.x.allFinite());
  for (Index j = 0; j < a.truth.features.cols(); ++j)
    CHECK(std::abs(a.truth.features.col(j).norm() - 1.0) <= 1e-9);

  SyntheticSource src(spec, 16, 3);
  CHECK(src.next_batch().rows() == 16);
  CHECK(src.dim() == spec.d);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec spec;
  spec.num_clusters = 8;
  spec.cluster_exclusive = true;
  spec.active_per_sample = 33;  // clusters hold 32 features
  CHECK_THROWS_AS(generate_synthetic(spec, 1), std::invalid_argument);
  spec = {};
  spec.active_per_sample = 300;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = {};
  spec.coeff_low = 2.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = {};
  spec.noise_sigma = -1.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = {};
  spec.num_clusters = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}
