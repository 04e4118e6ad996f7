#include "switch_sae/binary_io.hpp"
#include "switch_sae/data.hpp"

#include <array>
#include <cmath>

namespace ssae {

void write_activations(const std::filesystem::path& path, const Batchd& batch) {
  if (batch.cols() < 1) throw FormatError("d: activation width must be at least 1");
  if (!batch.allFinite()) throw FormatError("payload: activations contain non-finite values");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");

  out.write(kActivationMagic, sizeof(kActivationMagic));
  binary::put_le<std::uint32_t>(out, kActivationVersion);
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.cols()));
  binary::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(batch.rows()));
  binary::put_le<std::uint8_t>(out, 0);
  const char reserved[7] = {};
  out.write(reserved, sizeof(reserved));
  for (Index t = 0; t < batch.rows(); ++t)
    for (Index j = 0; j < batch.cols(); ++j) binary::put_f32(out, static_cast<float>(batch(t, j)));
  if (!out) throw IoError("write failed for " + path.string());
}

ActivationReader::ActivationReader(const std::filesystem::path& path) : path_(path) {
  in_.open(path, std::ios::binary);
  if (!in_) throw IoError("cannot open " + path.string());

  std::array<unsigned char, kActivationHeaderBytes> raw{};
  in_.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (in_.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(path.string() + ": header: expected " + std::to_string(raw.size()) +
                      " bytes, found " + std::to_string(in_.gcount()));
  if (std::memcmp(raw.data(), kActivationMagic, sizeof(kActivationMagic)) != 0)
    throw FormatError(path.string() + ": magic: expected \"SAEACT1\\x00\", found \"" +
                      binary::printable(raw.data(), 8) + "\"");
  header_.version = binary::get_le<std::uint32_t>(raw.data() + 8);
  header_.d = binary::get_le<std::uint32_t>(raw.data() + 12);
  header_.count = binary::get_le<std::uint64_t>(raw.data() + 16);
  header_.dtype = raw[24];
  if (header_.version != kActivationVersion)
    throw FormatError(path.string() + ": version: unsupported version " +
                      std::to_string(header_.version));
  if (header_.dtype != 0)
    throw FormatError(path.string() + ": dtype: unsupported dtype code " +
                      std::to_string(header_.dtype) + " (only 0 = float32)");
  if (header_.d == 0) throw FormatError(path.string() + ": d: must be at least 1");

  const std::uintmax_t actual = std::filesystem::file_size(path) - kActivationHeaderBytes;
  const std::uintmax_t expected = static_cast<std::uintmax_t>(header_.count) * header_.d * 4;
  if (actual != expected)
    throw FormatError(path.string() + ": payload: expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(actual) +
                      (actual < expected ? " (truncated)" : " (trailing data)"));
}

Batchd ActivationReader::read(Index max_rows) {
  const std::uint64_t rows =
      std::min<std::uint64_t>(static_cast<std::uint64_t>(std::max<Index>(max_rows, 0)),
                              header_.count - position_);
  const Index d = dim();
  Batchd out(static_cast<Index>(rows), d);
  if (rows == 0) return out;
  const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(d);
  std::vector<unsigned char> raw(n * 4);
  in_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in_.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(path_.string() + ": payload: short read at row " + std::to_string(position_));
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = binary::get_f32(raw.data() + 4 * i);
  position_ += rows;
  return out;
}

void ActivationReader::rewind() {
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(kActivationHeaderBytes));
  position_ = 0;
}

Batchd read_activations(const std::filesystem::path& path) {
  ActivationReader reader(path);
  return reader.read(static_cast<Index>(reader.count()));
}

}  // namespace ssae
