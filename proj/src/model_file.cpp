#include "switch_sae/model_file.hpp"

#include "switch_sae/binary_io.hpp"

#include <array>
#include <fstream>

namespace ssae {
namespace {

template <typename Block>
void write_block(std::ostream& out, const Block& block) {
  for (Index i = 0; i < block.rows(); ++i)
    for (Index j = 0; j < block.cols(); ++j) binary::put_f32(out, static_cast<float>(block(i, j)));
}

}  // namespace

void save_model(const std::filesystem::path& path, const SaeModel& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kModelMagic, sizeof(kModelMagic));
  binary::put_le<std::uint32_t>(out, kModelVersion);
  binary::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(model.kind));
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.d()));
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.width()));
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.experts()));
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.kind == ArchKind::ReLU ? 0 : model.k));
  std::visit(
      [&](const auto& p) {
        for_each_block([&](const std::string&, const auto& block) { write_block(out, block); }, p);
      },
      model.params);
  if (!out) throw IoError("write failed for " + path.string());
}

SaeModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string where = path.string() + ": ";

  std::array<unsigned char, kModelHeaderBytes> raw{};
  in.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(where + "header: expected " + std::to_string(raw.size()) + " bytes, found " +
                      std::to_string(in.gcount()));
  if (std::memcmp(raw.data(), kModelMagic, sizeof(kModelMagic)) != 0)
    throw FormatError(where + "magic: expected \"SAEMDL1\\x00\", found \"" +
                      binary::printable(raw.data(), 8) + "\"");
  const auto version = binary::get_le<std::uint32_t>(raw.data() + 8);
  const std::uint8_t arch = raw[12];
  const auto d = binary::get_le<std::uint32_t>(raw.data() + 13);
  const auto width = binary::get_le<std::uint32_t>(raw.data() + 17);
  const auto experts = binary::get_le<std::uint32_t>(raw.data() + 21);
  const auto k = binary::get_le<std::uint32_t>(raw.data() + 25);
  if (version != kModelVersion)
    throw FormatError(where + "version: unsupported version " + std::to_string(version));
  if (arch > 2) throw FormatError(where + "arch: unknown code " + std::to_string(arch));
  if (d == 0 || width == 0) throw FormatError(where + "d/M: dimensions must be positive");

  SaeModel model;
  model.kind = static_cast<ArchKind>(arch);
  model.k = static_cast<Index>(k);
  if (model.kind == ArchKind::Switch) {
    if (experts == 0 || width % experts != 0)
      throw FormatError(where + "N: " + std::to_string(experts) + " does not divide M = " +
                        std::to_string(width));
    if (k == 0 || k > width / experts) throw FormatError(where + "k: must lie in [1, M/N]");
    model.params = SwitchSaeParams<double>::zeros(d, experts, width / experts);
  } else {
    if (experts != 1) throw FormatError(where + "N: dense models must have N = 1");
    if (model.kind == ArchKind::TopK && (k == 0 || k > width))
      throw FormatError(where + "k: must lie in [1, M]");
    model.params = DenseSaeParams<double>::zeros(d, width);
  }

  const std::uintmax_t expected =
      kModelHeaderBytes + 4 * static_cast<std::uintmax_t>(std::visit(
                                  [](const auto& p) { return parameter_count(p); }, model.params));
  const std::uintmax_t actual = std::filesystem::file_size(path);
  if (actual != expected)
    throw FormatError(where + "payload: expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(actual));

  std::visit(
      [&](auto& p) {
        for_each_block(
            [&](const std::string& name, auto& block) {
              std::vector<unsigned char> bytes(static_cast<std::size_t>(block.size()) * 4);
              in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
              if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
                throw FormatError(where + name + ": short read");
              std::size_t at = 0;
              for (Index i = 0; i < block.rows(); ++i)
                for (Index j = 0; j < block.cols(); ++j, at += 4)
                  block(i, j) = binary::get_f32(bytes.data() + at);
              if (!block.allFinite()) throw FormatError(where + name + ": non-finite values");
            },
            p);
        for_each_decoder(
            [&](const std::string& label, const auto& dec) {
              for (Index j = 0; j < dec.cols(); ++j) {
                const double norm = dec.col(j).norm();
                if (std::abs(norm - 1.0) > kLoadNormTolerance)
                  throw FormatError(where + label + " column " + std::to_string(j) + " has norm " +
                                    std::to_string(norm) + ", expected 1");
              }
            },
            p);
      },
      model.params);
  return model;
}

}  // namespace ssae
