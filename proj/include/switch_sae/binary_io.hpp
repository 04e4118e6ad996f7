#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

namespace ssae::binary {

// Little-endian encoders, independent of host byte order.

template <typename UInt>
void put_le(std::ostream& out, UInt value) {
  char bytes[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i)
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes, sizeof(UInt));
}

inline void put_f32(std::ostream& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }

template <typename UInt>
UInt get_le(const unsigned char* bytes) {
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(bytes[i]) << (8 * i);
  return value;
}

inline float get_f32(const unsigned char* bytes) {
  return std::bit_cast<float>(get_le<std::uint32_t>(bytes));
}

/// Printable rendering of a magic field for error messages.
inline std::string printable(const unsigned char* bytes, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char c = bytes[i];
    if (c >= 0x20 && c < 0x7F) {
      out += static_cast<char>(c);
    } else {
      static const char* hex = "0123456789abcdef";
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 0xF];
    }
  }
  return out;
}

}  // namespace ssae::binary
