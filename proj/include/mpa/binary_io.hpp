// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitive IO for the binary file formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "mpa/error.hpp"

namespace mpa::bin {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, std::string_view what) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw FormatError("truncated file while reading " + std::string(what));
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw FormatError("bad magic: expected " + std::string(magic));
  }
}

inline void expect_version(std::istream& in, std::uint32_t expected, std::string_view format) {
  const auto version = read_le<std::uint32_t>(in, "version");
  if (version != expected) {
    throw FormatError(std::string(format) + ": file version " + std::to_string(version) +
                      " does not match supported version " + std::to_string(expected));
  }
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::string_view what) {
  const auto n = read_le<std::uint32_t>(in, what);
  if (n > (1u << 26)) throw FormatError("implausible string length in " + std::string(what));
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw FormatError("truncated file while reading " + std::string(what));
  return s;
}

}  // namespace mpa::bin
