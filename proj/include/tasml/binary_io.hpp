#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "tasml/errors.hpp"

namespace tasml::io {

// Explicit little-endian encoding regardless of host order.

template <typename U>
void put_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((value >> (8 * i)) & 0xffu);
  os.write(buf, sizeof(U));
}

template <typename U>
bool get_le(std::istream& is, U& value) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) return false;
  value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
  return true;
}

inline void put_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
inline void put_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }

inline bool get_f32(std::istream& is, float& v) {
  std::uint32_t bits = 0;
  if (!get_le(is, bits)) return false;
  v = std::bit_cast<float>(bits);
  return true;
}

inline bool get_f64(std::istream& is, double& v) {
  std::uint64_t bits = 0;
  if (!get_le(is, bits)) return false;
  v = std::bit_cast<double>(bits);
  return true;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const char* what, std::uint64_t max_len = (1ull << 32)) {
  std::uint64_t n = 0;
  if (!get_le(is, n) || n > max_len) throw FileMalformed(std::string("truncated or oversized string: ") + what);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n)))
    throw FileMalformed(std::string("truncated string: ") + what);
  return s;
}

} // namespace tasml::io
