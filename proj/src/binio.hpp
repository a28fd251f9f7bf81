#pragma once

// Little-endian binary readers/writers shared by the index, checkpoint and
// sidecar file formats. Byte-wise so the on-disk layout does not depend on
// host endianness.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "xmc/error.hpp"

namespace xmc::binio {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw DataError("unexpected end of binary stream");
}

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  }
  put_bytes(out, buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  get_bytes(in, buf, sizeof(T));
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<U>(buf[i]) << (8 * i);
  }
  return static_cast<T>(u);
}

inline void put_f32(std::ostream& out, float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, sizeof(bits));
  put_le<std::uint32_t>(out, bits);
}

inline float get_f32(std::istream& in) {
  const std::uint32_t bits = get_le<std::uint32_t>(in);
  float value;
  std::memcpy(&value, &bits, sizeof(value));
  return value;
}

inline void put_f64(std::ostream& out, double value) {
  std::uint64_t bits;
  std::memcpy(&bits, &value, sizeof(bits));
  put_le<std::uint64_t>(out, bits);
}

inline double get_f64(std::istream& in) {
  const std::uint64_t bits = get_le<std::uint64_t>(in);
  double value;
  std::memcpy(&value, &bits, sizeof(value));
  return value;
}

inline void put_magic(std::ostream& out, const char* magic, std::size_t n) {
  put_bytes(out, magic, n);
}

inline void expect_magic(std::istream& in, const char* magic, std::size_t n,
                         const std::string& what) {
  std::string buf(n, '\0');
  get_bytes(in, buf.data(), n);
  if (std::memcmp(buf.data(), magic, n) != 0) {
    throw DataError(what + ": bad magic");
  }
}

}  // namespace xmc::binio
