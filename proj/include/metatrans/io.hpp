#pragma once

// Little-endian binary readers/writers for the checkpoint and feature-file
// formats. Encoding is explicit byte-by-byte so files round-trip bit-exactly
// regardless of host conventions.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "metatrans/tensor.hpp"

namespace metatrans::io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.write(reinterpret_cast<const char*>(&v), 1);
}

inline void write_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  write_u32(os, bits);
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i)
    b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& field) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError("truncated file while reading " + field);
  }
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline std::uint8_t read_u8(std::istream& is, const std::string& field) {
  unsigned char b;
  if (!is.read(reinterpret_cast<char*>(&b), 1)) {
    throw FormatError("truncated file while reading " + field);
  }
  return b;
}

inline float read_f32(std::istream& is, const std::string& field) {
  const std::uint32_t bits = read_u32(is, field);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline double read_f64(std::istream& is, const std::string& field) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    throw FormatError("truncated file while reading " + field);
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

inline void write_magic(std::ostream& os, const char magic[4]) {
  os.write(magic, 4);
}

inline void expect_magic(std::istream& is, const char magic[4],
                         const std::string& what) {
  char buf[4];
  if (!is.read(buf, 4)) throw FormatError("truncated file while reading magic");
  if (std::memcmp(buf, magic, 4) != 0) {
    throw FormatError("bad magic: expected " + what);
  }
}

}  // namespace metatrans::io
