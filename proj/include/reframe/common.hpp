// Shared error types, byte-level serialization helpers and hashing.
#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace reframe {

// ---------------------------------------------------------------- errors

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ArgumentError : std::runtime_error {
  explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File-format violations carry the stream offset where decoding failed.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg, std::uint64_t offset = 0)
      : std::runtime_error(msg + " (offset " + std::to_string(offset) + ")"),
        offset(offset) {}
  std::uint64_t offset;
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------- binary io
//
// All on-disk formats are little-endian. The helpers below serialize through
// explicit byte shuffles so files are identical regardless of host endianness.

namespace io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(os, b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(os, b, 8);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline void write_f64_array(std::ostream& os, const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) write_f64(os, p[i]);
}

inline std::uint64_t tell(std::istream& is) {
  return static_cast<std::uint64_t>(is.tellg());
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
  std::uint64_t at = tell(is);
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is || is.gcount() != static_cast<std::streamsize>(n))
    throw FormatError("unexpected end of file", at);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_bytes(is, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  read_bytes(is, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1u << 20) {
  std::uint64_t at = tell(is);
  std::uint32_t n = read_u32(is);
  if (n > max_len) throw FormatError("string length out of range", at);
  std::string s(n, '\0');
  if (n > 0) read_bytes(is, s.data(), n);
  return s;
}

inline void read_f64_array(std::istream& is, double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) p[i] = read_f64(is);
}

// Reads and checks a 4-byte magic tag plus a format version.
inline void expect_magic(std::istream& is, const char magic[4],
                         std::uint32_t expected_version) {
  char got[4];
  read_bytes(is, got, 4);
  if (std::memcmp(got, magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected '") +
                          std::string(magic, 4) + "' got '" +
                          std::string(got, 4) + "'",
                      0);
  std::uint64_t at = tell(is);
  std::uint32_t version = read_u32(is);
  if (version != expected_version)
    throw FormatError("unsupported format version " + std::to_string(version),
                      at);
}

inline void write_magic(std::ostream& os, const char magic[4],
                        std::uint32_t version) {
  write_bytes(os, magic, 4);
  write_u32(os, version);
}

}  // namespace io

// ---------------------------------------------------------------- hashing

// FNV-1a, 64-bit. Used for config hashes and artifact fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 14695981039346656037ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

// Canonical float formatting: shortest round-trip form, stable across runs.
inline std::string format_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace reframe
