#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace clkit {

/// Corrupt or truncated artifact file.
class CorruptFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// All artifact files are little-endian with length-prefixed strings; see
// docs/FORMATS.md. Multi-byte values are composed bytewise so the layout is
// host-order independent.

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    u64(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void bytes(const char* data, std::size_t n) {
    out_.write(data, static_cast<std::streamsize>(n));
  }
  /// Unsigned LEB128.
  void varint(std::uint64_t v) {
    while (v >= 0x80) {
      u8(static_cast<std::uint8_t>(v) | 0x80);
      v >>= 7;
    }
    u8(static_cast<std::uint8_t>(v));
  }

  bool ok() const { return static_cast<bool>(out_); }

 private:
  std::ostream& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::istream& in) : in_(in) {}

  std::uint8_t u8() {
    int c = in_.get();
    if (c == EOF) throw CorruptFileError("unexpected end of file");
    return static_cast<std::uint8_t>(c);
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str(std::size_t max_len = 1 << 20) {
    std::uint64_t n = u64();
    if (n > max_len) throw CorruptFileError("string length out of range");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::uint64_t>(in_.gcount()) != n) {
      throw CorruptFileError("unexpected end of file inside string");
    }
    return s;
  }
  std::uint64_t varint() {
    std::uint64_t v = 0;
    int shift = 0;
    while (true) {
      std::uint8_t b = u8();
      v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
      if ((b & 0x80) == 0) break;
      shift += 7;
      if (shift > 63) throw CorruptFileError("varint too long");
    }
    return v;
  }
  void expect_magic(const char* magic, std::size_t n, const std::string& what) {
    std::string got(n, '\0');
    in_.read(got.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n || std::memcmp(got.data(), magic, n) != 0) {
      throw CorruptFileError("bad magic for " + what + " file");
    }
  }
  bool at_eof() {
    return in_.peek() == EOF;
  }

 private:
  std::istream& in_;
};

}  // namespace clkit
