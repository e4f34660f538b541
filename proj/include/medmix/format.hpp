#pragma once

// Little-endian headered matrix blobs.
//
//   matrix: "MDXMAT01" u32 rows u32 cols, rows*cols f32, row-major
//   mask:   "MDXMSK01" u32 rows u32 cols, rows*cols bytes in {0,1}

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "medmix/error.hpp"
#include "medmix/tensor.hpp"

namespace medmix {

inline constexpr std::string_view kMatrixMagic = "MDXMAT01";
inline constexpr std::string_view kMaskMagic = "MDXMSK01";

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t checked_u32(std::size_t v) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw FormatError("dimension exceeds u32");
  return static_cast<std::uint32_t>(v);
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  char buf[8];
  if (!is.read(buf, 8) || std::string_view(buf, 8) != magic) throw FormatError("bad magic");
}

inline void write_matrix(std::ostream& os, const Matrix<float>& m) {
  os.write(kMatrixMagic.data(), 8);
  put_u32(os, checked_u32(m.rows()));
  put_u32(os, checked_u32(m.cols()));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * 4));
  } else {
    for (float v : m.values()) put_f32(os, v);
  }
}

struct MatrixHeader {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
};

inline MatrixHeader read_matrix_header(std::istream& is) {
  expect_magic(is, kMatrixMagic);
  MatrixHeader h;
  h.rows = get_u32(is);
  h.cols = get_u32(is);
  return h;
}

inline Matrix<float> read_matrix_body(std::istream& is, const MatrixHeader& h) {
  Matrix<float> m(h.rows, h.cols);
  std::vector<unsigned char> raw(m.size() * 4);
  if (!raw.empty() && !is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError("truncated matrix payload");
  for (std::size_t i = 0; i < m.size(); ++i) {
    const unsigned char* b = raw.data() + 4 * i;
    const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                            (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    m.data()[i] = std::bit_cast<float>(u);
  }
  return m;
}

inline Matrix<float> read_matrix(std::istream& is) { return read_matrix_body(is, read_matrix_header(is)); }

inline void write_mask(std::ostream& os, const Mask& m) {
  os.write(kMaskMagic.data(), 8);
  put_u32(os, checked_u32(m.rows()));
  put_u32(os, checked_u32(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size()));
}

inline Mask read_mask(std::istream& is) {
  expect_magic(is, kMaskMagic);
  const std::uint32_t rows = get_u32(is);
  const std::uint32_t cols = get_u32(is);
  Mask m(rows, cols);
  if (!m.empty() && !is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size())))
    throw FormatError("truncated mask payload");
  for (std::uint8_t b : m.values())
    if (b > 1) throw FormatError("mask byte outside {0,1}");
  return m;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + p.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + p.string());
  return is;
}

inline std::string read_file(const std::filesystem::path& p) {
  auto is = open_in(p);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view content) {
  auto os = open_out(p);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw Error("write failed: " + p.string());
}

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001B3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace medmix
