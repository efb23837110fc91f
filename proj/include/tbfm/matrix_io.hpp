#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tbfm/common.hpp"

namespace tbfm {

// Binary layout: "SPKD", u32 n, u32 d (little endian), then n*d little-endian
// IEEE-754 doubles in row-major order.

inline constexpr std::array<char, 4> kSpkdMagic{'S', 'P', 'K', 'D'};

namespace detail {
static_assert(std::endian::native == std::endian::little, "SPKD I/O assumes a little-endian host");

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
}  // namespace detail

inline RowMatrix parse_spkd(const std::vector<char>& bytes, const std::string& name = "input") {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kSpkdMagic.data(), 4) != 0)
    throw IoError(name + ": missing SPKD magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t n = detail::read_u32_le(p + 4);
  const std::uint64_t d = detail::read_u32_le(p + 8);
  const std::uint64_t expected = n * d * 8;
  const std::uint64_t actual = bytes.size() - 12;
  if (actual != expected)
    throw IoError(name + ": SPKD payload length mismatch: expected " + std::to_string(expected) +
                  " bytes for " + std::to_string(n) + "x" + std::to_string(d) + ", got " +
                  std::to_string(actual));
  RowMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  if (expected > 0) std::memcpy(m.data(), bytes.data() + 12, expected);
  return m;
}

inline RowMatrix read_spkd(const std::filesystem::path& path) {
  return parse_spkd(detail::slurp(path), path.string());
}

inline void write_spkd(const std::filesystem::path& path, const RowMatrix& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(kSpkdMagic.data(), 4);
  detail::write_u32_le(out, static_cast<std::uint32_t>(m.rows()));
  detail::write_u32_le(out, static_cast<std::uint32_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// One sample per row, comma separated, no header.
inline RowMatrix parse_csv_matrix(std::istream& in, const std::string& name = "input") {
  std::vector<double> values;
  std::size_t cols = 0, rows = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::size_t count = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      std::size_t used = 0;
      double v;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        throw IoError(name + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
      }
      if (cell.find_first_not_of(" \t", used) != std::string::npos)
        throw IoError(name + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
      values.push_back(v);
      ++count;
    }
    if (rows == 0) cols = count;
    if (count != cols)
      throw IoError(name + ":" + std::to_string(line_no) + ": ragged row with " +
                    std::to_string(count) + " fields, expected " + std::to_string(cols));
    ++rows;
  }
  if (rows == 0) throw IoError(name + ": no data rows");
  RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::memcpy(m.data(), values.data(), values.size() * sizeof(double));
  return m;
}

inline RowMatrix read_csv_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return parse_csv_matrix(in, path.string());
}

inline void write_csv_matrix(const std::filesystem::path& path, const RowMatrix& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << format_double(m(r, c));
    }
    out << '\n';
  }
}

/// Reads SPKD when the file starts with the magic bytes, CSV otherwise.
inline RowMatrix read_matrix(const std::filesystem::path& path) {
  auto bytes = detail::slurp(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kSpkdMagic.data(), 4) == 0)
    return parse_spkd(bytes, path.string());
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  return parse_csv_matrix(in, path.string());
}

}  // namespace tbfm
