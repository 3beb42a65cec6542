// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace curvloc::io {

/// Malformed or truncated binary file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or unreadable file.
class MissingInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian byte sink.
class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    magic(s);
  }
  void raw(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }

  [[nodiscard]] const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

/// Little-endian byte source; every read past the end raises FormatError.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes, std::string what = "file")
      : bytes_(std::move(bytes)), what_(std::move(what)) {}
  static ByteReader from_file(const std::filesystem::path& path);

  void expect_magic(std::string_view tag);
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::vector<double> f64s(std::size_t n);
  std::string str();
  std::vector<std::uint8_t> raw(std::size_t n);

  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }
  void expect_end() const;

 private:
  std::uint64_t get(int n);
  void need(std::size_t n) const;

  std::vector<std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

[[nodiscard]] std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace curvloc::io
