// SPDX-License-Identifier: Apache-2.0
#include "curvloc/binary_io.hpp"

#include <fstream>
#include <iterator>

namespace curvloc::io {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void ByteWriter::write_file(const std::filesystem::path& path) const { write_file_bytes(path, bytes_); }

ByteReader ByteReader::from_file(const std::filesystem::path& path) {
  return ByteReader(read_file_bytes(path), path.string());
}

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) throw FormatError(what_ + ": truncated payload");
}

std::uint64_t ByteReader::get(int n) {
  need(static_cast<std::size_t>(n));
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
  pos_ += static_cast<std::size_t>(n);
  return v;
}

void ByteReader::expect_magic(std::string_view tag) {
  need(tag.size());
  if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) {
    throw FormatError(what_ + ": bad magic, expected \"" + std::string(tag) + "\"");
  }
  pos_ += tag.size();
}

std::vector<double> ByteReader::f64s(std::size_t n) {
  need(n * 8);
  std::vector<double> out(n);
  for (auto& v : out) v = f64();
  return out;
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n);
  std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return out;
}

void ByteReader::expect_end() const {
  if (remaining() != 0) throw FormatError(what_ + ": trailing bytes after payload");
}

}  // namespace curvloc::io
