#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "fedktl/error.hpp"

namespace fedktl::io {

// Little-endian encoders for the KTL* file family. Every field is written
// byte by byte so the layout is independent of host endianness.

class ByteWriter {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  const std::vector<char>& bytes() const { return bytes_; }

  /// Writes to a temporary sibling and renames, so readers polling for
  /// `path` never observe a partial file.
  void save(const std::filesystem::path& path) const {
    auto tmp = path;
    tmp += ".partial";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
      out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
      if (!out) throw FormatError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  static ByteReader load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return ByteReader(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
  }

  /// Throws "bad magic" unless the next bytes equal `m`.
  void expect_magic(std::string_view m) {
    if (remaining() < m.size() || std::string_view(bytes_.data() + pos_, m.size()) != m)
      throw FormatError("bad magic: expected \"" + std::string(m) + "\"");
    pos_ += m.size();
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  /// Throws "truncated" unless at least `n` bytes remain.
  void need(std::uint64_t n, std::string_view what) const {
    if (n > remaining()) throw FormatError("truncated file: " + std::string(what));
  }

  void expect_end() const {
    if (remaining() != 0) throw FormatError("trailing bytes after payload");
  }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::uint64_t>(n), "header");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace fedktl::io
