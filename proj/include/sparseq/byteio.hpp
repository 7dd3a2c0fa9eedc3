#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparseq/error.hpp"

namespace sparseq {

// Little-endian fixed-width encoder for the on-disk containers.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void tag(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    tag(s);
  }

  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }
  std::vector<std::uint8_t> take() noexcept { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked decoder; every overrun is a Format error naming the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> bytes(std::size_t n) { return take(n); }
  void expect_tag(std::string_view tag) {
    auto b = take(tag.size());
    if (std::memcmp(b.data(), tag.data(), tag.size()) != 0) {
      fail(ErrorKind::Format, "bad magic at byte offset " + std::to_string(offset_ - tag.size()));
    }
  }
  std::string str(std::size_t max_len = 4096) {
    const std::uint32_t n = u32();
    if (n > max_len) fail(ErrorKind::Format, "string length " + std::to_string(n) + " too large at byte offset " + std::to_string(offset_ - 4));
    auto b = take(n);
    return {b.begin(), b.end()};
  }

  std::size_t offset() const noexcept { return offset_; }
  std::size_t remaining() const noexcept { return data_.size() - offset_; }
  void expect_end() const {
    if (remaining() != 0) fail(ErrorKind::Format, "trailing bytes at byte offset " + std::to_string(offset_));
  }

 private:
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > remaining()) {
      fail(ErrorKind::Format, "truncated: need " + std::to_string(n) + " bytes at byte offset " + std::to_string(offset_) +
                                  ", have " + std::to_string(remaining()));
    }
    auto s = data_.subspan(offset_, n);
    offset_ += n;
    return s;
  }

  std::span<const std::uint8_t> data_;
  std::size_t offset_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace sparseq
