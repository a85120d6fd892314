#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dspa/error.hpp"

namespace dspa::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

/// Appends little-endian primitives to an in-memory buffer.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename UInt>
  void uint(UInt v) {
    for (std::size_t b = 0; b < sizeof(UInt); ++b) buf_.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
  }

  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }

  void f32s(std::span<const float> v) {
    if constexpr (std::endian::native == std::endian::little) {
      const char* p = reinterpret_cast<const char*>(v.data());
      buf_.insert(buf_.end(), p, p + v.size_bytes());
    } else {
      for (float x : v) f32(x);
    }
  }

  const std::vector<char>& buffer() const noexcept { return buf_; }
  std::size_t size() const noexcept { return buf_.size(); }

 private:
  std::vector<char> buf_;
};

/// Bounds-checked little-endian reader. Every overrun is reported as
/// ErrorCode::kTruncated.
class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  template <typename UInt>
  UInt uint() {
    need(sizeof(UInt));
    UInt v = 0;
    for (std::size_t b = 0; b < sizeof(UInt); ++b)
      v |= static_cast<UInt>(static_cast<unsigned char>(data_[pos_ + b])) << (8 * b);
    pos_ += sizeof(UInt);
    return v;
  }

  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }

  void f32s(std::span<float> out) {
    need(out.size() * sizeof(float));
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
      pos_ += out.size_bytes();
    } else {
      for (float& x : out) x = f32();
    }
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void seek(std::size_t pos) {
    require(pos <= data_.size(), ErrorCode::kTruncated, "seek past end of data");
    pos_ = pos;
  }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_)
      fail(ErrorCode::kTruncated, "needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                                      ", " + std::to_string(data_.size() - pos_) + " available");
  }

  std::span<const char> data_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::kIo, "read failed for " + path.string());
  return data;
}

inline void write_file(const std::filesystem::path& path, std::span<const char> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

}  // namespace dspa::io
