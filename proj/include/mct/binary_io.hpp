#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mct/errors.hpp"

namespace mct {

static_assert(std::endian::native == std::endian::little, "binary codecs assume a little-endian host");

class ByteWriter {
 public:
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v) { put(v); }
  void f32(float v) { put(v); }
  void f64(double v) { put(v); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  template <class T>
  void put(T v) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    out_.insert(out_.end(), raw, raw + sizeof(T));
  }
  std::vector<std::uint8_t> out_;
};

// Bounds-checked little-endian reader. Every failure is a FormatError that
// reports the offset of the field being read.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) { return get<std::uint32_t>(what); }
  float f32(const char* what) { return get<float>(what); }
  double f64(const char* what) { return get<double>(what); }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const {
    if (pos_ != data_.size()) {
      throw FormatError(std::to_string(data_.size() - pos_) + " trailing bytes", pos_);
    }
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mct
