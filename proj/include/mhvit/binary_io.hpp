#pragma once

// Little-endian binary encoding for checkpoints and preprocessed slides.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mhvit/error.hpp"

namespace mhvit {

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

class BinaryWriter {
 public:
  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    buffer_.append(raw, sizeof(T));
  }

  void put_bytes(std::string_view bytes) { buffer_.append(bytes); }

  // u32 length prefix + bytes
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buffer_.append(s);
  }

  void put_doubles(std::span<const double> values) {
    const auto* p = reinterpret_cast<const char*>(values.data());
    buffer_.append(p, values.size() * sizeof(double));
  }

  const std::string& bytes() const { return buffer_; }

 private:
  std::string buffer_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::string bytes, std::string source = "<memory>")
      : buffer_(std::move(bytes)), source_(std::move(source)) {}

  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, buffer_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string out = buffer_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string get_string() { return get_bytes(get<std::uint32_t>()); }

  std::vector<double> get_doubles(std::size_t n) {
    if (n > (buffer_.size() - pos_) / sizeof(double)) need(n * sizeof(double));
    std::vector<double> out(n);
    std::memcpy(out.data(), buffer_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return out;
  }

  bool at_end() const { return pos_ == buffer_.size(); }
  const std::string& source() const { return source_; }

 private:
  void need(std::size_t n) const {
    if (n > buffer_.size() - pos_) {
      throw IoError(source_ + ": truncated (needed " + std::to_string(n) +
                    " bytes at offset " + std::to_string(pos_) + ")");
    }
  }

  std::string buffer_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace mhvit
