#pragma once

// Little-endian primitives shared by the bag and checkpoint formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "mhattnsurv/errors.hpp"

namespace mhattnsurv::binary {

template <typename U>
U to_little(U v) noexcept {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
    return out;
  }
  return v;
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_tag(std::ostream& out, std::string_view tag) { out.write(tag.data(), 4); }

/// Sequential reader that reports the byte offset of any failure.
class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  std::uint64_t offset() const noexcept { return offset_; }

  void read_bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(source_ + ": truncated while reading " + what,
                        offset_ + static_cast<std::uint64_t>(in_.gcount()));
    offset_ += n;
  }

  std::array<char, 4> tag(const char* what) {
    std::array<char, 4> t{};
    read_bytes(t.data(), 4, what);
    return t;
  }

  void expect_tag(std::string_view expected, const char* what) {
    const auto at = offset_;
    const auto t = tag(what);
    if (std::string_view(t.data(), 4) != expected)
      throw FormatError(source_ + ": bad " + what + ", expected '" + std::string(expected) + "'", at);
  }

  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    read_bytes(reinterpret_cast<char*>(&v), sizeof v, what);
    return to_little(v);
  }

  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    read_bytes(reinterpret_cast<char*>(&v), sizeof v, what);
    return to_little(v);
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  /// True when no bytes remain.
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  /// Peeks the next four bytes without consuming them; false near EOF.
  bool peek_tag(std::string_view tag) {
    const auto pos = in_.tellg();
    std::array<char, 4> t{};
    in_.read(t.data(), 4);
    const bool ok = in_.gcount() == 4 && std::string_view(t.data(), 4) == tag;
    in_.clear();
    in_.seekg(pos);
    return ok;
  }

  const std::string& source() const noexcept { return source_; }

 private:
  std::istream& in_;
  std::string source_;
  std::uint64_t offset_ = 0;
};

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PathError("cannot open '" + path + "' for writing");
  return out;
}

}  // namespace mhattnsurv::binary
