#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "platoonwatch/common.hpp"

namespace pw::io {

// --- hashing -----------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

std::string hex64(std::uint64_t v);
std::uint64_t hash_file(const std::filesystem::path& p);

// --- float16 (storage only) --------------------------------------------

std::uint16_t f32_to_f16(float f);  // round to nearest even
float f16_to_f32(std::uint16_t h);

// --- little-endian byte buffers -----------------------------------------
//
// All on-disk containers are little-endian. The writer/reader pair below is
// the single code path for every magic-tagged format (PWTR, PWDS, PWCK, PWCQ).

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void magic(const char m[4]) { raw(m, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  template <typename T>
  void array(std::span<const T> v) {
    raw(v.data(), v.size() * sizeof(T));
  }

  const std::vector<unsigned char>& bytes() const { return buf_; }
  std::uint64_t hash() const { return fnv1a(buf_.data(), buf_.size()); }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  explicit ByteReader(const std::vector<unsigned char>& v)
      : ByteReader(v.data(), v.size()) {}

  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }
  void expect_magic(const char m[4], const std::string& what) {
    char got[4];
    raw(got, 4);
    if (std::memcmp(got, m, 4) != 0)
      throw IoError(what + ": bad magic");
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  template <typename T>
  void array(std::vector<T>& out, std::size_t count) {
    out.resize(count);
    raw(out.data(), count * sizeof(T));
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return n_ - pos_; }
  std::uint64_t hash_prefix() const { return fnv1a(p_, pos_); }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  void need(std::size_t n) {
    if (pos_ + n > n_) throw IoError("truncated input: need " +
                                     std::to_string(n) + " bytes at offset " +
                                     std::to_string(pos_));
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

// --- files ---------------------------------------------------------------

void write_file(const std::filesystem::path& p,
                const std::vector<unsigned char>& bytes);
void write_file(const std::filesystem::path& p, const std::string& text);
std::vector<unsigned char> read_file(const std::filesystem::path& p);
std::string read_text_file(const std::filesystem::path& p);

// Append a trailing FNV-1a checksum and write; read_checked verifies and
// strips it, throwing IoError on mismatch or truncation.
void write_checked(const std::filesystem::path& p, const ByteWriter& w);
std::vector<unsigned char> read_checked(const std::filesystem::path& p);

}  // namespace pw::io
