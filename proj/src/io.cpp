#include "platoonwatch/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

namespace pw::io {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::uint64_t hash_file(const std::filesystem::path& p) {
  auto bytes = read_file(p);
  return fnv1a(bytes.data(), bytes.size());
}

std::uint16_t f32_to_f16(float f) {
  std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  std::uint32_t sign = (x >> 16) & 0x8000u;
  std::int32_t exp = static_cast<std::int32_t>((x >> 23) & 0xff) - 127 + 15;
  std::uint32_t mant = x & 0x7fffffu;

  if (((x >> 23) & 0xff) == 0xff) {  // inf/nan
    return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
  }
  if (exp >= 0x1f) {  // overflow -> inf
    return static_cast<std::uint16_t>(sign | 0x7c00u);
  }
  if (exp <= 0) {  // subnormal or zero
    if (exp < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    int shift = 14 - exp;
    std::uint32_t half = mant >> shift;
    std::uint32_t rem = mant & ((1u << shift) - 1);
    std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half & 1))) half++;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
  std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1))) half++;  // may carry into exp, which is correct
  return static_cast<std::uint16_t>(sign | half);
}

float f16_to_f32(std::uint16_t h) {
  std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t out;
  if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {  // subnormal: normalize
      int e = -1;
      std::uint32_t m = mant;
      do {
        e++;
        m <<= 1;
      } while ((m & 0x400u) == 0);
      out = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) |
            ((m & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    out = sign | 0x7f800000u | (mant << 13);
  } else {
    out = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(out);
}

void write_file(const std::filesystem::path& p,
                const std::vector<unsigned char>& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + p.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + p.string());
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::vector<unsigned char> b(text.begin(), text.end());
  write_file(p, b);
}

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open: " + p.string());
  auto n = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<unsigned char> bytes(n);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!f) throw IoError("read failed: " + p.string());
  return bytes;
}

std::string read_text_file(const std::filesystem::path& p) {
  auto b = read_file(p);
  return std::string(b.begin(), b.end());
}

void write_checked(const std::filesystem::path& p, const ByteWriter& w) {
  std::vector<unsigned char> out = w.bytes();
  std::uint64_t h = fnv1a(out.data(), out.size());
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<unsigned char>((h >> (8 * i)) & 0xff));
  write_file(p, out);
}

std::vector<unsigned char> read_checked(const std::filesystem::path& p) {
  auto bytes = read_file(p);
  if (bytes.size() < 8)
    throw IoError("checksum failure: " + p.string() + " shorter than trailer");
  std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  std::uint64_t actual = fnv1a(bytes.data(), body);
  if (stored != actual)
    throw IoError("checksum failure: " + p.string());
  bytes.resize(body);
  return bytes;
}

}  // namespace pw::io
