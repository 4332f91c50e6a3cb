#pragma once

// Binary tensor format, little-endian throughout:
//   "PLKA" | version u32 | rank u32 | extents u32[rank] | f32[numel]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "plka/tensor.hpp"

namespace plka {

inline constexpr std::array<char, 4> kTensorMagic = {'P', 'L', 'K', 'A'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void write_bytes(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& is) {
  const std::uint64_t lo = read_u32(is);
  const std::uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

inline std::string read_bytes(std::istream& is, std::uint32_t limit = 1u << 26) {
  const auto n = read_u32(is);
  if (n > limit) throw IoError("length prefix " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("unexpected end of stream");
  return s;
}

}  // namespace io

template <std::floating_point T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic.data(), 4);
  io::write_u32(os, kTensorFormatVersion);
  io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (const auto e : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(e));
  for (const T v : t.data()) io::write_f32(os, static_cast<float>(v));
  if (!os) throw IoError("tensor write failed");
}

template <std::floating_point T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kTensorMagic) throw IoError("bad tensor magic");
  const auto version = io::read_u32(is);
  if (version != kTensorFormatVersion) throw IoError("unsupported tensor format version " + std::to_string(version));
  const auto rank = io::read_u32(is);
  if (rank > 8) throw IoError("tensor rank " + std::to_string(rank) + " out of range");
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& e : shape) {
    e = io::read_u32(is);
    n *= e;
    if (n > (1ull << 30)) throw IoError("tensor too large");
  }
  std::vector<T> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<T>(io::read_f32(is));
  return Tensor<T>::from(std::move(shape), std::move(data));
}

}  // namespace plka
