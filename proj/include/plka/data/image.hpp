#pragma once

// Grayscale images and binary masks, with 8-bit binary PGM (P5) I/O.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "plka/error.hpp"

namespace plka {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}

  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::size_t size() const { return pixels.size(); }
  bool operator==(const GrayImage&) const = default;
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1, row-major

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t size() const { return bits.size(); }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1})); }
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

// Bytes of an 8-bit PGM. Image values in [0,1] map to round(255 v).
inline std::vector<std::uint8_t> to_bytes(const GrayImage& img) {
  std::vector<std::uint8_t> out(img.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

inline std::vector<std::uint8_t> to_bytes(const BinaryMask& mask) {
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.bits[i] ? 255 : 0;
  return out;
}

inline void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
                      const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  write_pgm(path, img.height, img.width, to_bytes(img));
}

inline void write_pgm(const std::filesystem::path& path, const BinaryMask& mask) {
  write_pgm(path, mask.height, mask.width, to_bytes(mask));
}

struct PgmData {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bytes;
};

inline PgmData read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (is) {
      const int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    is >> t;
    return t;
  };
  if (token() != "P5") throw IoError(path.string() + ": not a binary PGM");
  PgmData d;
  try {
    d.width = std::stoul(token());
    d.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw IoError(path.string() + ": only 8-bit PGM supported");
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  is.get();  // single whitespace before the raster
  d.bytes.resize(d.width * d.height);
  if (!is.read(reinterpret_cast<char*>(d.bytes.data()), static_cast<std::streamsize>(d.bytes.size()))) {
    throw IoError(path.string() + ": truncated raster");
  }
  return d;
}

inline GrayImage read_pgm_image(const std::filesystem::path& path) {
  const auto d = read_pgm(path);
  GrayImage img(d.height, d.width);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<float>(d.bytes[i]) / 255.0f;
  return img;
}

inline BinaryMask read_pgm_mask(const std::filesystem::path& path) {
  const auto d = read_pgm(path);
  BinaryMask m(d.height, d.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.bits[i] = d.bytes[i] >= 128 ? 1 : 0;
  return m;
}

}  // namespace plka
