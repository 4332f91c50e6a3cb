#pragma once

// Synthetic abdominal-style slices: a textured body ellipse holding a liver
// ellipse, a spleen blob and a pair of kidney crescents, each with its own
// intensity band, plus Gaussian noise and sparse bright outliers.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "plka/data/image.hpp"
#include "plka/rng.hpp"

namespace plka {

inline const std::array<std::string, 3> kOrganClasses = {"liver", "spleen", "kidneys"};

struct AreaBounds {
  std::size_t min_pixels;
  std::size_t max_pixels;
};

// Visible-area bounds per class at 256 x 256, derived from the jitter ranges
// below with margin for overlap and rasterization.
inline AreaBounds organ_area_bounds(const std::string& cls) {
  if (cls == "liver") return {2600, 6200};
  if (cls == "spleen") return {1100, 3500};
  if (cls == "kidneys") return {900, 2800};
  throw ConfigError("unknown organ class " + cls);
}

inline bool is_organ_class(const std::string& cls) {
  return std::find(kOrganClasses.begin(), kOrganClasses.end(), cls) != kOrganClasses.end();
}

struct SceneConfig {
  std::size_t size = 256;
  double noise_std = 0.02;
  std::size_t outlier_count = 24;
  std::vector<std::string> omit;  // organ classes left out of the scene
};

struct SyntheticScene {
  GrayImage image;
  std::map<std::string, BinaryMask> organ_masks;
  std::uint64_t seed = 0;

  bool has(const std::string& cls) const { return organ_masks.count(cls) > 0; }
};

inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  const std::size_t n = cfg.size;
  if (n < 32) throw ConfigError("scene size must be at least 32");
  const double k = static_cast<double>(n) / 256.0;
  Rng rng(seed);
  auto u = [&](double lo, double hi) { return uniform(rng, lo, hi); };
  auto omitted = [&](const std::string& cls) {
    return std::find(cfg.omit.begin(), cfg.omit.end(), cls) != cfg.omit.end();
  };

  // 0 = outside, 1 = body, 2.. = organ index + 2
  std::vector<int> label(n * n, 0);
  std::vector<float> intensity(n * n, 0.0f);

  const double bcx = (128 + u(-6, 6)) * k, bcy = (128 + u(-6, 6)) * k;
  const double brx = u(100, 112) * k, bry = u(84, 96) * k;
  const double body_level = u(0.28, 0.34);
  std::array<double, 6> tex{};
  for (auto& t : tex) t = u(0, 2 * std::numbers::pi);
  const double fx1 = u(1.5, 3.0), fy1 = u(1.5, 3.0), fx2 = u(3.0, 5.0), fy2 = u(3.0, 5.0);

  // The texture is separable: sin(a + b) = sin a cos b + cos a sin b.
  constexpr double two_pi = 2 * std::numbers::pi;
  std::vector<double> s1x(n), c1y(n), s2x(n), c2x(n), s2y(n), c2y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    s1x[i] = std::sin(two_pi * fx1 * t + tex[0]);
    c1y[i] = std::cos(two_pi * fy1 * t + tex[1]);
    s2x[i] = std::sin(two_pi * fx2 * t + tex[2]);
    c2x[i] = std::cos(two_pi * fx2 * t + tex[2]);
    s2y[i] = std::sin(two_pi * fy2 * t);
    c2y[i] = std::cos(two_pi * fy2 * t);
  }
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double ex = (px - bcx) / brx, ey = (py - bcy) / bry;
      if (ex * ex + ey * ey <= 1.0) {
        const double texture = 0.02 * s1x[x] * c1y[y] + 0.015 * (s2x[x] * c2y[y] + c2x[x] * s2y[y]);
        label[y * n + x] = 1;
        intensity[y * n + x] = static_cast<float>(body_level + texture);
      }
    }
  }

  // Tests inside(px, py) over the pixel box [x0, x1) x [y0, y1).
  auto paint = [&](int organ, double level, double cx, double cy, double reach, auto&& inside) {
    const auto clampi = [&](double v) {
      return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n)));
    };
    const std::size_t x0 = clampi(std::floor(cx - reach)), x1 = clampi(std::ceil(cx + reach) + 1);
    const std::size_t y0 = clampi(std::floor(cy - reach)), y1 = clampi(std::ceil(cy + reach) + 1);
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        if (label[y * n + x] >= 1 && inside(px, py)) {
          label[y * n + x] = organ + 2;
          intensity[y * n + x] = static_cast<float>(level);
        }
      }
    }
  };

  // Every draw happens whether or not the organ is omitted, so the remaining
  // organs of a scene do not depend on the omission list.
  const double lcx = (84 + u(-8, 8)) * k, lcy = (108 + u(-8, 8)) * k;
  const double la = u(36, 46) * k, lb = u(28, 36) * k, lrot = u(-0.4, 0.4), llevel = u(0.52, 0.58);

  const double scx = (176 + u(-8, 8)) * k, scy = (96 + u(-8, 8)) * k;
  const double sr = u(22, 28) * k, sp1 = u(0, 2 * std::numbers::pi), sp2 = u(0, 2 * std::numbers::pi);
  const double slevel = u(0.72, 0.78);

  std::array<double, 2> kcx{(96 + u(-6, 6)) * k, (160 + u(-6, 6)) * k};
  std::array<double, 2> kcy{(176 + u(-6, 6)) * k, (176 + u(-6, 6)) * k};
  std::array<double, 2> kr{u(18, 22) * k, u(18, 22) * k};
  const double klevel = u(0.88, 0.95);

  if (!omitted("liver")) {
    const double c = std::cos(lrot), s = std::sin(lrot);
    paint(0, llevel, lcx, lcy, std::max(la, lb), [&](double px, double py) {
      const double dx = px - lcx, dy = py - lcy;
      const double rx = (c * dx + s * dy) / la, ry = (-s * dx + c * dy) / lb;
      return rx * rx + ry * ry <= 1.0;
    });
  }
  if (!omitted("spleen")) {
    paint(1, slevel, scx, scy, 1.2 * sr, [&](double px, double py) {
      const double dx = px - scx, dy = py - scy;
      const double th = std::atan2(dy, dx);
      const double r = sr * (1.0 + 0.12 * std::sin(2 * th + sp1) + 0.08 * std::sin(3 * th + sp2));
      return dx * dx + dy * dy <= r * r;
    });
  }
  if (!omitted("kidneys")) {
    for (std::size_t i = 0; i < 2; ++i) {
      paint(2, klevel, kcx[i], kcy[i], kr[i], [&, i](double px, double py) {
        // Disk minus an offset disk on the medial side.
        const double side = i == 0 ? 1.0 : -1.0;
        const double dx = px - kcx[i], dy = py - kcy[i];
        const double hx = px - (kcx[i] + side * 0.75 * kr[i]), hy = py - kcy[i];
        const double inner = 0.6 * kr[i];
        return dx * dx + dy * dy <= kr[i] * kr[i] && hx * hx + hy * hy > inner * inner;
      });
    }
  }

  SyntheticScene scene;
  scene.seed = seed;
  scene.image = GrayImage(n, n);
  for (std::size_t i = 0; i < n * n; ++i) {
    const double v = intensity[i] + (label[i] >= 1 ? normal(rng, 0.0, cfg.noise_std) : 0.0);
    scene.image.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  for (std::size_t i = 0; i < cfg.outlier_count; ++i) {
    const auto idx = static_cast<std::size_t>(u(0, static_cast<double>(n * n)));
    scene.image.pixels[std::min(idx, n * n - 1)] = 1.0f;
  }
  for (std::size_t o = 0; o < kOrganClasses.size(); ++o) {
    if (omitted(kOrganClasses[o])) continue;
    BinaryMask m(n, n);
    for (std::size_t i = 0; i < n * n; ++i) m.bits[i] = label[i] == static_cast<int>(o) + 2 ? 1 : 0;
    if (m.empty()) throw Error("generated organ " + kOrganClasses[o] + " is empty");
    scene.organ_masks.emplace(kOrganClasses[o], std::move(m));
  }
  return scene;
}

}  // namespace plka
