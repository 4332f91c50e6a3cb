#pragma once

// SLIC-style superpixels over (intensity, x, y): grid-seeded local k-means,
// then 4-connectivity enforcement and greedy merging of undersized segments
// into their most similar neighbor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <set>
#include <vector>

#include "plka/data/image.hpp"

namespace plka {

struct SuperpixelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;  // 0 .. segment_count-1
  std::size_t segment_count = 0;
  std::size_t min_size = 0;

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(segment_count, 0);
    for (const auto l : labels) ++s[static_cast<std::size_t>(l)];
    return s;
  }

  BinaryMask segment_mask(std::int32_t label) const {
    BinaryMask m(height, width);
    for (std::size_t i = 0; i < labels.size(); ++i) m.bits[i] = labels[i] == label ? 1 : 0;
    return m;
  }
};

struct SlicOptions {
  std::size_t iterations = 10;
  double compactness = 0.06;  // intensity distance equivalent to one grid step
};

struct SlicCenter {
  double intensity, x, y;
};

// Grid seeds: round(W/S) x round(H/S) centers with S = sqrt(HW/k).
inline std::vector<SlicCenter> slic_grid_seeds(const GrayImage& img, std::size_t k_segments) {
  const double n = static_cast<double>(img.size());
  const double step = std::sqrt(n / static_cast<double>(k_segments));
  const auto nx = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(img.width) / step)));
  const auto ny = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(img.height) / step)));
  std::vector<SlicCenter> centers;
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) {
      const double cx = (static_cast<double>(i) + 0.5) * static_cast<double>(img.width) / static_cast<double>(nx);
      const double cy = (static_cast<double>(j) + 0.5) * static_cast<double>(img.height) / static_cast<double>(ny);
      const auto px = std::min(img.width - 1, static_cast<std::size_t>(cx));
      const auto py = std::min(img.height - 1, static_cast<std::size_t>(cy));
      centers.push_back({img.at(py, px), cx, cy});
    }
  }
  return centers;
}

namespace detail {

// 4-connected components of a label field; returns component count.
inline std::size_t connected_components(const std::vector<std::int32_t>& labels, std::size_t h, std::size_t w,
                                        std::vector<std::int32_t>& comp) {
  comp.assign(labels.size(), -1);
  std::int32_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (comp[s] >= 0) continue;
    comp[s] = next;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (comp[q] < 0 && labels[q] == labels[p]) {
          comp[q] = next;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
    }
    ++next;
  }
  return static_cast<std::size_t>(next);
}

}  // namespace detail

inline SuperpixelMap superpixels(const GrayImage& img, std::size_t k_segments, std::size_t min_size,
                                 const SlicOptions& opts = {}) {
  if (k_segments < 1) throw ConfigError("superpixels: k_segments must be >= 1");
  if (min_size < 1) throw ConfigError("superpixels: min_size must be >= 1");
  if (img.size() == 0) throw ConfigError("superpixels: empty image");
  if (min_size * k_segments > img.size()) {
    throw ConfigError("superpixels: min_size * k_segments exceeds the pixel count");
  }
  const std::size_t h = img.height, w = img.width, n = img.size();
  auto centers = slic_grid_seeds(img, k_segments);
  const double step = std::sqrt(static_cast<double>(n) / static_cast<double>(k_segments));
  const double gx = static_cast<double>(w) / std::max(1.0, std::round(static_cast<double>(w) / step));
  const double gy = static_cast<double>(h) / std::max(1.0, std::round(static_cast<double>(h) / step));
  const double window = std::max(gx, gy);
  const double inv_s2 = 1.0 / (step * step);
  const double inv_m2 = 1.0 / (opts.compactness * opts.compactness);

  std::vector<std::int32_t> assign(n, 0);
  std::vector<double> best(n);
  for (std::size_t it = 0; it < opts.iterations; ++it) {
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const auto& ctr = centers[c];
      const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(ctr.y - window)));
      const auto y1 = static_cast<std::size_t>(std::min(static_cast<double>(h), std::ceil(ctr.y + window)));
      const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(ctr.x - window)));
      const auto x1 = static_cast<std::size_t>(std::min(static_cast<double>(w), std::ceil(ctr.x + window)));
      for (std::size_t y = y0; y < y1; ++y) {
        const double dy = static_cast<double>(y) + 0.5 - ctr.y;
        for (std::size_t x = x0; x < x1; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - ctr.x;
          const double di = static_cast<double>(img.pixels[y * w + x]) - ctr.intensity;
          const double d = di * di * inv_m2 + (dx * dx + dy * dy) * inv_s2;
          if (d < best[y * w + x]) {
            best[y * w + x] = d;
            assign[y * w + x] = static_cast<std::int32_t>(c);
          }
        }
      }
    }
    std::vector<double> si(centers.size(), 0), sx(centers.size(), 0), sy(centers.size(), 0);
    std::vector<std::size_t> cnt(centers.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      const auto c = static_cast<std::size_t>(assign[p]);
      si[c] += img.pixels[p];
      sx[c] += static_cast<double>(p % w) + 0.5;
      sy[c] += static_cast<double>(p / w) + 0.5;
      ++cnt[c];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (cnt[c] == 0) continue;
      const double inv = 1.0 / static_cast<double>(cnt[c]);
      centers[c] = {si[c] * inv, sx[c] * inv, sy[c] * inv};
    }
  }

  // Split clusters into 4-connected components.
  std::vector<std::int32_t> comp;
  const std::size_t regions = detail::connected_components(assign, h, w, comp);

  std::vector<std::size_t> size(regions, 0);
  std::vector<double> total(regions, 0);
  std::vector<std::set<std::int32_t>> nbrs(regions);
  for (std::size_t p = 0; p < n; ++p) {
    const auto r = comp[p];
    ++size[static_cast<std::size_t>(r)];
    total[static_cast<std::size_t>(r)] += img.pixels[p];
    const std::size_t x = p % w, y = p / w;
    if (x + 1 < w && comp[p + 1] != r) {
      nbrs[static_cast<std::size_t>(r)].insert(comp[p + 1]);
      nbrs[static_cast<std::size_t>(comp[p + 1])].insert(r);
    }
    if (y + 1 < h && comp[p + w] != r) {
      nbrs[static_cast<std::size_t>(r)].insert(comp[p + w]);
      nbrs[static_cast<std::size_t>(comp[p + w])].insert(r);
    }
  }

  // Merge undersized regions, smallest first, into the neighbor with the
  // closest mean intensity (ties: lower id). The union of two adjacent
  // connected regions stays connected.
  std::vector<std::int32_t> parent(regions);
  for (std::size_t r = 0; r < regions; ++r) parent[r] = static_cast<std::int32_t>(r);
  using Item = std::pair<std::size_t, std::int32_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  for (std::size_t r = 0; r < regions; ++r) {
    if (size[r] < min_size) queue.emplace(size[r], static_cast<std::int32_t>(r));
  }
  while (!queue.empty()) {
    const auto [sz, r] = queue.top();
    queue.pop();
    const auto ri = static_cast<std::size_t>(r);
    if (parent[ri] != r || size[ri] != sz || size[ri] >= min_size || nbrs[ri].empty()) continue;
    const double mean_r = total[ri] / static_cast<double>(size[ri]);
    std::int32_t target = -1;
    double best_diff = std::numeric_limits<double>::infinity();
    for (const auto q : nbrs[ri]) {
      const auto qi = static_cast<std::size_t>(q);
      const double diff = std::abs(total[qi] / static_cast<double>(size[qi]) - mean_r);
      if (diff < best_diff) {
        best_diff = diff;
        target = q;
      }
    }
    const auto ti = static_cast<std::size_t>(target);
    parent[ri] = target;
    size[ti] += size[ri];
    total[ti] += total[ri];
    for (const auto q : nbrs[ri]) {
      auto& qn = nbrs[static_cast<std::size_t>(q)];
      qn.erase(r);
      if (q != target) {
        qn.insert(target);
        nbrs[ti].insert(q);
      }
    }
    nbrs[ti].erase(r);
    nbrs[ri].clear();
    if (size[ti] < min_size) queue.emplace(size[ti], target);
  }

  auto find = [&](std::int32_t r) {
    while (parent[static_cast<std::size_t>(r)] != r) r = parent[static_cast<std::size_t>(r)];
    return r;
  };

  SuperpixelMap out;
  out.height = h;
  out.width = w;
  out.min_size = min_size;
  out.labels.resize(n);
  std::vector<std::int32_t> remap(regions, -1);
  std::int32_t next = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const auto root = static_cast<std::size_t>(find(comp[p]));
    if (remap[root] < 0) remap[root] = next++;
    out.labels[p] = remap[root];
  }
  out.segment_count = static_cast<std::size_t>(next);
  return out;
}

// Checks the partition contract: labels cover 0..count-1, every segment is
// 4-connected and at least min_size pixels. Empty string when valid.
inline std::string audit_superpixels(const SuperpixelMap& map) {
  if (map.labels.size() != map.height * map.width) return "label count does not match image size";
  for (const auto l : map.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= map.segment_count) return "label out of range";
  }
  const auto sizes = map.sizes();
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    if (sizes[s] == 0) return "segment " + std::to_string(s) + " is empty";
    if (sizes[s] < map.min_size) return "segment " + std::to_string(s) + " below min_size";
  }
  std::vector<std::int32_t> comp;
  const auto comps = detail::connected_components(map.labels, map.height, map.width, comp);
  if (comps != map.segment_count) return "a segment is not 4-connected";
  return {};
}

}  // namespace plka
