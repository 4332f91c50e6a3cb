#pragma once

// Episode construction: self-supervised pseudo episodes from superpixels,
// real-mask evaluation episodes, input preprocessing, and the JSON-lines
// episode manifest.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plka/data/image.hpp"
#include "plka/data/scene.hpp"
#include "plka/data/superpixels.hpp"
#include "plka/rng.hpp"
#include "plka/tensor.hpp"

namespace plka {

enum class EpisodeMode { kPseudo, kReal };

inline const char* to_string(EpisodeMode m) { return m == EpisodeMode::kPseudo ? "pseudo" : "real"; }

struct Episode {
  GrayImage support_image;
  BinaryMask support_mask;
  GrayImage query_image;
  BinaryMask query_mask;
  std::string class_id;
  EpisodeMode mode = EpisodeMode::kPseudo;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Nearest-rank percentile, q in [0, 100].
inline float percentile(std::vector<float> values, double q) {
  if (values.empty()) throw ConfigError("percentile of empty sample");
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n) - 1;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank), values.end());
  return values[rank];
}

inline constexpr double kClipPercentile = 99.5;

// Clips the bright tail above the 99.5th percentile and rescales to [0, 1].
// A range that collapses to zero leaves the image unscaled.
inline GrayImage clip_and_rescale(const GrayImage& img) {
  const float hi = percentile(img.pixels, kClipPercentile);
  const float lo = *std::min_element(img.pixels.begin(), img.pixels.end());
  if (!(hi > lo)) return img;
  GrayImage out = img;
  const float inv = 1.0f / (hi - lo);
  for (auto& v : out.pixels) v = (std::min(v, hi) - lo) * inv;
  return out;
}

// Gray slice -> 3 x H x W tensor with identical channels.
template <std::floating_point T>
Tensor<T> preprocess(const GrayImage& img) {
  const auto clipped = clip_and_rescale(img);
  const std::size_t hw = clipped.size();
  std::vector<T> data(3 * hw);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < hw; ++i) data[c * hw + i] = static_cast<T>(clipped.pixels[i]);
  }
  return Tensor<T>::from({3, img.height, img.width}, std::move(data));
}

template <std::floating_point T>
Tensor<T> mask_tensor(const BinaryMask& m) {
  std::vector<T> data(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) data[i] = static_cast<T>(m.bits[i]);
  return Tensor<T>::from({m.height, m.width}, std::move(data));
}

// ---------------------------------------------------------------------------
// Query perturbation
// ---------------------------------------------------------------------------

struct PerturbConfig {
  double rotation_deg = 10.0;
  double translation_px = 8.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double gamma_min = 0.8;
  double gamma_max = 1.25;

  bool operator==(const PerturbConfig&) const = default;
};

// Similarity transform about the image center followed by a gamma curve.
struct Perturbation {
  double angle_rad = 0.0;
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;
  double gamma = 1.0;

  static Perturbation identity() { return {}; }

  static Perturbation sample(Rng& rng, const PerturbConfig& cfg) {
    Perturbation p;
    const double max_rad = cfg.rotation_deg * std::numbers::pi / 180.0;
    p.angle_rad = uniform(rng, -max_rad, max_rad);
    p.scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    p.tx = uniform(rng, -cfg.translation_px, cfg.translation_px);
    p.ty = uniform(rng, -cfg.translation_px, cfg.translation_px);
    // Gamma sampled log-uniformly so 0.8 and 1.25 are equally likely.
    p.gamma = std::exp(uniform(rng, std::log(cfg.gamma_min), std::log(cfg.gamma_max)));
    return p;
  }

  // Source coordinate of destination pixel center (x, y).
  void source(double x, double y, double cx, double cy, double& sx, double& sy) const {
    const double dx = (x - cx - tx) / scale, dy = (y - cy - ty) / scale;
    const double c = std::cos(angle_rad), s = std::sin(angle_rad);
    sx = c * dx + s * dy + cx;
    sy = -s * dx + c * dy + cy;
  }
};

// Bilinear warp with zero fill, then gamma.
inline GrayImage warp_image(const GrayImage& img, const Perturbation& p) {
  GrayImage out(img.height, img.width);
  const double cx = static_cast<double>(img.width) / 2.0, cy = static_cast<double>(img.height) / 2.0;
  auto sample = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(img.height) ||
        xx >= static_cast<std::ptrdiff_t>(img.width)) {
      return 0.0;
    }
    return img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
  };
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      double sx, sy;
      p.source(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, cx, cy, sx, sy);
      sx -= 0.5;
      sy -= 0.5;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const auto ix = static_cast<std::ptrdiff_t>(fx), iy = static_cast<std::ptrdiff_t>(fy);
      const double v = (1 - ay) * ((1 - ax) * sample(iy, ix) + ax * sample(iy, ix + 1)) +
                       ay * ((1 - ax) * sample(iy + 1, ix) + ax * sample(iy + 1, ix + 1));
      out.at(y, x) = static_cast<float>(std::pow(std::clamp(v, 0.0, 1.0), p.gamma));
    }
  }
  return out;
}

// Nearest-neighbor warp, so the result stays binary.
inline BinaryMask warp_mask(const BinaryMask& mask, const Perturbation& p) {
  BinaryMask out(mask.height, mask.width);
  const double cx = static_cast<double>(mask.width) / 2.0, cy = static_cast<double>(mask.height) / 2.0;
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      double sx, sy;
      p.source(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, cx, cy, sx, sy);
      const double fx = std::floor(sx), fy = std::floor(sy);
      if (fx < 0 || fy < 0 || fx >= static_cast<double>(mask.width) || fy >= static_cast<double>(mask.height)) continue;
      out.at(y, x) = mask.at(static_cast<std::size_t>(fy), static_cast<std::size_t>(fx));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

// Segments darker than this mean intensity lie outside the body and are not
// used as pseudo classes.
inline constexpr double kPseudoMinMeanIntensity = 0.05;
inline constexpr int kPseudoRetries = 16;

inline std::vector<std::int32_t> pseudo_candidates(const GrayImage& img, const SuperpixelMap& map) {
  std::vector<double> total(map.segment_count, 0.0);
  std::vector<std::size_t> count(map.segment_count, 0);
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    const auto l = static_cast<std::size_t>(map.labels[i]);
    total[l] += img.pixels[i];
    ++count[l];
  }
  std::vector<std::int32_t> out;
  for (std::size_t s = 0; s < map.segment_count; ++s) {
    if (count[s] && total[s] / static_cast<double>(count[s]) > kPseudoMinMeanIntensity) {
      out.push_back(static_cast<std::int32_t>(s));
    }
  }
  return out;
}

// Support = (image, one superpixel); query = perturbed copy of both.
inline Episode make_pseudo_episode(const GrayImage& image, const SuperpixelMap& map, std::uint64_t seed,
                                   const PerturbConfig& perturb = {}, bool identity_transform = false) {
  if (map.labels.size() != image.size() || map.segment_count == 0) {
    throw ConfigError("make_pseudo_episode: superpixel map does not match image");
  }
  auto candidates = pseudo_candidates(image, map);
  if (candidates.empty()) throw Error("make_pseudo_episode: no usable superpixel");
  Rng rng(seed);
  for (int attempt = 0; attempt < kPseudoRetries; ++attempt) {
    const auto pick = candidates[static_cast<std::size_t>(uniform(rng, 0, static_cast<double>(candidates.size()))) %
                                 candidates.size()];
    const auto p = identity_transform ? Perturbation::identity() : Perturbation::sample(rng, perturb);
    Episode ep;
    ep.support_image = image;
    ep.support_mask = map.segment_mask(pick);
    ep.query_mask = warp_mask(ep.support_mask, p);
    if (ep.query_mask.empty()) continue;
    ep.query_image = identity_transform ? image : warp_image(image, p);
    ep.class_id = "superpixel:" + std::to_string(pick);
    ep.mode = EpisodeMode::kPseudo;
    ep.seed = seed;
    return ep;
  }
  throw Error("make_pseudo_episode: warped mask empty after retries");
}

inline Episode make_eval_episode(const SyntheticScene& support, const SyntheticScene& query, const std::string& cls) {
  if (!support.has(cls) || !query.has(cls)) throw ConfigError("class " + cls + " missing from eval scene");
  Episode ep;
  ep.support_image = support.image;
  ep.support_mask = support.organ_masks.at(cls);
  ep.query_image = query.image;
  ep.query_mask = query.organ_masks.at(cls);
  ep.class_id = cls;
  ep.mode = EpisodeMode::kReal;
  ep.seed = query.seed;
  return ep;
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

enum class SplitMode { kSetting1, kSetting2 };

inline const char* to_string(SplitMode m) { return m == SplitMode::kSetting1 ? "setting1-like" : "setting2-like"; }

inline SplitMode parse_split_mode(const std::string& s) {
  if (s == "setting1-like") return SplitMode::kSetting1;
  if (s == "setting2-like") return SplitMode::kSetting2;
  throw ConfigError("unknown split mode '" + s + "' (expected setting1-like or setting2-like)");
}

struct EpisodeConfig {
  std::size_t superpixel_segments = 12;
  std::size_t min_segment_size = 200;
  double slic_compactness = 0.06;
  PerturbConfig perturb;
  std::size_t image_size = 256;
  // Training scenes are drawn from a fixed pool of this many scenes with
  // precomputed superpixels; 0 renders a fresh scene per episode.
  std::size_t scene_pool = 128;

  bool operator==(const EpisodeConfig&) const = default;
};

struct EmissionRecord {
  std::uint64_t episode_id;
  std::string class_id;
  std::uint64_t scene_seed;
  std::uint64_t seed;
  // Organ classes present in the scene the episode was cut from.
  std::vector<std::string> scene_classes;
};

// Training episodes are a pure function of (config, master seed, index).
// Under setting 2 the held-out class is never rendered into training scenes.
class PseudoEpisodeSampler {
 public:
  PseudoEpisodeSampler(std::uint64_t master_seed, EpisodeConfig cfg, SplitMode split, std::string held_out)
      : master_(master_seed), cfg_(std::move(cfg)), split_(split), held_out_(std::move(held_out)) {
    if (split_ == SplitMode::kSetting2 && !is_organ_class(held_out_)) {
      throw ConfigError("unknown held-out class " + held_out_);
    }
    pool_.reserve(cfg_.scene_pool);
    for (std::size_t slot = 0; slot < cfg_.scene_pool; ++slot) pool_.push_back(render(pool_seed(slot)));
  }

  SceneConfig scene_config() const {
    SceneConfig sc;
    sc.size = cfg_.image_size;
    if (split_ == SplitMode::kSetting2) sc.omit = {held_out_};
    return sc;
  }

  Episode episode(std::uint64_t index, EmissionRecord* record = nullptr) const {
    const auto draw = derive_seed(master_, Stream::kTrain, {index, 0});
    const auto episode_seed = derive_seed(master_, Stream::kTrain, {index, 1});
    std::optional<Entry> fresh;
    const Entry* entry = nullptr;
    if (pool_.empty()) {
      fresh = render(draw);
      entry = &*fresh;
    } else {
      entry = &pool_[draw % pool_.size()];
    }
    auto ep = make_pseudo_episode(entry->scene.image, entry->map, episode_seed, cfg_.perturb);
    if (record != nullptr) {
      record->episode_id = index;
      record->class_id = ep.class_id;
      record->scene_seed = entry->scene.seed;
      record->seed = episode_seed;
      record->scene_classes.clear();
      for (const auto& [cls, _] : entry->scene.organ_masks) record->scene_classes.push_back(cls);
    }
    return ep;
  }

 private:
  struct Entry {
    SyntheticScene scene;
    SuperpixelMap map;
  };

  std::uint64_t pool_seed(std::size_t slot) const { return derive_seed(master_, Stream::kTrain, {slot, 2}); }

  Entry render(std::uint64_t scene_seed) const {
    Entry e{generate_scene(scene_seed, scene_config()), {}};
    e.map = superpixels(e.scene.image, cfg_.superpixel_segments, cfg_.min_segment_size,
                        SlicOptions{10, cfg_.slic_compactness});
    return e;
  }

  std::uint64_t master_;
  EpisodeConfig cfg_;
  SplitMode split_;
  std::string held_out_;
  std::vector<Entry> pool_;
};

// Evaluation episodes pair two independent scenes; indexed by
// (repetition, class, index).
class EvalEpisodeSampler {
 public:
  EvalEpisodeSampler(std::uint64_t master_seed, std::size_t image_size = 256)
      : master_(master_seed), image_size_(image_size) {}

  Episode episode(std::uint64_t repetition, const std::string& cls, std::uint64_t index) const {
    const auto cls_idx = static_cast<std::uint64_t>(
        std::find(kOrganClasses.begin(), kOrganClasses.end(), cls) - kOrganClasses.begin());
    if (cls_idx >= kOrganClasses.size()) throw ConfigError("unknown eval class " + cls);
    SceneConfig sc;
    sc.size = image_size_;
    const auto a = generate_scene(derive_seed(master_, Stream::kEval, {repetition, cls_idx, index, 0}), sc);
    const auto b = generate_scene(derive_seed(master_, Stream::kEval, {repetition, cls_idx, index, 1}), sc);
    return make_eval_episode(a, b, cls);
  }

 private:
  std::uint64_t master_;
  std::size_t image_size_;
};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::uint64_t episode_id = 0;
  std::string class_id;
  std::string support_path;
  std::string query_path;
  std::string mode;
  std::uint64_t seed = 0;

  bool operator==(const ManifestEntry&) const = default;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
  return {{"episode_id", e.episode_id}, {"class", e.class_id},   {"support_path", e.support_path},
          {"query_path", e.query_path}, {"mode", e.mode},        {"seed", e.seed}};
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
  try {
    return {j.at("episode_id").get<std::uint64_t>(), j.at("class").get<std::string>(),
            j.at("support_path").get<std::string>(), j.at("query_path").get<std::string>(),
            j.at("mode").get<std::string>(),         j.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest entry: ") + e.what());
  }
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(manifest_entry_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(std::string("malformed manifest line: ") + e.what());
    }
  }
  return out;
}

// Writes support/query images and masks as PGM and returns the manifest line.
// Support images go to <dir>/ep<id>_support.pgm with mask ep<id>_support_mask.pgm;
// likewise for the query.
inline ManifestEntry export_episode(const std::filesystem::path& dir, std::uint64_t episode_id, const Episode& ep) {
  std::filesystem::create_directories(dir);
  const std::string base = "ep" + std::to_string(episode_id);
  write_pgm(dir / (base + "_support.pgm"), ep.support_image);
  write_pgm(dir / (base + "_support_mask.pgm"), ep.support_mask);
  write_pgm(dir / (base + "_query.pgm"), ep.query_image);
  write_pgm(dir / (base + "_query_mask.pgm"), ep.query_mask);
  return {episode_id, ep.class_id, base + "_support.pgm", base + "_query.pgm", to_string(ep.mode), ep.seed};
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open manifest " + path.string() + " for writing");
  for (const auto& e : entries) os << to_json(e).dump() << '\n';
  if (!os) throw IoError("failed writing manifest " + path.string());
}

}  // namespace plka
