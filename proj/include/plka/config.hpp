#pragma once

// Run configuration: one JSON document holding every experiment knob.
// Missing keys take defaults; unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "plka/data/episodes.hpp"
#include "plka/error.hpp"
#include "plka/model.hpp"

namespace plka {

struct OptimConfig {
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double clip_norm = 1.0;  // 0 disables
  double weight_decay = 0.0;

  bool operator==(const OptimConfig&) const = default;
};

struct EvalConfig {
  SplitMode split = SplitMode::kSetting2;
  std::string held_out = "spleen";
  std::size_t episodes = 20;  // per class and repetition
  std::size_t repeats = 3;
  std::uint64_t seed = 7;

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t steps = 2000;
  std::size_t checkpoint_every = 500;  // 0: only the final checkpoint
  std::size_t eval_every = 500;        // 0: no in-training evaluation
  std::size_t eval_every_episodes = 8; // held-out episodes per in-training evaluation
  OptimConfig optim;
  ModelConfig model;
  EpisodeConfig episodes;
  EvalConfig eval;
  std::string out_dir = "run";

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid config: " + what);
}

class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: " + path_ + " must be an object");
  }

  template <typename V>
  void opt(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: " + path_ + key + " has the wrong type");
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key " + path_ + k);
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void validate(const RunConfig& c) {
  using detail::require;
  require(c.optim.learning_rate > 0 && c.optim.learning_rate <= 1, "optim.learning_rate in (0, 1]");
  require(c.optim.momentum >= 0 && c.optim.momentum < 1, "optim.momentum in [0, 1)");
  require(c.optim.clip_norm >= 0, "optim.clip_norm >= 0");
  require(c.optim.weight_decay >= 0 && c.optim.weight_decay < 1, "optim.weight_decay in [0, 1)");
  require(c.steps <= 10'000'000, "steps <= 1e7");
  require(c.model.channels >= 2 && c.model.channels <= 256, "model.channels in [2, 256]");
  require(c.model.lka_kernel % 2 == 1 && c.model.lka_kernel <= 15, "model.lka_kernel odd and <= 15");
  require(c.model.lka_dilation >= 1 && c.model.lka_dilation <= 8, "model.lka_dilation in [1, 8]");
  require(c.model.score_scale > 0 && c.model.score_scale <= 100, "model.score_scale in (0, 100]");
  require(c.model.fusion_alpha > 0 && c.model.fusion_alpha < 1, "model.fusion_alpha in (0, 1)");
  const auto& e = c.episodes;
  require(e.image_size >= 32 && e.image_size % 8 == 0, "episodes.image_size >= 32 and a multiple of 8");
  require(e.superpixel_segments >= 1, "episodes.superpixel_segments >= 1");
  require(e.min_segment_size >= 1, "episodes.min_segment_size >= 1");
  require(e.min_segment_size * e.superpixel_segments <= e.image_size * e.image_size,
          "episodes.min_segment_size * superpixel_segments <= pixel count");
  require(e.slic_compactness > 0, "episodes.slic_compactness > 0");
  const auto& p = e.perturb;
  require(p.rotation_deg >= 0 && p.rotation_deg <= 180, "perturb.rotation_deg in [0, 180]");
  require(p.translation_px >= 0, "perturb.translation_px >= 0");
  require(p.scale_min > 0 && p.scale_min <= p.scale_max, "0 < perturb.scale_min <= scale_max");
  require(p.gamma_min > 0 && p.gamma_min <= p.gamma_max, "0 < perturb.gamma_min <= gamma_max");
  require(is_organ_class(c.eval.held_out), "eval.held_out names an organ class");
  require(c.eval.episodes >= 1, "eval.episodes >= 1");
  require(c.eval.repeats >= 1, "eval.repeats >= 1");
  require(!c.out_dir.empty(), "out_dir non-empty");
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& p = c.episodes.perturb;
  return {
      {"seed", c.seed},
      {"steps", c.steps},
      {"checkpoint_every", c.checkpoint_every},
      {"eval_every", c.eval_every},
      {"eval_every_episodes", c.eval_every_episodes},
      {"optim",
       {{"learning_rate", c.optim.learning_rate},
        {"momentum", c.optim.momentum},
        {"clip_norm", c.optim.clip_norm},
        {"weight_decay", c.optim.weight_decay}}},
      {"model",
       {{"channels", c.model.channels},
        {"lka_kernel", c.model.lka_kernel},
        {"lka_dilation", c.model.lka_dilation},
        {"use_attention", c.model.use_attention},
        {"score_scale", c.model.score_scale},
        {"fusion_alpha", c.model.fusion_alpha}}},
      {"episodes",
       {{"superpixel_segments", c.episodes.superpixel_segments},
        {"min_segment_size", c.episodes.min_segment_size},
        {"slic_compactness", c.episodes.slic_compactness},
        {"image_size", c.episodes.image_size},
        {"scene_pool", c.episodes.scene_pool},
        {"perturb",
         {{"rotation_deg", p.rotation_deg},
          {"translation_px", p.translation_px},
          {"scale_min", p.scale_min},
          {"scale_max", p.scale_max},
          {"gamma_min", p.gamma_min},
          {"gamma_max", p.gamma_max}}}}},
      {"eval",
       {{"split", to_string(c.eval.split)},
        {"held_out", c.eval.held_out},
        {"episodes", c.eval.episodes},
        {"repeats", c.eval.repeats},
        {"seed", c.eval.seed}}},
      {"out_dir", c.out_dir},
  };
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::ObjectReader top(j, "");
  top.opt("seed", c.seed);
  top.opt("steps", c.steps);
  top.opt("checkpoint_every", c.checkpoint_every);
  top.opt("eval_every", c.eval_every);
  top.opt("eval_every_episodes", c.eval_every_episodes);
  top.opt("out_dir", c.out_dir);
  if (const auto* o = top.child("optim")) {
    detail::ObjectReader r(*o, "optim.");
    r.opt("learning_rate", c.optim.learning_rate);
    r.opt("momentum", c.optim.momentum);
    r.opt("clip_norm", c.optim.clip_norm);
    r.opt("weight_decay", c.optim.weight_decay);
    r.finish();
  }
  if (const auto* m = top.child("model")) {
    detail::ObjectReader r(*m, "model.");
    r.opt("channels", c.model.channels);
    r.opt("lka_kernel", c.model.lka_kernel);
    r.opt("lka_dilation", c.model.lka_dilation);
    r.opt("use_attention", c.model.use_attention);
    r.opt("score_scale", c.model.score_scale);
    r.opt("fusion_alpha", c.model.fusion_alpha);
    r.finish();
  }
  if (const auto* e = top.child("episodes")) {
    detail::ObjectReader r(*e, "episodes.");
    r.opt("superpixel_segments", c.episodes.superpixel_segments);
    r.opt("min_segment_size", c.episodes.min_segment_size);
    r.opt("slic_compactness", c.episodes.slic_compactness);
    r.opt("image_size", c.episodes.image_size);
    r.opt("scene_pool", c.episodes.scene_pool);
    if (const auto* p = r.child("perturb")) {
      detail::ObjectReader rp(*p, "episodes.perturb.");
      auto& pc = c.episodes.perturb;
      rp.opt("rotation_deg", pc.rotation_deg);
      rp.opt("translation_px", pc.translation_px);
      rp.opt("scale_min", pc.scale_min);
      rp.opt("scale_max", pc.scale_max);
      rp.opt("gamma_min", pc.gamma_min);
      rp.opt("gamma_max", pc.gamma_max);
      rp.finish();
    }
    r.finish();
  }
  if (const auto* ev = top.child("eval")) {
    detail::ObjectReader r(*ev, "eval.");
    std::string split = to_string(c.eval.split);
    r.opt("split", split);
    c.eval.split = parse_split_mode(split);
    r.opt("held_out", c.eval.held_out);
    r.opt("episodes", c.eval.episodes);
    r.opt("repeats", c.eval.repeats);
    r.opt("seed", c.eval.seed);
    r.finish();
  }
  top.finish();
  validate(c);
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

inline std::string serialize(const RunConfig& c) { return to_json(c).dump(2); }

}  // namespace plka
