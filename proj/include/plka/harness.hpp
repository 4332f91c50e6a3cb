#pragma once

// Training, evaluation, mask dumps and the fusion-weight sweep behind the
// command-line tool.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <nlohmann/json.hpp>

#include "plka/checkpoint.hpp"
#include "plka/config.hpp"
#include "plka/data/episodes.hpp"
#include "plka/fusion_loss.hpp"
#include "plka/model.hpp"
#include "plka/optim.hpp"

namespace plka {

// Keeps large activation buffers on the heap free lists instead of mapping
// and unmapping them on every step.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

inline Model<float> init_model(const RunConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, Stream::kInit, {}));
  return Model<float>(cfg.model, rng);
}

inline SgdMomentum<float> make_optimizer(const RunConfig& cfg) {
  return SgdMomentum<float>(cfg.optim.learning_rate, cfg.optim.momentum, cfg.optim.clip_norm,
                            cfg.optim.weight_decay);
}

inline PseudoEpisodeSampler make_train_sampler(const RunConfig& cfg) {
  return PseudoEpisodeSampler(cfg.seed, cfg.episodes, cfg.eval.split, cfg.eval.held_out);
}

// Classes scored at evaluation: the held-out class under setting 2, every
// class under setting 1.
inline std::vector<std::string> eval_classes(const EvalConfig& cfg) {
  if (cfg.split == SplitMode::kSetting2) return {cfg.held_out};
  return {kOrganClasses.begin(), kOrganClasses.end()};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Maps an episode to a binary prediction of its query mask.
using Predictor = std::function<BinaryMask(const Episode&)>;

inline Predictor model_predictor(const Model<float>& model) {
  return [&model](const Episode& ep) {
    NoGradGuard no_grad;
    const auto out = model.forward(preprocess<float>(ep.support_image), mask_tensor<float>(ep.support_mask),
                                   preprocess<float>(ep.query_image));
    return binarize(out.fused.fg);
  };
}

inline Predictor oracle_predictor() {
  return [](const Episode& ep) { return ep.query_mask; };
}

inline Predictor zero_predictor() {
  return [](const Episode& ep) { return BinaryMask(ep.query_mask.height, ep.query_mask.width); };
}

struct ClassScore {
  std::string cls;
  std::vector<double> repetition_means;
  double mean = 0;
  double std = 0;  // population deviation across repetitions
  std::size_t empty_pairs = 0;  // episodes where prediction and truth are both empty
};

struct EvalReport {
  std::vector<ClassScore> classes;
  double mean = 0;  // mean over classes

  const ClassScore& at(const std::string& cls) const {
    for (const auto& c : classes) {
      if (c.cls == cls) return c;
    }
    throw ConfigError("class " + cls + " not in report");
  }
};

inline EvalReport evaluate(const Predictor& predict, const std::vector<std::string>& classes, const EvalConfig& cfg,
                           std::size_t image_size = 256) {
  if (classes.empty()) throw ConfigError("evaluation needs at least one class");
  for (const auto& cls : classes) {
    if (!is_organ_class(cls)) throw ConfigError("class " + cls + " is not in the evaluation set");
  }
  EvalEpisodeSampler sampler(cfg.seed, image_size);
  EvalReport report;
  for (const auto& cls : classes) {
    ClassScore score;
    score.cls = cls;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
      double acc = 0;
      for (std::size_t i = 0; i < cfg.episodes; ++i) {
        const auto ep = sampler.episode(r, cls, i);
        const auto pred = predict(ep);
        if (pred.empty() && ep.query_mask.empty()) ++score.empty_pairs;
        acc += dice(pred, ep.query_mask);
      }
      score.repetition_means.push_back(acc / static_cast<double>(cfg.episodes));
    }
    double m = 0;
    for (const double v : score.repetition_means) m += v;
    m /= static_cast<double>(score.repetition_means.size());
    double var = 0;
    for (const double v : score.repetition_means) var += (v - m) * (v - m);
    score.mean = m;
    score.std = std::sqrt(var / static_cast<double>(score.repetition_means.size()));
    report.mean += m;
    report.classes.push_back(std::move(score));
  }
  report.mean /= static_cast<double>(report.classes.size());
  return report;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"class", c.cls}, {"mean", c.mean}, {"std", c.std}, {"repetitions", c.repetition_means},
                       {"empty_pairs", c.empty_pairs}});
  }
  return {{"classes", classes}, {"mean", r.mean}};
}

inline std::string format_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "class" << std::right << std::setw(16) << "dice" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& c : r.classes) {
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(2) << c.mean << " +/- " << c.std;
    os << std::left << std::setw(10) << c.cls << std::right << std::setw(16) << cell.str() << '\n';
  }
  os << std::left << std::setw(10) << "mean" << std::right << std::setw(16) << r.mean << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::ostream* progress = nullptr;  // human-readable status lines
  bool write_files = true;           // metrics log, config and checkpoints under out_dir
};

struct TrainResult {
  Checkpoint checkpoint;  // state after the last step
  std::size_t skipped_episodes = 0;
  std::vector<double> losses;  // total loss per step, NaN for skipped steps
};

inline std::filesystem::path checkpoint_path(const RunConfig& cfg, std::uint64_t step) {
  return std::filesystem::path(cfg.out_dir) / ("ckpt_" + std::to_string(step) + ".plkc");
}

inline std::filesystem::path final_checkpoint_path(const RunConfig& cfg) {
  return std::filesystem::path(cfg.out_dir) / "final.plkc";
}

inline std::filesystem::path metrics_path(const RunConfig& cfg) {
  return std::filesystem::path(cfg.out_dir) / "metrics.jsonl";
}

inline TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {}) {
  validate(cfg);
  auto model = init_model(cfg);
  auto opt = make_optimizer(cfg);
  const auto sampler = make_train_sampler(cfg);

  std::ofstream log;
  if (opts.write_files) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create " + cfg.out_dir + ": " + ec.message());
    std::ofstream(std::filesystem::path(cfg.out_dir) / "config.json") << serialize(cfg) << '\n';
    log.open(metrics_path(cfg), std::ios::trunc);
    if (!log) throw IoError("cannot open " + metrics_path(cfg).string());
  }
  auto emit = [&](const nlohmann::json& j) {
    if (log.is_open()) log << j.dump() << '\n';
  };

  TrainResult result;
  const auto classes = eval_classes(cfg.eval);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto ep = sampler.episode(step);
    try {
      const auto out = model.forward(preprocess<float>(ep.support_image), mask_tensor<float>(ep.support_mask),
                                     preprocess<float>(ep.query_image), mask_tensor<float>(ep.query_mask));
      const auto& loss = *out.loss;
      model.params().zero_grad();
      loss.total.backward();
      const double grad_norm = opt.step(model.params());
      if (!std::isfinite(grad_norm)) throw NumericError("non-finite gradient");
      result.losses.push_back(loss.total.item());
      emit({{"type", "step"},
            {"step", step},
            {"episode", step},
            {"seg", loss.seg.item()},
            {"reg", loss.reg.item()},
            {"total", loss.total.item()},
            {"grad_norm", grad_norm},
            {"align_degenerate", out.align_degenerate}});
    } catch (const EmptyMaskError&) {
      ++result.skipped_episodes;
      result.losses.push_back(std::nan(""));
      emit({{"type", "skip"}, {"step", step}, {"episode", step}});
    } catch (const NumericError& e) {
      throw NumericError("training aborted at episode " + std::to_string(step) + ": " + e.what());
    }
    const std::size_t done = step + 1;
    if (opts.write_files && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps) {
      save_checkpoint(checkpoint_path(cfg, done), make_checkpoint(cfg, done, model, opt));
    }
    if (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
      EvalConfig quick = cfg.eval;
      quick.repeats = 1;
      quick.episodes = cfg.eval_every_episodes;
      const auto report = evaluate(model_predictor(model), classes, quick, cfg.episodes.image_size);
      for (const auto& c : report.classes) {
        emit({{"type", "eval"}, {"step", done}, {"class", c.cls}, {"dice", c.mean}});
      }
      if (opts.progress) {
        *opts.progress << "step " << done << " loss " << result.losses.back() << " eval dice " << report.mean
                       << '\n';
      }
    }
  }
  result.checkpoint = make_checkpoint(cfg, cfg.steps, model, opt);
  if (opts.write_files) save_checkpoint(final_checkpoint_path(cfg), result.checkpoint);
  return result;
}

// ---------------------------------------------------------------------------
// Fusion-weight sweep
// ---------------------------------------------------------------------------

inline const std::vector<double> kDefaultSweepAlphas = {0.2, 0.4, 0.6, 0.8, 0.9};

struct SweepRow {
  double alpha;
  EvalReport report;
};

inline std::vector<SweepRow> alpha_sweep(Model<float>& model, const std::vector<double>& alphas,
                                         const EvalConfig& cfg, std::size_t image_size = 256) {
  const double original = model.config().fusion_alpha;
  std::vector<SweepRow> rows;
  for (const double a : alphas) {
    FusionConfig{a}.validate();
    model.set_fusion_alpha(a);
    rows.push_back({a, evaluate(model_predictor(model), eval_classes(cfg), cfg, image_size)});
  }
  model.set_fusion_alpha(original);
  return rows;
}

inline std::string format_sweep(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  if (rows.empty()) return {};
  os << std::left << std::setw(8) << "alpha";
  for (const auto& c : rows.front().report.classes) os << std::right << std::setw(16) << c.cls;
  os << std::right << std::setw(10) << "mean" << '\n';
  for (const auto& row : rows) {
    os << std::left << std::setw(8) << std::setprecision(2) << std::fixed << row.alpha;
    for (const auto& c : row.report.classes) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(2) << c.mean << " +/- " << c.std;
      os << std::right << std::setw(16) << cell.str();
    }
    os << std::right << std::setw(10) << row.report.mean << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const std::vector<SweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& row : rows) out.push_back({{"alpha", row.alpha}, {"report", to_json(row.report)}});
  return out;
}

// ---------------------------------------------------------------------------
// Mask dumps
// ---------------------------------------------------------------------------

// Evaluation episode id -> (class, index) at repetition 0:
// id = class_position * episodes + index, over eval_classes(cfg).
inline std::pair<std::string, std::size_t> dump_episode_key(const EvalConfig& cfg, std::uint64_t id) {
  const auto classes = eval_classes(cfg);
  if (id >= classes.size() * cfg.episodes) {
    throw ConfigError("unknown episode id " + std::to_string(id) + " (valid: 0.." +
                      std::to_string(classes.size() * cfg.episodes - 1) + ")");
  }
  return {classes[id / cfg.episodes], static_cast<std::size_t>(id % cfg.episodes)};
}

// Writes ep<id>_{query,truth,fused,path64,path32}.pgm per episode and returns
// the paths in that order.
inline std::vector<std::filesystem::path> dump_masks(const Model<float>& model, const EvalConfig& cfg,
                                                     const std::vector<std::uint64_t>& ids,
                                                     const std::filesystem::path& dir,
                                                     std::size_t image_size = 256) {
  for (const auto id : ids) dump_episode_key(cfg, id);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  EvalEpisodeSampler sampler(cfg.seed, image_size);
  std::vector<std::filesystem::path> written;
  for (const auto id : ids) {
    const auto [cls, index] = dump_episode_key(cfg, id);
    const auto ep = sampler.episode(0, cls, index);
    NoGradGuard no_grad;
    const auto out = model.forward(preprocess<float>(ep.support_image), mask_tensor<float>(ep.support_mask),
                                   preprocess<float>(ep.query_image));
    const std::string stem = "ep" + std::to_string(id) + "_";
    auto put = [&](const std::string& name, auto&& write) {
      const auto path = dir / (stem + name + ".pgm");
      write(path.string());
      written.push_back(path);
    };
    put("query", [&](const std::string& p) { write_pgm(p, ep.query_image); });
    put("truth", [&](const std::string& p) { write_pgm(p, ep.query_mask); });
    put("fused", [&](const std::string& p) { write_pgm(p, binarize(out.fused.fg)); });
    put("path64", [&](const std::string& p) { write_pgm(p, binarize(out.paths[0].fg)); });
    put("path32", [&](const std::string& p) { write_pgm(p, binarize(out.paths[1].fg)); });
  }
  return written;
}

}  // namespace plka
