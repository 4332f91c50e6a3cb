// plka: train, evaluate and inspect the few-shot segmentation model.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plka/plka.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw plka::IoError("cannot open " + path + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw plka::IoError("failed writing " + path);
}

int run_train(const std::string& config_path, const std::string& out_dir, bool quiet) {
  auto cfg = config_path.empty() ? plka::RunConfig{} : plka::load_run_config(config_path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  plka::validate(cfg);
  plka::TrainOptions opts;
  if (!quiet) opts.progress = &std::cout;
  const auto result = plka::train(cfg, opts);
  std::cout << "trained " << cfg.steps << " steps (" << result.skipped_episodes << " skipped); checkpoint "
            << plka::final_checkpoint_path(cfg).string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string split;
  std::string held_out;
  std::size_t repeats = 0;
  std::size_t episodes = 0;
  std::vector<double> alphas;
  bool sweep = false;
  std::string json_out;
};

plka::EvalConfig eval_config(const plka::Checkpoint& c, const EvalArgs& a) {
  auto cfg = c.config.eval;
  if (!a.split.empty()) cfg.split = plka::parse_split_mode(a.split);
  if (!a.held_out.empty()) cfg.held_out = a.held_out;
  if (a.repeats > 0) cfg.repeats = a.repeats;
  if (a.episodes > 0) cfg.episodes = a.episodes;
  if (!plka::is_organ_class(cfg.held_out)) throw plka::ConfigError("unknown class " + cfg.held_out);
  return cfg;
}

int run_eval(const EvalArgs& a) {
  const auto ckpt = plka::load_checkpoint(a.ckpt);
  auto model = plka::model_from_checkpoint(ckpt);
  const auto cfg = eval_config(ckpt, a);
  const auto size = ckpt.config.episodes.image_size;
  if (a.sweep || !a.alphas.empty()) {
    const auto rows = plka::alpha_sweep(model, a.alphas.empty() ? plka::kDefaultSweepAlphas : a.alphas, cfg, size);
    std::cout << plka::format_sweep(rows);
    if (!a.json_out.empty()) write_json(a.json_out, plka::to_json(rows));
    return kExitOk;
  }
  const auto report = plka::evaluate(plka::model_predictor(model), plka::eval_classes(cfg), cfg, size);
  std::cout << plka::format_table(report);
  if (!a.json_out.empty()) write_json(a.json_out, plka::to_json(report));
  return kExitOk;
}

int run_gradcheck(const std::string& fault, std::size_t instances) {
  plka::GradcheckOptions opts;
  if (!fault.empty()) {
    if (fault != "gelu") throw plka::ConfigError("unknown fault '" + fault + "' (supported: gelu)");
    opts.corrupt_gelu = true;
  }
  if (instances > 0) opts.instances = instances;
  const auto report = plka::run_gradcheck(opts);
  for (const auto& r : report.results) {
    std::printf("%-26s %-4s instances=%zu max_rel_err=%.3e\n", r.op.c_str(), r.passed ? "PASS" : "FAIL", r.instances,
                r.max_rel_error);
  }
  std::printf("%zu ops, %.1f s, %s\n", report.results.size(), report.seconds, report.passed() ? "all passed" : "FAILED");
  return report.passed() ? kExitOk : kExitNumeric;
}

int run_dump(const std::string& ckpt_path, const std::vector<std::uint64_t>& ids, const std::string& out) {
  const auto ckpt = plka::load_checkpoint(ckpt_path);
  const auto model = plka::model_from_checkpoint(ckpt);
  const auto files = plka::dump_masks(model, ckpt.config.eval, ids, out, ckpt.config.episodes.image_size);
  for (const auto& f : files) std::cout << f.string() << '\n';
  return kExitOk;
}

int run_export(const std::string& config_path, std::size_t count, const std::string& out) {
  const auto cfg = config_path.empty() ? plka::RunConfig{} : plka::load_run_config(config_path);
  const auto sampler = plka::make_train_sampler(cfg);
  std::vector<plka::ManifestEntry> entries;
  for (std::size_t i = 0; i < count; ++i) entries.push_back(plka::export_episode(out, i, sampler.episode(i)));
  plka::write_manifest(std::filesystem::path(out) / "manifest.jsonl", entries);
  std::cout << "wrote " << count << " episodes to " << out << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  plka::tune_allocator();
  CLI::App app{"Few-shot organ segmentation with large-kernel attention"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "episodic training on pseudo-labelled synthetic scenes");
  train->add_option("--config", config_path, "run config JSON (defaults when omitted)")->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "output directory (overrides out_dir)");
  train->add_flag("--quiet", quiet, "suppress progress lines");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "per-class Dice on held-out evaluation episodes");
  eval->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
  eval->add_option("--split", ea.split, "setting1-like or setting2-like");
  eval->add_option("--held-out", ea.held_out, "held-out class under setting2-like");
  eval->add_option("--repeats", ea.repeats, "seeded repetitions");
  eval->add_option("--episodes", ea.episodes, "episodes per class and repetition");
  eval->add_flag("--sweep", ea.sweep, "sweep the fusion weight over the default grid");
  eval->add_option("--alphas", ea.alphas, "fusion weights to sweep")->delimiter(',');
  eval->add_option("--json", ea.json_out, "also write the report as JSON");

  std::string fault;
  std::size_t instances = 0;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad->add_option("--inject-fault", fault, "corrupt one op's derivative (gelu)");
  grad->add_option("--instances", instances, "random instances per op");

  std::string dump_ckpt, dump_out = "masks";
  std::vector<std::uint64_t> ids;
  auto* dump = app.add_subcommand("dump-masks", "write PGM panels for evaluation episodes");
  dump->add_option("--ckpt", dump_ckpt, "checkpoint file")->required();
  dump->add_option("--episodes", ids, "episode ids, comma separated")->required()->delimiter(',');
  dump->add_option("--out", dump_out, "output directory");

  std::string export_config, export_out = "episodes";
  std::size_t export_count = 8;
  auto* exp = app.add_subcommand("export-episodes", "write training episodes and a manifest");
  exp->add_option("--config", export_config, "run config JSON")->check(CLI::ExistingFile);
  exp->add_option("--count", export_count, "number of episodes");
  exp->add_option("--out", export_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return run_train(config_path, out_dir, quiet);
    if (*eval) return run_eval(ea);
    if (*grad) return run_gradcheck(fault, instances);
    if (*dump) return run_dump(dump_ckpt, ids, dump_out);
    if (*exp) return run_export(export_config, export_count, export_out);
  } catch (const plka::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const plka::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const plka::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitUsage;
}
