#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "plka/checkpoint.hpp"
#include "plka/harness.hpp"

using namespace plka;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("plka_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small, fast run used where the default size is not needed.
RunConfig small_config(const fs::path& out) {
  RunConfig c;
  c.steps = 6;
  c.checkpoint_every = 3;
  c.eval_every = 3;
  c.eval_every_episodes = 1;
  c.model.channels = 8;
  c.episodes.image_size = 64;
  c.episodes.min_segment_size = 20;
  c.episodes.scene_pool = 4;
  c.eval.episodes = 2;
  c.eval.repeats = 2;
  c.out_dir = out.string();
  return c;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(PLKA_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, SerializeParseRoundTrip) {
  RunConfig c;
  c.seed = 99;
  c.optim.learning_rate = 3e-3;
  c.model.fusion_alpha = 0.6;
  c.episodes.perturb.rotation_deg = 5;
  c.eval.split = SplitMode::kSetting1;
  c.eval.held_out = "kidneys";
  EXPECT_EQ(parse_run_config(serialize(c)), c);
  EXPECT_EQ(parse_run_config("{}"), RunConfig{});
}

TEST(Config, RejectsUnknownKeysBadTypesAndRanges) {
  EXPECT_THROW(parse_run_config(R"({"sed": 1})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"model": {"chanels": 8}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"steps": "many"})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"model": {"fusion_alpha": 1.0}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"model": {"lka_kernel": 4}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"eval": {"split": "setting3-like"}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"eval": {"held_out": "heart"}})"), ConfigError);
  EXPECT_THROW(parse_run_config("{not json"), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), IoError);
}

TEST(Checkpoint, RoundTripGivesBitIdenticalForward) {
  const auto dir = temp_dir("ckpt");
  auto cfg = small_config(dir);
  const auto model = init_model(cfg);
  const auto opt = make_optimizer(cfg);
  save_checkpoint(dir / "a.plkc", make_checkpoint(cfg, 12, model, opt));
  const auto loaded = load_checkpoint(dir / "a.plkc");
  EXPECT_EQ(loaded.config, cfg);
  EXPECT_EQ(loaded.step, 12u);
  const auto back = model_from_checkpoint(loaded);
  EvalEpisodeSampler ev(1, 64);
  const auto ep = ev.episode(0, "liver", 0);
  NoGradGuard off;
  const auto a = model.forward(preprocess<float>(ep.support_image), mask_tensor<float>(ep.support_mask),
                               preprocess<float>(ep.query_image));
  const auto b = back.forward(preprocess<float>(ep.support_image), mask_tensor<float>(ep.support_mask),
                              preprocess<float>(ep.query_image));
  EXPECT_TRUE(std::equal(a.fused.fg.data().begin(), a.fused.fg.data().end(), b.fused.fg.data().begin()));
  for (const auto& [name, _] : model.params()) EXPECT_TRUE(back.params().contains(name));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = temp_dir("corrupt");
  std::ofstream(dir / "bad.plkc") << "NOPE";
  EXPECT_THROW(load_checkpoint(dir / "bad.plkc"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.plkc"), IoError);
  auto cfg = small_config(dir);
  auto c = make_checkpoint(cfg, 0, init_model(cfg), make_optimizer(cfg));
  c.tensors.pop_back();
  auto model = init_model(cfg);
  EXPECT_THROW(restore_parameters(c, model), IoError);
}

TEST(Train, ZeroStepsCheckpointEqualsInitialization) {
  const auto dir = temp_dir("zero");
  auto cfg = small_config(dir);
  cfg.steps = 0;
  const auto result = train(cfg);
  const auto init = init_model(cfg);
  std::size_t i = 0;
  for (const auto& [name, t] : init.params()) {
    ASSERT_EQ(result.checkpoint.tensors[i].first, name);
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), result.checkpoint.tensors[i].second.data().begin()));
    ++i;
  }
  EXPECT_TRUE(fs::exists(final_checkpoint_path(cfg)));
}

TEST(Train, IdenticalRunsAreBitIdentical) {
  // Same out_dir both times: the config, including out_dir, is embedded in checkpoints.
  const auto dir = temp_dir("det");
  const auto ca = small_config(dir);
  train(ca);
  const auto metrics = slurp(metrics_path(ca));
  const auto final_ckpt = slurp(final_checkpoint_path(ca));
  const auto mid_ckpt = slurp(checkpoint_path(ca, 3));
  fs::remove_all(dir);
  train(ca);
  EXPECT_EQ(metrics, slurp(metrics_path(ca)));
  EXPECT_EQ(final_ckpt, slurp(final_checkpoint_path(ca)));
  EXPECT_EQ(mid_ckpt, slurp(checkpoint_path(ca, 3)));
  std::ifstream log(metrics_path(ca));
  std::string line;
  std::size_t steps = 0, evals = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "step") {
      ++steps;
      EXPECT_NEAR(j["total"].get<double>(), j["seg"].get<double>() + j["reg"].get<double>(), 1e-6);
    }
    evals += j["type"] == "eval";
  }
  EXPECT_EQ(steps, 6u);
  EXPECT_EQ(evals, 2u);
}

TEST(Train, LossDropsOverFirstFiveHundredSteps) {
  RunConfig cfg;
  cfg.steps = 500;
  cfg.eval_every = 0;
  TrainOptions opts;
  opts.write_files = false;
  const auto result = train(cfg, opts);
  auto window = [&](std::size_t from) {
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t i = from; i < from + 50; ++i) {
      if (!std::isnan(result.losses[i])) acc += result.losses[i], ++n;
    }
    return acc / static_cast<double>(n);
  };
  EXPECT_LT(window(450), window(0));
}

TEST(Eval, OracleAndZeroBackendsBoundTheMetric) {
  EvalConfig cfg;
  cfg.split = SplitMode::kSetting1;
  cfg.episodes = 3;
  const auto classes = eval_classes(cfg);
  ASSERT_EQ(classes.size(), 3u);
  const auto top = evaluate(oracle_predictor(), classes, cfg, 64);
  const auto bottom = evaluate(zero_predictor(), classes, cfg, 64);
  for (const auto& cls : classes) {
    EXPECT_EQ(top.at(cls).mean, 100.0);
    EXPECT_EQ(top.at(cls).repetition_means.size(), 3u);
    EXPECT_EQ(bottom.at(cls).mean, 0.0);
  }
  EXPECT_THROW(evaluate(oracle_predictor(), {"heart"}, cfg, 64), ConfigError);
  EXPECT_THROW(top.at("heart"), ConfigError);
  const auto j = to_json(top);
  EXPECT_EQ(j["classes"].size(), 3u);
  EXPECT_NE(format_table(top).find("liver"), std::string::npos);
}

TEST(Eval, SettingTwoScoresOnlyHeldOutClass) {
  EvalConfig cfg;
  cfg.held_out = "kidneys";
  EXPECT_EQ(eval_classes(cfg), std::vector<std::string>{"kidneys"});
}

TEST(Sweep, EvaluatesEveryAlphaDeterministically) {
  const auto dir = temp_dir("sweep");
  auto cfg = small_config(dir);
  auto model = init_model(cfg);
  cfg.eval.episodes = 1;
  cfg.eval.repeats = 1;
  const auto a = alpha_sweep(model, kDefaultSweepAlphas, cfg.eval, 64);
  const auto b = alpha_sweep(model, kDefaultSweepAlphas, cfg.eval, 64);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].alpha, kDefaultSweepAlphas[i]);
    EXPECT_EQ(a[i].report.mean, b[i].report.mean);
  }
  EXPECT_EQ(model.config().fusion_alpha, cfg.model.fusion_alpha);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_NE(format_sweep(a).find("0.90"), std::string::npos);
}

TEST(DumpMasks, FivePanelsPerEpisodeMatchingInProcessPrediction) {
  const auto dir = temp_dir("dump");
  auto cfg = small_config(dir);
  const auto model = init_model(cfg);
  const auto files = dump_masks(model, cfg.eval, {0, 1}, dir / "masks", 64);
  ASSERT_EQ(files.size(), 10u);
  for (const auto& f : files) EXPECT_TRUE(fs::exists(f));
  const auto fused = read_pgm(dir / "masks" / "ep1_fused.pgm");
  for (const auto b : fused.bytes) EXPECT_TRUE(b == 0 || b == 255);
  const auto [cls, index] = dump_episode_key(cfg.eval, 1);
  const auto ep = EvalEpisodeSampler(cfg.eval.seed, 64).episode(0, cls, index);
  EXPECT_EQ(to_bytes(model_predictor(model)(ep)), fused.bytes);
  EXPECT_THROW(dump_masks(model, cfg.eval, {99}, dir / "masks", 64), ConfigError);
}

TEST(Cli, ExitCodes) {
  const auto dir = temp_dir("exit");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("train --bogus"), 1);
  EXPECT_EQ(run_cli("eval --ckpt " + (dir / "missing.plkc").string()), 3);
  EXPECT_EQ(run_cli("gradcheck --inject-fault gelu --instances 2"), 2);
  EXPECT_EQ(run_cli("gradcheck --inject-fault sigmoid"), 1);
  std::ofstream(dir / "bad.json") << R"({"steps": -1})";
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.json").string()), 1);
}

TEST(Cli, TrainEvalDumpEndToEnd) {
  const auto dir = temp_dir("e2e");
  auto cfg = small_config(dir / "run");
  std::ofstream(dir / "cfg.json") << serialize(cfg);
  ASSERT_EQ(run_cli("train --quiet --config " + (dir / "cfg.json").string() + " --out " + (dir / "run").string()), 0);
  const auto ckpt = (dir / "run" / "final.plkc").string();
  EXPECT_EQ(run_cli("eval --ckpt " + ckpt + " --split setting1-like --repeats 1 --episodes 1 --json " +
                    (dir / "report.json").string()),
            0);
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report["classes"].size(), 3u);
  EXPECT_EQ(run_cli("eval --ckpt " + ckpt + " --sweep --repeats 1 --episodes 1"), 0);
  EXPECT_EQ(run_cli("dump-masks --ckpt " + ckpt + " --episodes 0,1 --out " + (dir / "m").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "m" / "ep1_path32.pgm"));
  EXPECT_EQ(run_cli("dump-masks --ckpt " + ckpt + " --episodes 7 --out " + (dir / "m").string()), 1);
  EXPECT_EQ(run_cli("export-episodes --config " + (dir / "cfg.json").string() + " --count 2 --out " +
                    (dir / "ex").string()),
            0);
  EXPECT_EQ(read_manifest(dir / "ex" / "manifest.jsonl").size(), 2u);
}
