#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "platoonwatch/io.hpp"
#include "platoonwatch/pipeline.hpp"

using namespace pw;
namespace fs = std::filesystem;

namespace {

// Small but complete configuration: 8 runs, tiny model, 2 epochs.
std::string tiny_config(const std::string& out_dir) {
  return "[pipeline]\n"
         "out_dir = " + out_dir + "\n"
         "seed = 3\n"
         "[scenario]\n"
         "controllers = path\n"
         "maneuvers = join, steady\n"
         "duration = 18\n"
         "maneuver_time = 6\n"
         "benign_per_seed = 2\n"
         "[dataset]\n"
         "train_step = 4\n"
         "val_step = 4\n"
         "test_step = 2\n"
         "[model]\n"
         "d_model = 16\n"
         "blocks_global = 2\n"
         "blocks_individual = 1\n"
         "[train]\n"
         "max_epochs = 2\n"
         "patience = 2\n"
         "batch_size = 64\n"
         "models = global_pv, indiv:3\n"
         "[bench]\n"
         "n_runs = 5\n"
         "warmup = 1\n";
}

std::string tiny_config_full_roster(const std::string& out_dir) {
  // keep only two attacks by shrinking the roster via maneuvers/benign mix:
  // the roster itself is fixed, so this config still runs 2x(9+2) = 22 runs;
  // duration is short so it stays fast.
  return tiny_config(out_dir);
}

}  // namespace

TEST_CASE("config parsing: defaults, overrides, rejection") {
  config::RunConfig def = config::parse_config(config::default_config_text());
  CHECK(def.d_model == 128);
  CHECK(def.n_heads == 2);
  CHECK(def.blocks_global == 4);
  CHECK(def.blocks_individual == 2);
  CHECK(def.loss.lambda_fp == 1.7);
  CHECK(def.loss.lambda_pos == 0.6);
  CHECK(def.loss.tau == 0.6);
  CHECK(def.train.lr == 1e-4);
  CHECK(def.train.batch_size == 128);
  CHECK(def.train.decision_threshold == 0.6);
  CHECK(def.controllers.size() == 4);
  CHECK(def.maneuvers.size() == 3);
  CHECK(def.base_scenario.n_vehicles == 7);
  CHECK(def.models.size() == 3);

  CHECK_THROWS_WITH_AS(config::parse_config("[scenario]\nnope = 1\n"),
                       doctest::Contains("unknown key 'nope'"), ConfigError);
  CHECK_THROWS_WITH_AS(config::parse_config("[wat]\nx = 1\n"),
                       doctest::Contains("unknown section"), ConfigError);
  CHECK_THROWS_AS(config::parse_config("[train]\nlr ~ 3\n"), ConfigError);
  CHECK_THROWS_AS(config::parse_config("[train]\nmax_epochs = maybe\n"),
                  ConfigError);

  // same text, same hash; different seed, different hash
  auto a = config::parse_config(tiny_config("x"));
  auto b = config::parse_config(tiny_config("x"));
  CHECK(a.hash() == b.hash());
  auto c = a;
  c.seed = 4;
  CHECK(a.hash() != c.hash());
}

TEST_CASE("pipeline: steps, caching, and dependency errors") {
  fs::path root = fs::temp_directory_path() / "pw_pipe_test";
  fs::remove_all(root);
  auto cfg = config::parse_config(tiny_config(root.string()));

  pipeline::Pipeline pl(cfg);

  // out-of-order execution names the missing step
  CHECK_THROWS_WITH_AS(pl.eval(), doctest::Contains("from step: train"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(pl.dataset(), doctest::Contains("from step: attack"),
                       ConfigError);

  auto results = pl.all();
  REQUIRE(results.size() == 7);
  for (const auto& r : results) CHECK_FALSE(r.cached);

  // second run: every step cached
  pipeline::Pipeline pl2(cfg);
  auto again = pl2.all();
  for (const auto& r : again) CHECK(r.cached);

  // artifacts exist
  CHECK(fs::exists(pl.run_dir() / "entries.json"));
  CHECK(fs::exists(pl.run_dir() / "datasets" / "train.pwds"));
  CHECK(fs::exists(pl.run_dir() / "checkpoints" / "global_pv.f32.ck"));
  CHECK(fs::exists(pl.run_dir() / "reports" / "eval_global_pv.json"));
  CHECK(fs::exists(pl.run_dir() / "quant" / "global_pv.int8.pwcq"));
  CHECK(fs::exists(pl.run_dir() / "bench" / "bench.json"));

  // ratio report renders
  std::string text = pl.ratio_report_text();
  CHECK(text.find("Global") != std::string::npos);
  CHECK(text.find("Car 6") != std::string::npos);

  // touching a config knob invalidates downstream caches but not upstream
  auto cfg2 = cfg;
  cfg2.train.max_epochs = 1;
  cfg2.train.patience = 1;
  pipeline::Pipeline pl3(cfg2);
  auto r3 = pl3.all();
  // run dir differs (config hash), so everything recomputes
  CHECK(pl3.run_dir() != pl.run_dir());
  for (const auto& r : r3) CHECK_FALSE(r.cached);

  fs::remove_all(root);
}

TEST_CASE("stream jsonl roundtrips through the dataset parser") {
  sim::ScenarioSpec sp;
  sp.duration = 12.0;
  sp.maneuver_time = 4.0;
  sp.maneuver = sim::Maneuver::Steady;
  sim::Trace tr = sim::run_scenario(sp);
  auto labels = attack::benign_labels(tr);
  std::string jsonl = attack::attacked_stream_jsonl(tr, std::nullopt);
  data::RunData run = pipeline::parse_stream(jsonl, sp, "t", labels);
  CHECK(run.trace.n_steps == tr.n_steps);
  CHECK_FALSE(run.attack.has_value());
  CHECK(run.trace.content_hash() == tr.content_hash());

  attack::AttackSpec a;
  a.start_time = 4.0;
  a.end_time = 8.0;
  std::string jsonl2 = attack::attacked_stream_jsonl(tr, a);
  data::RunData run2 = pipeline::parse_stream(jsonl2, sp, "t", labels);
  REQUIRE(run2.attack.has_value());
  CHECK(run2.attack->start_time == 4.0);
}
