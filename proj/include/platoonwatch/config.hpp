#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "platoonwatch/attack.hpp"
#include "platoonwatch/dataset.hpp"
#include "platoonwatch/loss.hpp"
#include "platoonwatch/model.hpp"
#include "platoonwatch/sim.hpp"
#include "platoonwatch/train.hpp"

namespace pw::config {

// Which models the train step produces. "global_pv" / "global_iv" are the
// whole-platoon models in the two encoding modes; "indiv:<k>" is the
// per-vehicle model for car Ck.
struct ModelSelector {
  std::string name;  // config token
  bool individual = false;
  int vehicle = 0;  // car number for individual models
  nn::EncodingMode mode = nn::EncodingMode::PerVehicle;
};

struct RunConfig {
  // [pipeline]
  std::string out_dir = "runs";
  std::uint64_t seed = 1;
  int jobs = 0;  // 0 = library default

  // [scenario]
  std::vector<sim::ControllerKind> controllers{
      sim::ControllerKind::Path, sim::ControllerKind::Ploeg,
      sim::ControllerKind::Consensus, sim::ControllerKind::Flatbed};
  std::vector<sim::Maneuver> maneuvers{sim::Maneuver::Join, sim::Maneuver::Exit,
                                       sim::Maneuver::Steady};
  sim::ScenarioSpec base_scenario;  // duration, gains, noise, ...
  int n_seeds = 1;
  int benign_per_seed = 6;

  // [dataset]
  int window = 10;
  int train_step = 5, val_step = 5, test_step = 1;
  data::SplitSpec split;

  // [model]
  int d_model = 128;
  int n_heads = 2;
  int blocks_global = 4;
  int blocks_individual = 2;
  double dropout = 0.1;
  bool causal = false;

  // [loss]
  nn::LossConfig loss;

  // [train]
  train::TrainConfig train;
  std::vector<ModelSelector> models;

  // [quant]
  bool quant_int8 = true;
  bool quant_f16 = true;

  // [bench]
  int bench_runs = 1000;
  int bench_warmup = 50;

  RunConfig();

  nn::ModelConfig model_config(const ModelSelector& sel) const;
  // Deterministic canonical rendering; the pipeline cache keys hash this.
  std::string canonical() const;
  std::uint64_t hash() const;
};

// INI-style: [section] headers, key = value lines, '#' comments. Unknown
// sections or keys are rejected with their line number.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// The shipped defaults, as a config file.
std::string default_config_text();

ModelSelector parse_model_selector(const std::string& token);

}  // namespace pw::config
