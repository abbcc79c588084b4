#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "platoonwatch/attack.hpp"
#include "platoonwatch/sim.hpp"
#include "platoonwatch/tensor.hpp"

namespace pw::data {

inline constexpr int kFeatureCount = 8;
// Per (follower, timestep): received claims vs own sensing, plus the
// controller's reaction. The leader has no predecessor and carries no row;
// vehicle row v corresponds to platoon car C(v+1).
const std::vector<std::string>& feature_names();

// One simulated run ready for windowing.
struct RunData {
  std::string id;
  sim::Trace trace;  // with claims (falsified when attacked)
  attack::LabelGrid labels;
  std::optional<attack::AttackSpec> attack;
};

struct SampleMeta {
  std::uint32_t scenario_index = 0;  // into scenario_ids
  std::uint32_t window_start = 0;    // absolute comm step
};

struct NormStats {
  std::vector<double> mean, stddev;
  std::vector<std::uint8_t> dropped;  // zero-variance features, neutralized
  std::string to_json() const;
  static NormStats from_json(const std::string& s);
};

struct WindowedDataset {
  nn::Tensor X;        // [B,V,T,F]
  nn::Tensor Y;        // [B,V,T]
  nn::Tensor M;        // [B,V,T]
  nn::Tensor offsets;  // [B,V]
  std::vector<SampleMeta> meta;
  std::vector<std::string> scenario_ids;
  std::vector<std::string> scenario_controllers;  // parallel to scenario_ids
  bool normalized = false;
  NormStats stats;  // valid when normalized

  std::int64_t samples() const { return X.ndim() ? X.dim(0) : 0; }
  std::int64_t vehicles() const { return X.ndim() ? X.dim(1) : 0; }
  std::int64_t window() const { return X.ndim() ? X.dim(2) : 0; }
  std::int64_t features() const { return X.ndim() ? X.dim(3) : 0; }
};

// Sliding windows of T comm steps with the given stride over the follower
// rows of one run. Labels/masks are carried through per timestep;
// offsets[b,v] is the window's start step, so offset + local index
// reproduces the absolute comm step.
WindowedDataset window_stream(const RunData& run, int T = 10, int step = 1);

// Concatenates datasets (scenario tables are merged; inputs stay valid).
WindowedDataset concat(const std::vector<WindowedDataset>& parts);

// Restrict to a single vehicle row (for individual per-vehicle models).
WindowedDataset select_vehicle(const WindowedDataset& ds, int vehicle_row);

// Mean/std over the M=1 cells of the training split. Zero-variance features
// are flagged and neutralized (normalized value 0 everywhere).
NormStats fit_normalizer(const WindowedDataset& train);
WindowedDataset apply_normalizer(const WindowedDataset& ds,
                                 const NormStats& stats);

struct SplitSpec {
  double train = 0.7, val = 0.15, test = 0.15;
  std::uint64_t seed = 0;
  void validate() const;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Deterministic partition of whole runs; fractional counts floor, remainder
// goes to train. Every split must end up non-empty.
SplitIndices split_scenarios(std::size_t n_runs, const SplitSpec& spec);

// --- attack-ratio accounting ---------------------------------------------

struct RatioCell {
  double pct = 0.0;
  bool defined = false;
};

// Percentage of valid (masked-in) timesteps labeled attack, per vehicle row
// and overall, grouped by controller.
struct AttackRatioReport {
  std::vector<std::string> controllers;
  // cells[c][0] is the controller's global row; cells[c][1+v] is vehicle v.
  std::vector<std::vector<RatioCell>> cells;
  std::int64_t vehicle_rows = 0;
};

AttackRatioReport attack_ratio_report(const WindowedDataset& ds);

// --- container (PWDS) ------------------------------------------------------

void save_dataset(const WindowedDataset& ds, const std::filesystem::path& p);
WindowedDataset load_dataset(const std::filesystem::path& p);

}  // namespace pw::data
