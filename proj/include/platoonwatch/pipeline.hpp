#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "platoonwatch/config.hpp"

namespace pw::pipeline {

struct StepResult {
  std::string step;
  bool cached = false;
};

// Step orchestration over a content-addressed run directory:
// <out_dir>/<config-hash>/{traces, streams, datasets, checkpoints, reports,
// quant, bench, manifests}. A step is skipped when its input key (config
// slice + upstream manifests) and its recorded outputs are both unchanged.
class Pipeline {
 public:
  explicit Pipeline(config::RunConfig cfg);

  const std::filesystem::path& run_dir() const { return run_dir_; }
  const config::RunConfig& cfg() const { return cfg_; }

  StepResult simulate();
  StepResult attack();
  StepResult dataset();
  StepResult train();
  StepResult eval();
  StepResult quantize();
  StepResult bench();
  std::vector<StepResult> all();

  // Table-V style attack-ratio grid (text) from the dataset step's report.
  std::string ratio_report_text() const;
  std::string ratio_report_json() const;

 private:
  struct Manifest {
    std::uint64_t key = 0;
    std::vector<std::pair<std::string, std::uint64_t>> outputs;
  };

  bool manifest_valid(const std::string& step, std::uint64_t key) const;
  void write_manifest(const std::string& step, std::uint64_t key,
                      const std::vector<std::filesystem::path>& outputs) const;
  std::uint64_t upstream_digest(const std::string& step) const;
  void require_step(const std::string& artifact, const std::string& step) const;

  config::RunConfig cfg_;
  std::filesystem::path run_dir_;
};

// Stream parsing (the attacked-stream JSONL interchange).
data::RunData parse_stream(const std::string& jsonl, const sim::ScenarioSpec& spec,
                           const std::string& id,
                           const attack::LabelGrid& labels);

}  // namespace pw::pipeline
