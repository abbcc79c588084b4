#pragma once

#include <string>

#include "platoonwatch/quant.hpp"

namespace pw::bench {

struct BenchReport {
  std::string name;
  std::string cpu;
  std::string precision;
  int n_runs = 0, warmup = 0;
  double mean_ms = 0.0, p50_ms = 0.0, p99_ms = 0.0;
  std::uint64_t output_hash = 0;  // logits hash, timing-independent

  std::string to_json() const;
};

std::string cpu_model_string();

// Wall-clock per single-window forward; warmup excluded, percentiles over
// the measured runs. The engine is pinned to one thread while timing.
BenchReport benchmark_forward(const std::string& name,
                              const quant::InferModel& model,
                              const data::WindowedDataset& ds, int n_runs = 1000,
                              int warmup = 50);

}  // namespace pw::bench
