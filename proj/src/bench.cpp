#include "platoonwatch/bench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "platoonwatch/io.hpp"

namespace pw::bench {

using nlohmann::json;

std::string cpu_model_string() {
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    auto pos = line.find("model name");
    if (pos != std::string::npos) {
      auto colon = line.find(':');
      if (colon != std::string::npos) {
        std::string s = line.substr(colon + 1);
        while (!s.empty() && s.front() == ' ') s.erase(s.begin());
        return s;
      }
    }
  }
  return "unknown";
}

std::string BenchReport::to_json() const {
  json j;
  j["name"] = name;
  j["cpu"] = cpu;
  j["precision"] = precision;
  j["n_runs"] = n_runs;
  j["warmup"] = warmup;
  j["mean_ms"] = mean_ms;
  j["p50_ms"] = p50_ms;
  j["p99_ms"] = p99_ms;
  j["output_hash"] = io::hex64(output_hash);
  return j.dump(2);
}

BenchReport benchmark_forward(const std::string& name,
                              const quant::InferModel& model,
                              const data::WindowedDataset& ds, int n_runs,
                              int warmup) {
  if (n_runs < 1) throw ConfigError("benchmark: n_runs must be >= 1");
  if (ds.samples() == 0) throw ConfigError("benchmark: empty dataset");

#ifdef _OPENMP
  int saved_threads = omp_get_max_threads();
  omp_set_num_threads(1);
#endif

  std::int64_t n_windows = std::min<std::int64_t>(ds.samples(), 64);
  auto window_of = [&](int run) {
    return static_cast<std::int64_t>(run) % n_windows;
  };

  std::uint64_t hash = io::kFnvOffset;
  for (int i = 0; i < warmup; ++i) {
    auto out = model.forward_range(ds, window_of(i), window_of(i) + 1);
    if (i == 0)
      hash = io::fnv1a(out.data(), out.size() * sizeof(float), hash);
  }

  std::vector<double> ms(static_cast<std::size_t>(n_runs));
  for (int i = 0; i < n_runs; ++i) {
    std::int64_t w = window_of(i);
    auto t0 = std::chrono::steady_clock::now();
    auto out = model.forward_range(ds, w, w + 1);
    auto t1 = std::chrono::steady_clock::now();
    ms[static_cast<std::size_t>(i)] =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
    hash = io::fnv1a(out.data(), out.size() * sizeof(float), hash);
  }

#ifdef _OPENMP
  omp_set_num_threads(saved_threads);
#endif

  BenchReport rep;
  rep.name = name;
  rep.cpu = cpu_model_string();
  rep.precision = "float32 activations";
  rep.n_runs = n_runs;
  rep.warmup = warmup;
  double sum = 0.0;
  for (double v : ms) sum += v;
  rep.mean_ms = sum / static_cast<double>(n_runs);
  std::sort(ms.begin(), ms.end());
  auto pick = [&](double q) {
    auto idx = static_cast<std::size_t>(q * (n_runs - 1) + 0.5);
    return ms[std::min(idx, ms.size() - 1)];
  };
  rep.p50_ms = pick(0.50);
  rep.p99_ms = pick(0.99);
  rep.output_hash = hash;
  return rep;
}

}  // namespace pw::bench
