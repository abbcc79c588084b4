// Times the OpenMP kernels against their serial reference twins on
// transformer-sized workloads and prints a throughput table.

#include <chrono>
#include <functional>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "platoonwatch/ref_kernels.hpp"
#include "platoonwatch/rng.hpp"
#include "platoonwatch/tensor.hpp"

using namespace pw;
using nn::Tensor;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warmup
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1, 1);
  return t;
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("threads: %d\n", omp_get_max_threads());
#else
  std::printf("threads: 1 (no OpenMP)\n");
#endif
  Rng rng(17);

  struct Case {
    const char* name;
    std::int64_t m, k, n;
    int reps;
  };
  // shapes that dominate training: QKV/O projections and the FFN
  std::vector<Case> cases = {
      {"matmul 7680x128x128", 7680, 128, 128, 10},
      {"matmul 7680x128x512", 7680, 128, 512, 5},
      {"matmul 7680x512x128", 7680, 512, 128, 5},
  };
  std::printf("%-24s %10s %10s %8s %10s\n", "kernel", "omp ms", "serial ms",
              "speedup", "GFLOP/s");
  for (const auto& c : cases) {
    Tensor A = random_tensor({c.m, c.k}, rng);
    Tensor B = random_tensor({c.k, c.n}, rng);
    Tensor C({c.m, c.n});
    double par = time_ms([&] { nn::matmul(A.data(), B.data(), C.data(), c.m, c.k, c.n); }, c.reps);
    double ser = time_ms([&] { ref::matmul(A.data(), B.data(), C.data(), c.m, c.k, c.n); }, c.reps);
    double gflops = 2.0 * c.m * c.k * c.n / (par * 1e6);
    std::printf("%-24s %10.3f %10.3f %8.2f %10.2f\n", c.name, par, ser,
                ser / par, gflops);
  }

  {
    std::int64_t rows = 7680, d = 128;
    Tensor x = random_tensor({rows, d}, rng);
    Tensor g({d}), b({d});
    g.fill(1.0);
    nn::LayerNormCache cache;
    double par = time_ms([&] { nn::layer_norm(x, g, b, cache); }, 20);
    double ser = time_ms([&] { ref::layer_norm(x, g, b); }, 20);
    std::printf("%-24s %10.3f %10.3f %8.2f\n", "layer_norm 7680x128", par, ser,
                ser / par);
  }
  {
    std::int64_t rows = 1536, n = 60;
    Tensor logits = random_tensor({rows, n}, rng);
    Tensor mask({rows, n});
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        mask.at2(i, j) = (j % 7 == 3) ? nn::kMaskNegInf : 0.0;
    double par = time_ms([&] { nn::masked_softmax(logits, mask); }, 20);
    double ser = time_ms([&] { ref::masked_softmax(logits, mask); }, 20);
    std::printf("%-24s %10.3f %10.3f %8.2f\n", "masked_softmax 1536x60", par,
                ser, ser / par);
  }
  return 0;
}
