#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "platoonwatch/bench.hpp"
#include "platoonwatch/io.hpp"
#include "platoonwatch/quant.hpp"
#include "platoonwatch/rng.hpp"

using namespace pw;
using data::WindowedDataset;
using nn::Tensor;

namespace {

WindowedDataset small_dataset(std::int64_t B, const nn::ModelConfig& cfg,
                              std::uint64_t seed) {
  WindowedDataset ds;
  std::int64_t V = 2, T = cfg.window, F = cfg.features;
  ds.X = Tensor({B, V, T, F});
  ds.Y = Tensor({B, V, T});
  ds.M = Tensor({B, V, T});
  ds.offsets = Tensor({B, V});
  Rng rng(seed);
  for (std::int64_t i = 0; i < ds.X.numel(); ++i) ds.X[i] = rng.uniform(-1, 1);
  for (std::int64_t i = 0; i < ds.M.numel(); ++i)
    ds.M[i] = rng.uniform() < 0.9 ? 1.0 : 0.0;
  for (std::int64_t i = 0; i < B * V; ++i) ds.M[i * T] = 1.0;
  for (std::int64_t i = 0; i < ds.Y.numel(); ++i)
    ds.Y[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  for (std::int64_t i = 0; i < B * V; ++i)
    ds.offsets[i] = static_cast<double>(rng.below(30));
  ds.meta.assign(static_cast<std::size_t>(B), {0, 0});
  ds.scenario_ids.push_back("q");
  ds.scenario_controllers.push_back("path");
  return ds;
}

nn::ModelConfig small_config() {
  nn::ModelConfig m;
  m.d_model = 16;
  m.n_heads = 2;
  m.n_blocks = 2;
  m.d_ff = 64;
  m.features = 6;
  m.window = 8;
  return m;
}

}  // namespace

TEST_CASE("per-tensor scale arithmetic") {
  nn::ModelConfig cfg = small_config();
  nn::ModelParams p = nn::ModelParams::zeros(cfg);
  // craft embed weights with max |w| = 1.27 and a 0.5 entry
  p.w_embed.value.fill(0.0);
  p.w_embed.value[0] = 1.27;
  p.w_embed.value[1] = 0.5;
  p.w_embed.value[2] = -1.27;
  auto qp = quant::quantize(p);
  const auto& qt = qp.weights.at("embed.W");
  CHECK(qt.scale == doctest::Approx(0.01).epsilon(1e-7));
  CHECK(qt.q[0] == 127);
  CHECK(qt.q[1] == 50);
  CHECK(qt.q[2] == -127);

  // all-zero tensor: scale 1, exact dequant
  nn::ModelParams z = nn::ModelParams::zeros(cfg);
  auto qz = quant::quantize(z);
  CHECK(qz.weights.at("embed.W").scale == 1.0f);
  for (auto v : qz.weights.at("embed.W").q) CHECK(v == 0);
  auto dz = qz.dequantize();
  for (std::int64_t i = 0; i < dz.w_embed.value.numel(); ++i)
    CHECK(dz.w_embed.value[i] == 0.0);
}

TEST_CASE("round-trip error stays within half a scale step") {
  nn::ModelConfig cfg = small_config();
  nn::ModelParams p = nn::ModelParams::init(cfg, 17);
  auto qp = quant::quantize(p);
  auto dq = qp.dequantize();
  auto orig = p.all();
  auto back = dq.all();
  for (std::size_t i = 0; i < orig.size(); ++i) {
    auto wi = qp.weights.find(orig[i]->name);
    if (wi == qp.weights.end()) continue;  // float-kept vectors
    double bound = 0.5 * static_cast<double>(wi->second.scale) * (1.0 + 1e-9);
    for (std::int64_t k = 0; k < orig[i]->value.numel(); ++k)
      CHECK(std::abs(orig[i]->value[k] - back[i]->value[k]) <= bound);
  }
  // biases and norm parameters stay float32
  CHECK(qp.vectors.count("embed.b") == 1);
  CHECK(qp.vectors.count("block0.ln1.gain") == 1);
  CHECK(qp.weights.count("block0.ffn.W1") == 1);
}

TEST_CASE("quantized forward equals the float engine on dequantized weights") {
  nn::ModelConfig cfg = small_config();
  nn::ModelParams p = nn::ModelParams::init(cfg, 23);
  auto ds = small_dataset(6, cfg, 5);
  auto qp = quant::quantize(p);
  Tensor q_logits = quant::quantized_forward(qp, ds);
  quant::InferModel engine(qp.dequantize());
  Tensor f_logits = engine.forward_all(ds);
  for (std::int64_t i = 0; i < q_logits.numel(); ++i) {
    CHECK(q_logits[i] == f_logits[i]);  // same code path bitwise
    CHECK(std::abs(q_logits[i] - f_logits[i]) < 1e-6);
  }
  // repeated runs are identical
  Tensor again = quant::quantized_forward(qp, ds);
  for (std::int64_t i = 0; i < q_logits.numel(); ++i)
    CHECK(again[i] == q_logits[i]);
}

TEST_CASE("float engine tracks the double model closely") {
  nn::ModelConfig cfg = small_config();
  nn::ModelParams p = nn::ModelParams::init(cfg, 29);
  auto ds = small_dataset(4, cfg, 9);
  quant::InferModel engine(p);
  Tensor f_logits = engine.forward_all(ds);

  nn::Batch b;
  b.X = ds.X;
  b.M = ds.M;
  b.offsets = ds.offsets;
  Tensor d_logits = nn::forward(p, b, false, 0);
  for (std::int64_t i = 0; i < f_logits.numel(); ++i)
    CHECK(std::abs(f_logits[i] - d_logits[i]) < 1e-3);
}

TEST_CASE("PWCQ container roundtrip and corruption detection") {
  nn::ModelConfig cfg = small_config();
  nn::ModelParams p = nn::ModelParams::init(cfg, 31);
  auto qp = quant::quantize(p);
  auto dir = std::filesystem::temp_directory_path() / "pw_quant_test";
  std::filesystem::create_directories(dir);
  auto path = dir / "m.pwcq";
  quant::save_quantized(qp, path);
  auto back = quant::load_quantized(path);
  CHECK(back.cfg == qp.cfg);
  CHECK(back.weights.size() == qp.weights.size());
  for (const auto& [name, qt] : qp.weights) {
    CHECK(back.weights.at(name).scale == qt.scale);
    CHECK(back.weights.at(name).q == qt.q);
  }
  for (const auto& [name, v] : qp.vectors) CHECK(back.vectors.at(name) == v);

  auto bytes = io::read_file(path);
  bytes[bytes.size() / 3] ^= 0x11;
  io::write_file(dir / "bad.pwcq", bytes);
  CHECK_THROWS_AS(quant::load_quantized(dir / "bad.pwcq"), IoError);
}

TEST_CASE("float16 storage roundtrip is within half-precision error") {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    float f = static_cast<float>(rng.uniform(-8, 8));
    float back = io::f16_to_f32(io::f32_to_f16(f));
    CHECK(std::abs(back - f) <= std::abs(f) * 0x1.0p-10 + 1e-7);
  }
  CHECK(io::f16_to_f32(io::f32_to_f16(0.0f)) == 0.0f);
  CHECK(io::f16_to_f32(io::f32_to_f16(1.0f)) == 1.0f);
  CHECK(io::f16_to_f32(io::f32_to_f16(-2.0f)) == -2.0f);
  CHECK(io::f16_to_f32(io::f32_to_f16(65504.0f)) == 65504.0f);  // f16 max
  CHECK(std::isinf(io::f16_to_f32(io::f32_to_f16(1e20f))));
}

TEST_CASE("benchmark: single run degenerates, outputs deterministic") {
  nn::ModelConfig cfg = small_config();
  nn::ModelParams p = nn::ModelParams::init(cfg, 37);
  auto ds = small_dataset(4, cfg, 13);
  quant::InferModel engine(p);
  auto rep1 = bench::benchmark_forward("t", engine, ds, 1, 0);
  CHECK(rep1.mean_ms == rep1.p50_ms);
  CHECK(rep1.p50_ms == rep1.p99_ms);

  auto rep2 = bench::benchmark_forward("t", engine, ds, 7, 2);
  auto rep3 = bench::benchmark_forward("t", engine, ds, 7, 2);
  CHECK(rep2.output_hash == rep3.output_hash);
  CHECK(rep2.n_runs == 7);
  std::string j = rep2.to_json();
  CHECK(j.find("p99_ms") != std::string::npos);
}
