#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "platoonwatch/io.hpp"
#include "platoonwatch/loss.hpp"
#include "platoonwatch/model.hpp"
#include "platoonwatch/ref_kernels.hpp"
#include "platoonwatch/rng.hpp"

using namespace pw;
using nn::Batch;
using nn::ModelConfig;
using nn::ModelParams;
using nn::Tensor;

namespace {

Batch random_batch(const ModelConfig& cfg, std::int64_t B, std::int64_t V,
                   Rng& rng, double mask_keep = 1.0) {
  Batch b;
  b.X = Tensor({B, V, cfg.window, cfg.features});
  b.M = Tensor({B, V, cfg.window});
  b.offsets = Tensor({B, V});
  for (std::int64_t i = 0; i < b.X.numel(); ++i) b.X[i] = rng.uniform(-1, 1);
  for (std::int64_t i = 0; i < b.M.numel(); ++i)
    b.M[i] = rng.uniform() < mask_keep ? 1.0 : 0.0;
  // keep at least one valid token per (b,v) sequence
  for (std::int64_t i = 0; i < B * V; ++i) b.M[i * cfg.window] = 1.0;
  for (std::int64_t i = 0; i < b.offsets.numel(); ++i)
    b.offsets[i] = static_cast<double>(rng.below(40));
  return b;
}

}  // namespace

TEST_CASE("sinusoidal positional encoding basics") {
  auto pe0 = nn::sinusoidal_pe(0, 8);
  for (int i = 0; i < 8; i += 2) {
    CHECK(pe0[static_cast<std::size_t>(i)] == 0.0);
    CHECK(pe0[static_cast<std::size_t>(i + 1)] == 1.0);
  }
  auto pe1 = nn::sinusoidal_pe(1, 4);
  CHECK(pe1[0] == doctest::Approx(0.841471).epsilon(1e-6));
  CHECK(pe1[1] == doctest::Approx(0.540302).epsilon(1e-6));
  CHECK(pe1[2] == doctest::Approx(0.010000).epsilon(1e-4));
  CHECK(pe1[3] == doctest::Approx(0.999950).epsilon(1e-6));

  for (std::int64_t g : {0, 3, 17, 451}) {
    auto pe = nn::sinusoidal_pe(g, 16);
    for (int i = 0; i < 16; i += 2) {
      double r = pe[static_cast<std::size_t>(i)] * pe[static_cast<std::size_t>(i)] +
                 pe[static_cast<std::size_t>(i + 1)] * pe[static_cast<std::size_t>(i + 1)];
      CHECK(std::abs(r - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("global positions are exact integer sums") {
  Tensor off({2, 2}, {5.0, 0.0, 7.0, 12.0});
  Tensor g = nn::global_positions(off, 4);
  CHECK(g[(0 * 2 + 0) * 4 + 3] == 8.0);
  CHECK(g[(0 * 2 + 1) * 4 + 2] == 2.0);
  CHECK(g[(1 * 2 + 0) * 4 + 0] == 7.0);
  // offset 0 reproduces the local index
  for (int t = 0; t < 4; ++t) CHECK(g[(0 * 2 + 1) * 4 + t] == t);
}

TEST_CASE("PE rows coincide across vehicles when offsets align") {
  // vehicle a at offset 0, vehicle b at offset 7: pe(a, t+7) == pe(b, t)
  for (int t = 0; t < 5; ++t) {
    auto pa = nn::sinusoidal_pe(t + 7, 32);
    auto pb = nn::sinusoidal_pe(t + 7, 32);
    CHECK(pa == pb);
  }
}

TEST_CASE("equation fidelity: straight-line reference, 1 block / 1 head / d=2") {
  ModelConfig cfg;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.n_blocks = 1;
  cfg.d_ff = 8;
  cfg.dropout = 0.0;
  cfg.features = 3;
  cfg.window = 4;
  ModelParams params = ModelParams::init(cfg, 5);

  Rng rng(77);
  Batch b = random_batch(cfg, 1, 1, rng);
  b.offsets[0] = 6.0;
  Tensor got = nn::forward(params, b, false, 0);

  // independent straight-line computation
  int T = cfg.window, F = cfg.features, d = 2, dff = 8;
  auto W = [&](const nn::Parameter& p) { return p.value; };
  std::vector<std::vector<double>> h(static_cast<std::size_t>(T),
                                     std::vector<double>(2, 0.0));
  for (int t = 0; t < T; ++t) {
    for (int c = 0; c < d; ++c) {
      double s = W(params.b_embed)[c];
      for (int f = 0; f < F; ++f)
        s += b.X[t * F + f] * W(params.w_embed)[f * d + c];
      h[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] = s;
    }
    auto pe = nn::sinusoidal_pe(6 + t, d);
    for (int c = 0; c < d; ++c)
      h[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] +=
          pe[static_cast<std::size_t>(c)];
  }
  const auto& blk = params.blocks[0];
  auto matvec = [&](const std::vector<std::vector<double>>& x, const Tensor& M,
                    int din, int dout) {
    std::vector<std::vector<double>> y(x.size(), std::vector<double>(
                                                     static_cast<std::size_t>(dout), 0.0));
    for (std::size_t t = 0; t < x.size(); ++t)
      for (int j = 0; j < dout; ++j) {
        double s = 0.0;
        for (int i = 0; i < din; ++i) s += x[t][static_cast<std::size_t>(i)] * M[i * dout + j];
        y[t][static_cast<std::size_t>(j)] = s;
      }
    return y;
  };
  auto Q = matvec(h, W(blk.Wq), d, d);
  auto K = matvec(h, W(blk.Wk), d, d);
  auto V = matvec(h, W(blk.Wv), d, d);
  // scaled dot-product attention, all keys valid
  std::vector<std::vector<double>> A(static_cast<std::size_t>(T),
                                     std::vector<double>(2, 0.0));
  for (int t = 0; t < T; ++t) {
    std::vector<double> sc(static_cast<std::size_t>(T));
    double mx = -1e300;
    for (int u = 0; u < T; ++u) {
      double s = 0.0;
      for (int c = 0; c < d; ++c)
        s += Q[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] *
             K[static_cast<std::size_t>(u)][static_cast<std::size_t>(c)];
      sc[static_cast<std::size_t>(u)] = s / std::sqrt(2.0);
      mx = std::max(mx, sc[static_cast<std::size_t>(u)]);
    }
    double den = 0.0;
    for (int u = 0; u < T; ++u) {
      sc[static_cast<std::size_t>(u)] = std::exp(sc[static_cast<std::size_t>(u)] - mx);
      den += sc[static_cast<std::size_t>(u)];
    }
    for (int u = 0; u < T; ++u)
      for (int c = 0; c < d; ++c)
        A[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] +=
            (sc[static_cast<std::size_t>(u)] / den) *
            V[static_cast<std::size_t>(u)][static_cast<std::size_t>(c)];
  }
  auto attn = matvec(A, W(blk.Wo), d, d);
  auto layernorm = [&](std::vector<std::vector<double>>& x, const Tensor& gain,
                       const Tensor& bias) {
    for (auto& row : x) {
      double mean = 0.0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      double var = 0.0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      double rstd = 1.0 / std::sqrt(var + 1e-5);
      for (std::size_t c = 0; c < row.size(); ++c)
        row[c] = gain[static_cast<std::int64_t>(c)] * (row[c] - mean) * rstd +
                 bias[static_cast<std::int64_t>(c)];
    }
  };
  std::vector<std::vector<double>> h1 = h;
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < d; ++c)
      h1[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] +=
          attn[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
  layernorm(h1, W(blk.ln1_gain), W(blk.ln1_bias));
  auto mid = matvec(h1, W(blk.W1), d, dff);
  for (auto& row : mid)
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] += W(blk.b1)[static_cast<std::int64_t>(c)];
      row[c] = std::max(0.0, row[c]);
    }
  auto ffn = matvec(mid, W(blk.W2), dff, d);
  std::vector<std::vector<double>> h2 = h1;
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < d; ++c)
      h2[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] +=
          ffn[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] +
          W(blk.b2)[c];
  layernorm(h2, W(blk.ln2_gain), W(blk.ln2_bias));
  for (int t = 0; t < T; ++t) {
    double logit = W(params.b_out)[0];
    for (int c = 0; c < d; ++c)
      logit += h2[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] *
               W(params.w_out)[c];
    CHECK(std::abs(got[t] - logit) <= 1e-12);
  }
}

TEST_CASE("multi-head attention matches the naive per-head oracle") {
  ModelConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.d_ff = 16;
  cfg.features = 3;
  cfg.window = 3;
  ModelParams params = ModelParams::init(cfg, 11);
  const auto& blk = params.blocks[0];

  Rng rng(3);
  std::int64_t S = 2, Ts = 3, d = 4, dk = 2;
  Tensor h({S * Ts, d});
  for (std::int64_t i = 0; i < h.numel(); ++i) h[i] = rng.uniform(-1, 1);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(S * Ts), 1);
  valid[1] = 0;  // one padded token in sequence 0

  Tensor got = nn::multi_head_attention(blk, h, S, Ts, cfg.n_heads, valid);

  // naive: project with plain loops, run each (sequence, head) through the
  // triple-loop reference, then the output projection
  Tensor Q({S * Ts, d}), K({S * Ts, d}), Vv({S * Ts, d});
  ref::matmul(h.data(), blk.Wq.value.data(), Q.data(), S * Ts, d, d);
  ref::matmul(h.data(), blk.Wk.value.data(), K.data(), S * Ts, d, d);
  ref::matmul(h.data(), blk.Wv.value.data(), Vv.data(), S * Ts, d, d);
  Tensor concat({S * Ts, d});
  for (std::int64_t s = 0; s < S; ++s)
    for (int hh = 0; hh < 2; ++hh) {
      std::vector<double> q(static_cast<std::size_t>(Ts * dk)),
          k(static_cast<std::size_t>(Ts * dk)), v(static_cast<std::size_t>(Ts * dk)),
          out(static_cast<std::size_t>(Ts * dk));
      for (std::int64_t t = 0; t < Ts; ++t)
        for (std::int64_t c = 0; c < dk; ++c) {
          q[static_cast<std::size_t>(t * dk + c)] = Q[(s * Ts + t) * d + hh * dk + c];
          k[static_cast<std::size_t>(t * dk + c)] = K[(s * Ts + t) * d + hh * dk + c];
          v[static_cast<std::size_t>(t * dk + c)] = Vv[(s * Ts + t) * d + hh * dk + c];
        }
      ref::attention_naive(q.data(), k.data(), v.data(),
                           valid.data() + s * Ts, Ts, dk, out.data(),
                           valid.data() + s * Ts);
      for (std::int64_t t = 0; t < Ts; ++t)
        for (std::int64_t c = 0; c < dk; ++c)
          concat[(s * Ts + t) * d + hh * dk + c] =
              out[static_cast<std::size_t>(t * dk + c)];
    }
  Tensor expect({S * Ts, d});
  ref::matmul(concat.data(), blk.Wo.value.data(), expect.data(), S * Ts, d, d);
  for (std::int64_t i = 0; i < got.numel(); ++i)
    CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("attention edge cases: self-only keys and uniform weights") {
  ModelConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 1;
  cfg.n_blocks = 1;
  cfg.d_ff = 16;
  ModelParams params = ModelParams::init(cfg, 2);
  auto& blk = params.blocks[0];
  // identity output projection, identity values
  blk.Wo.value.zero();
  blk.Wv.value.zero();
  for (int i = 0; i < 4; ++i) {
    blk.Wo.value[i * 4 + i] = 1.0;
    blk.Wv.value[i * 4 + i] = 1.0;
  }

  Rng rng(8);
  std::int64_t S = 1, Ts = 4, d = 4;
  Tensor h({Ts, d});
  for (std::int64_t i = 0; i < h.numel(); ++i) h[i] = rng.uniform(-1, 1);

  // every key except token 2 padded: the valid query 2 sees only itself
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(Ts), 0);
  valid[2] = 1;
  Tensor out = nn::multi_head_attention(blk, h, S, Ts, 1, valid);
  for (int c = 0; c < 4; ++c)
    CHECK(out[2 * 4 + c] == doctest::Approx(h[2 * 4 + c]).epsilon(1e-12));

  // zero query/key projections give uniform attention over valid keys
  blk.Wq.value.zero();
  blk.Wk.value.zero();
  std::vector<std::uint8_t> all_valid(static_cast<std::size_t>(Ts), 1);
  Tensor out2 = nn::multi_head_attention(blk, h, S, Ts, 1, all_valid);
  for (int c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (int u = 0; u < 4; ++u) mean += h[u * 4 + c];
    mean /= 4.0;
    CHECK(out2[0 * 4 + c] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("per-vehicle mode: other vehicles' logits are bit-identical") {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.d_ff = 64;
  cfg.features = 5;
  cfg.window = 6;
  ModelParams params = ModelParams::init(cfg, 21);
  Rng rng(31);
  Batch b = random_batch(cfg, 2, 3, rng);
  Tensor base = nn::forward(params, b, false, 0);

  Batch b2 = b;
  for (std::int64_t t = 0; t < cfg.window; ++t)
    for (std::int64_t f = 0; f < cfg.features; ++f)
      b2.X[((0 * 3 + 1) * cfg.window + t) * cfg.features + f] += 3.7;
  Tensor pert = nn::forward(params, b2, false, 0);

  for (std::int64_t s = 0; s < 2; ++s)
    for (std::int64_t v = 0; v < 3; ++v)
      for (std::int64_t t = 0; t < cfg.window; ++t) {
        double a = base[(s * 3 + v) * cfg.window + t];
        double c = pert[(s * 3 + v) * cfg.window + t];
        if (s == 0 && v == 1) continue;
        CHECK(a == c);  // bitwise
      }
}

TEST_CASE("inter-vehicle mode: cross-vehicle influence exists") {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.d_ff = 64;
  cfg.features = 5;
  cfg.window = 6;
  cfg.mode = nn::EncodingMode::InterVehicle;
  ModelParams params = ModelParams::init(cfg, 21);
  Rng rng(31);
  Batch b = random_batch(cfg, 1, 3, rng);
  Tensor base = nn::forward(params, b, false, 0);
  Batch b2 = b;
  b2.X[((0 * 3 + 1) * cfg.window + 0) * cfg.features + 0] += 2.0;
  Tensor pert = nn::forward(params, b2, false, 0);
  bool other_changed = false;
  for (std::int64_t v = 0; v < 3; ++v) {
    if (v == 1) continue;
    for (std::int64_t t = 0; t < cfg.window; ++t)
      if (base[(v)*cfg.window + t] != pert[(v)*cfg.window + t])
        other_changed = true;
  }
  CHECK(other_changed);
}

TEST_CASE("mask insensitivity is bit-exact in both modes") {
  for (auto mode : {nn::EncodingMode::PerVehicle, nn::EncodingMode::InterVehicle}) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_blocks = 2;
    cfg.d_ff = 64;
    cfg.features = 5;
    cfg.window = 6;
    cfg.mode = mode;
    ModelParams params = ModelParams::init(cfg, 4);
    Rng rng(55);
    Batch b = random_batch(cfg, 2, 3, rng, /*mask_keep=*/0.6);
    Tensor base = nn::forward(params, b, false, 0);

    Batch b2 = b;
    for (std::int64_t i = 0; i < b.M.numel(); ++i) {
      if (b.M[i] == 0.0)
        for (std::int64_t f = 0; f < cfg.features; ++f)
          b2.X[i * cfg.features + f] = rng.uniform(-50, 50);
    }
    Tensor pert = nn::forward(params, b2, false, 0);
    for (std::int64_t i = 0; i < base.numel(); ++i)
      if (b.M[i] == 1.0) CHECK(base[i] == pert[i]);  // bitwise
  }
}

TEST_CASE("forward determinism") {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.d_ff = 64;
  cfg.features = 5;
  cfg.window = 6;
  cfg.dropout = 0.3;
  ModelParams params = ModelParams::init(cfg, 77);
  Rng rng(1);
  Batch b = random_batch(cfg, 2, 2, rng);
  Tensor a1 = nn::forward(params, b, false, 0);
  Tensor a2 = nn::forward(params, b, false, 99);  // eval mode ignores the seed
  for (std::int64_t i = 0; i < a1.numel(); ++i) CHECK(a1[i] == a2[i]);

  Tensor t1 = nn::forward(params, b, true, 42);
  Tensor t2 = nn::forward(params, b, true, 42);
  Tensor t3 = nn::forward(params, b, true, 43);
  bool differs = false;
  for (std::int64_t i = 0; i < t1.numel(); ++i) {
    CHECK(t1[i] == t2[i]);
    if (t1[i] != t3[i]) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("zeroed FFN collapses the block to LN2(LN1(H + A))") {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.d_ff = 32;
  cfg.features = 4;
  cfg.window = 5;
  cfg.dropout = 0.0;
  ModelParams params = ModelParams::init(cfg, 6);
  auto& blk = params.blocks[0];
  blk.W1.value.zero();
  blk.W2.value.zero();
  blk.b1.value.zero();
  blk.b2.value.zero();

  Rng rng(2);
  Batch b = random_batch(cfg, 1, 1, rng);
  nn::ForwardCache cache;
  nn::forward(params, b, false, 0, &cache);

  // reference: h1 from the cache, then LN2(h1 + 0)
  Tensor expect = ref::layer_norm(cache.blocks[0].h1, blk.ln2_gain.value,
                                  blk.ln2_bias.value);
  for (std::int64_t i = 0; i < expect.numel(); ++i)
    CHECK(cache.h_final[i] == doctest::Approx(expect[i]).epsilon(1e-13));
}

TEST_CASE("full-model gradient matches finite differences") {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.d_ff = 32;
  cfg.features = 4;
  cfg.window = 4;
  cfg.dropout = 0.0;
  ModelParams params = ModelParams::init(cfg, 123);
  Rng rng(9);
  Batch b = random_batch(cfg, 2, 2, rng, 0.8);
  Tensor y({2, 2, 4});
  for (std::int64_t i = 0; i < y.numel(); ++i)
    y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  nn::LossConfig lcfg;

  auto eval_fn = [&](bool with_grad) {
    nn::ForwardCache cache;
    Tensor logits = nn::forward(params, b, false, 0, with_grad ? &cache : nullptr);
    double loss = nn::pfbce(logits, y, b.M, lcfg);
    if (with_grad) {
      params.zero_grad();
      Tensor dl = nn::pfbce_grad(logits, y, b.M, lcfg);
      nn::backward(params, cache, dl);
    }
    return loss;
  };
  auto res = nn::grad_check(eval_fn, params.all(), 1e-5);
  INFO("worst: " << res.worst_param << "[" << res.worst_index
                 << "] analytic=" << res.analytic << " numeric=" << res.numeric);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("checkpoint roundtrip") {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.d_ff = 32;
  cfg.features = 4;
  cfg.window = 4;
  ModelParams params = ModelParams::init(cfg, 3);
  Rng rng(10);
  Batch b = random_batch(cfg, 1, 2, rng);
  Tensor before = nn::forward(params, b, false, 0);

  auto dir = std::filesystem::temp_directory_path() / "pw_model_test";
  std::filesystem::create_directories(dir);
  auto p64 = dir / "m.f64.ck";
  nn::save_checkpoint(params, p64, nn::BlobDtype::f64);
  nn::Checkpoint ck = nn::load_checkpoint(p64, cfg);
  Tensor after = nn::forward(ck.params, b, false, 0);
  for (std::int64_t i = 0; i < before.numel(); ++i) CHECK(before[i] == after[i]);

  // f32 checkpoint quantizes the values to float precision
  auto p32 = dir / "m.f32.ck";
  nn::save_checkpoint(params, p32, nn::BlobDtype::f32);
  nn::Checkpoint ck32 = nn::load_checkpoint(p32);
  for (std::int64_t i = 0; i < params.w_embed.value.numel(); ++i)
    CHECK(ck32.params.w_embed.value[i] ==
          static_cast<double>(static_cast<float>(params.w_embed.value[i])));

  // corruption is caught by the checksum
  auto bytes = io::read_file(p64);
  bytes[bytes.size() / 2] ^= 0x40;
  auto pbad = dir / "m.bad.ck";
  io::write_file(pbad, bytes);
  CHECK_THROWS_AS(nn::load_checkpoint(pbad), IoError);

  // config mismatch is a descriptive error
  ModelConfig other = cfg;
  other.n_blocks = 2;
  CHECK_THROWS_AS(nn::load_checkpoint(p64, other), IoError);
}

TEST_CASE("fully masked sequences are tolerated and inert") {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.d_ff = 32;
  cfg.features = 4;
  cfg.window = 4;
  ModelParams params = ModelParams::init(cfg, 3);
  Rng rng(12);
  Batch b = random_batch(cfg, 1, 2, rng);
  for (std::int64_t t = 0; t < cfg.window; ++t) b.M[0 * cfg.window + t] = 0.0;  // vehicle 0 absent
  Tensor base = nn::forward(params, b, false, 0);
  Batch b2 = b;
  for (std::int64_t t = 0; t < cfg.window; ++t)
    for (std::int64_t f = 0; f < cfg.features; ++f)
      b2.X[(0 * cfg.window + t) * cfg.features + f] = 99.0;
  Tensor pert = nn::forward(params, b2, false, 0);
  for (std::int64_t t = 0; t < cfg.window; ++t)
    CHECK(base[1 * cfg.window + t] == pert[1 * cfg.window + t]);
}
