#include "platoonwatch/model.hpp"

#include <cmath>
#include <json.hpp>

#include "platoonwatch/io.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::nn {

using nlohmann::json;

const char* to_string(EncodingMode m) {
  return m == EncodingMode::PerVehicle ? "per_vehicle" : "inter_vehicle";
}

EncodingMode encoding_mode_from_string(const std::string& s) {
  if (s == "per_vehicle") return EncodingMode::PerVehicle;
  if (s == "inter_vehicle") return EncodingMode::InterVehicle;
  throw ConfigError("unknown encoding mode: " + s);
}

void ModelConfig::validate() const {
  if (d_model <= 0 || d_model % 2 != 0)
    throw ConfigError("model: d_model must be positive and even");
  if (n_heads <= 0 || d_model % n_heads != 0)
    throw ConfigError("model: d_model must be divisible by n_heads");
  if (d_ff != 4 * d_model)
    throw ConfigError("model: d_ff must equal 4*d_model, got " +
                      std::to_string(d_ff));
  if (n_blocks <= 0) throw ConfigError("model: n_blocks must be positive");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ConfigError("model: dropout must be in [0,1)");
  if (features <= 0 || window <= 0)
    throw ConfigError("model: features and window must be positive");
}

std::string ModelConfig::to_json() const {
  json j;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_blocks"] = n_blocks;
  j["d_ff"] = d_ff;
  j["dropout"] = dropout;
  j["mode"] = to_string(mode);
  j["causal"] = causal;
  j["features"] = features;
  j["window"] = window;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
  json j = json::parse(s);
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_blocks = j.at("n_blocks").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.mode = encoding_mode_from_string(j.at("mode").get<std::string>());
  c.causal = j.at("causal").get<bool>();
  c.features = j.at("features").get<int>();
  c.window = j.at("window").get<int>();
  return c;
}

namespace {

void xavier(Tensor& w, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-a, a);
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  std::int64_t d = cfg.d_model, dff = cfg.d_ff, f = cfg.features;
  p.w_embed = Parameter("embed.W", {f, d});
  p.b_embed = Parameter("embed.b", {d});
  p.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
  for (int i = 0; i < cfg.n_blocks; ++i) {
    auto& b = p.blocks[static_cast<std::size_t>(i)];
    std::string pre = "block" + std::to_string(i) + ".";
    b.Wq = Parameter(pre + "Wq", {d, d});
    b.Wk = Parameter(pre + "Wk", {d, d});
    b.Wv = Parameter(pre + "Wv", {d, d});
    b.Wo = Parameter(pre + "Wo", {d, d});
    b.ln1_gain = Parameter(pre + "ln1.gain", {d});
    b.ln1_bias = Parameter(pre + "ln1.bias", {d});
    b.ln2_gain = Parameter(pre + "ln2.gain", {d});
    b.ln2_bias = Parameter(pre + "ln2.bias", {d});
    b.W1 = Parameter(pre + "ffn.W1", {d, dff});
    b.b1 = Parameter(pre + "ffn.b1", {dff});
    b.W2 = Parameter(pre + "ffn.W2", {dff, d});
    b.b2 = Parameter(pre + "ffn.b2", {d});
  }
  p.w_out = Parameter("out.W", {d, 1});
  p.b_out = Parameter("out.b", {1});
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zeros(cfg);
  std::uint64_t k = 0;
  auto next_rng = [&]() { return Rng(mix_seed(seed, k++)); };
  {
    Rng r = next_rng();
    xavier(p.w_embed.value, cfg.features, cfg.d_model, r);
  }
  for (auto& b : p.blocks) {
    for (Parameter* w : {&b.Wq, &b.Wk, &b.Wv, &b.Wo}) {
      Rng r = next_rng();
      xavier(w->value, cfg.d_model, cfg.d_model, r);
    }
    {
      Rng r = next_rng();
      xavier(b.W1.value, cfg.d_model, cfg.d_ff, r);
    }
    {
      Rng r = next_rng();
      xavier(b.W2.value, cfg.d_ff, cfg.d_model, r);
    }
    b.ln1_gain.value.fill(1.0);
    b.ln2_gain.value.fill(1.0);
  }
  {
    Rng r = next_rng();
    xavier(p.w_out.value, cfg.d_model, 1, r);
  }
  return p;
}

std::vector<Parameter*> ModelParams::all() {
  std::vector<Parameter*> v{&w_embed, &b_embed};
  for (auto& b : blocks) {
    for (Parameter* p : {&b.Wq, &b.Wk, &b.Wv, &b.Wo, &b.ln1_gain, &b.ln1_bias,
                         &b.ln2_gain, &b.ln2_bias, &b.W1, &b.b1, &b.W2, &b.b2})
      v.push_back(p);
  }
  v.push_back(&w_out);
  v.push_back(&b_out);
  return v;
}

std::vector<const Parameter*> ModelParams::all() const {
  auto* self = const_cast<ModelParams*>(this);
  auto mv = self->all();
  return {mv.begin(), mv.end()};
}

void ModelParams::zero_grad() {
  for (auto* p : all()) p->zero_grad();
}

std::int64_t ModelParams::param_count() const {
  std::int64_t n = 0;
  for (const auto* p : all()) n += p->value.numel();
  return n;
}

std::vector<double> sinusoidal_pe(std::int64_t g, int d_model) {
  std::vector<double> pe(static_cast<std::size_t>(d_model));
  for (int i = 0; 2 * i < d_model; ++i) {
    double denom = std::pow(10000.0, (2.0 * i) / d_model);
    double arg = static_cast<double>(g) / denom;
    pe[static_cast<std::size_t>(2 * i)] = std::sin(arg);
    pe[static_cast<std::size_t>(2 * i + 1)] = std::cos(arg);
  }
  return pe;
}

Tensor global_positions(const Tensor& offsets, int T) {
  if (offsets.ndim() != 2)
    throw ShapeError("global_positions: offsets must be [B,V]");
  std::int64_t B = offsets.dim(0), V = offsets.dim(1);
  Tensor g({B, V, T});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t v = 0; v < V; ++v) {
      double off = offsets[b * V + v];
      if (off < 0.0 || off != std::floor(off))
        throw ShapeError("global_positions: offsets must be non-negative integers");
      for (std::int64_t t = 0; t < T; ++t)
        g[(b * V + v) * T + t] = off + static_cast<double>(t);
    }
  return g;
}

namespace {

struct Geometry {
  std::int64_t S, Ts, B, V, T, N;
};

Geometry geometry(const ModelConfig& cfg, const Batch& batch) {
  if (batch.X.ndim() != 4)
    throw ShapeError("forward: X must be [B,V,T,F], got " + batch.X.shape_str());
  std::int64_t B = batch.X.dim(0), V = batch.X.dim(1), T = batch.X.dim(2),
               F = batch.X.dim(3);
  if (F != cfg.features || T != cfg.window)
    throw ShapeError("forward: X " + batch.X.shape_str() +
                     " does not match config (F=" + std::to_string(cfg.features) +
                     ", T=" + std::to_string(cfg.window) + ")");
  if (batch.M.ndim() != 3 || batch.M.dim(0) != B || batch.M.dim(1) != V ||
      batch.M.dim(2) != T)
    throw ShapeError("forward: M " + batch.M.shape_str() + " does not match X");
  if (batch.offsets.ndim() != 2 || batch.offsets.dim(0) != B ||
      batch.offsets.dim(1) != V)
    throw ShapeError("forward: offsets " + batch.offsets.shape_str() +
                     " must be [B,V]");
  Geometry g;
  g.B = B;
  g.V = V;
  g.T = T;
  g.N = B * V * T;
  if (cfg.mode == EncodingMode::PerVehicle) {
    g.S = B * V;
    g.Ts = T;
  } else {
    g.S = B;
    g.Ts = V * T;
  }
  return g;
}

// Positional encoding rows cached by global index.
class PeCache {
 public:
  explicit PeCache(int d) : d_(d) {}
  const double* row(std::int64_t g) {
    auto idx = static_cast<std::size_t>(g);
    if (idx >= rows_.size()) rows_.resize(idx + 1);
    if (rows_[idx].empty()) rows_[idx] = sinusoidal_pe(g, d_);
    return rows_[idx].data();
  }

 private:
  int d_;
  std::vector<std::vector<double>> rows_;
};

void add_inplace(Tensor& a, const Tensor& b) {
  std::int64_t n = a.numel();
  double* ap = a.data();
  const double* bp = b.data();
#pragma omp parallel for schedule(static) if (n > 16384)
  for (std::int64_t i = 0; i < n; ++i) ap[i] += bp[i];
}

// Multi-head self-attention for S sequences of Ts tokens. Padded keys get
// exactly zero weight; padded queries attend to themselves only.
void attention_forward(const BlockParams& bp, const Tensor& h_in,
                       const Geometry& g, int n_heads, bool causal,
                       const std::vector<std::uint8_t>& valid,
                       BlockCache& cache) {
  std::int64_t d = h_in.last_dim();
  std::int64_t dk = d / n_heads;
  std::int64_t N = g.N, S = g.S, Ts = g.Ts;
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  cache.Q = Tensor({N, d});
  cache.K = Tensor({N, d});
  cache.V = Tensor({N, d});
  matmul(h_in.data(), bp.Wq.value.data(), cache.Q.data(), N, d, d);
  matmul(h_in.data(), bp.Wk.value.data(), cache.K.data(), N, d, d);
  matmul(h_in.data(), bp.Wv.value.data(), cache.V.data(), N, d, d);

  cache.probs = Tensor({S, n_heads, Ts, Ts});
  cache.attn_concat = Tensor({N, d});

  const double* Qp = cache.Q.data();
  const double* Kp = cache.K.data();
  const double* Vp = cache.V.data();
  double* Pp = cache.probs.data();
  double* Cp = cache.attn_concat.data();

#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < S; ++s) {
    std::vector<double> row(static_cast<std::size_t>(Ts));
    for (int h = 0; h < n_heads; ++h) {
      std::int64_t hoff = static_cast<std::int64_t>(h) * dk;
      for (std::int64_t t = 0; t < Ts; ++t) {
        double* p = Pp + ((s * n_heads + h) * Ts + t) * Ts;
        std::int64_t nt = s * Ts + t;
        if (!valid[static_cast<std::size_t>(nt)]) {
          for (std::int64_t u = 0; u < Ts; ++u) p[u] = (u == t) ? 1.0 : 0.0;
        } else {
          const double* q = Qp + nt * d + hoff;
          double maxv = -1e300;
          bool any = false;
          for (std::int64_t u = 0; u < Ts; ++u) {
            bool key_ok = valid[static_cast<std::size_t>(s * Ts + u)] &&
                          (!causal || u <= t);
            if (!key_ok) {
              row[static_cast<std::size_t>(u)] = kMaskNegInf;
              continue;
            }
            any = true;
            const double* kk = Kp + (s * Ts + u) * d + hoff;
            double dot = 0.0;
            for (std::int64_t c = 0; c < dk; ++c) dot += q[c] * kk[c];
            double v = dot * scale;
            row[static_cast<std::size_t>(u)] = v;
            if (v > maxv) maxv = v;
          }
          if (!any)
            throw ShapeError("attention: valid query with no valid key");
          double denom = 0.0;
          for (std::int64_t u = 0; u < Ts; ++u) {
            if (row[static_cast<std::size_t>(u)] <= kMaskNegInf) {
              p[u] = 0.0;
              continue;
            }
            double e = std::exp(row[static_cast<std::size_t>(u)] - maxv);
            p[u] = e;
            denom += e;
          }
          double inv = 1.0 / denom;
          for (std::int64_t u = 0; u < Ts; ++u) p[u] *= inv;
        }
        // weighted sum of values
        double* out = Cp + nt * d + hoff;
        for (std::int64_t c = 0; c < dk; ++c) out[c] = 0.0;
        for (std::int64_t u = 0; u < Ts; ++u) {
          double w = p[u];
          if (w == 0.0) continue;
          const double* vv = Vp + (s * Ts + u) * d + hoff;
          for (std::int64_t c = 0; c < dk; ++c) out[c] += w * vv[c];
        }
      }
    }
  }
}

void attention_backward(const BlockParams& bp, const Geometry& g, int n_heads,
                        const std::vector<std::uint8_t>& valid,
                        const BlockCache& cache, const Tensor& d_attn_out,
                        Tensor& dh_in, BlockParams& grads) {
  std::int64_t d = cache.h_in.last_dim();
  std::int64_t dk = d / n_heads;
  std::int64_t N = g.N, S = g.S, Ts = g.Ts;
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  // through the output projection
  Tensor d_concat({N, d});
  matmul_nt(d_attn_out.data(), bp.Wo.value.data(), d_concat.data(), N, d, d);
  matmul_tn(cache.attn_concat.data(), d_attn_out.data(), grads.Wo.grad.data(),
            N, d, d, /*acc=*/true);

  Tensor dQ({N, d}), dK({N, d}), dV({N, d});
  const double* Pp = cache.probs.data();
  const double* Qp = cache.Q.data();
  const double* Kp = cache.K.data();
  const double* Vp = cache.V.data();
  const double* dCp = d_concat.data();
  double* dQp = dQ.data();
  double* dKp = dK.data();
  double* dVp = dV.data();

#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < S; ++s) {
    std::vector<double> dp(static_cast<std::size_t>(Ts));
    std::vector<double> ds(static_cast<std::size_t>(Ts));
    for (int h = 0; h < n_heads; ++h) {
      std::int64_t hoff = static_cast<std::int64_t>(h) * dk;
      for (std::int64_t t = 0; t < Ts; ++t) {
        std::int64_t nt = s * Ts + t;
        const double* p = Pp + ((s * n_heads + h) * Ts + t) * Ts;
        const double* dout = dCp + nt * d + hoff;
        // dV accumulation and d(probs)
        for (std::int64_t u = 0; u < Ts; ++u) {
          double w = p[u];
          double acc = 0.0;
          const double* vv = Vp + (s * Ts + u) * d + hoff;
          double* dvv = dVp + (s * Ts + u) * d + hoff;
          for (std::int64_t c = 0; c < dk; ++c) {
            acc += dout[c] * vv[c];
            dvv[c] += w * dout[c];
          }
          dp[static_cast<std::size_t>(u)] = acc;
        }
        if (!valid[static_cast<std::size_t>(nt)]) continue;  // one-hot row: zero grad
        double dot = 0.0;
        for (std::int64_t u = 0; u < Ts; ++u)
          dot += p[u] * dp[static_cast<std::size_t>(u)];
        for (std::int64_t u = 0; u < Ts; ++u)
          ds[static_cast<std::size_t>(u)] =
              p[u] * (dp[static_cast<std::size_t>(u)] - dot);
        double* dq = dQp + nt * d + hoff;
        for (std::int64_t u = 0; u < Ts; ++u) {
          double sgrad = ds[static_cast<std::size_t>(u)] * scale;
          if (sgrad == 0.0) continue;
          const double* kk = Kp + (s * Ts + u) * d + hoff;
          double* dkk = dKp + (s * Ts + u) * d + hoff;
          const double* q = Qp + nt * d + hoff;
          for (std::int64_t c = 0; c < dk; ++c) {
            dq[c] += sgrad * kk[c];
            dkk[c] += sgrad * q[c];
          }
        }
      }
    }
  }

  // back through the projections; dh_in accumulates all three routes
  matmul_nt(dQ.data(), bp.Wq.value.data(), dh_in.data(), N, d, d, /*acc=*/true);
  matmul_nt(dK.data(), bp.Wk.value.data(), dh_in.data(), N, d, d, /*acc=*/true);
  matmul_nt(dV.data(), bp.Wv.value.data(), dh_in.data(), N, d, d, /*acc=*/true);
  matmul_tn(cache.h_in.data(), dQ.data(), grads.Wq.grad.data(), N, d, d, true);
  matmul_tn(cache.h_in.data(), dK.data(), grads.Wk.grad.data(), N, d, d, true);
  matmul_tn(cache.h_in.data(), dV.data(), grads.Wv.grad.data(), N, d, d, true);
}

}  // namespace

Tensor multi_head_attention(const BlockParams& bp, const Tensor& h_in,
                            std::int64_t S, std::int64_t Ts, int n_heads,
                            const std::vector<std::uint8_t>& valid,
                            bool causal) {
  if (h_in.rows() != S * Ts)
    throw ShapeError("multi_head_attention: h_in rows do not match S*Ts");
  std::int64_t d = h_in.last_dim();
  Geometry g{S, Ts, 0, 0, 0, S * Ts};
  BlockCache cache;
  cache.h_in = h_in;
  attention_forward(bp, h_in, g, n_heads, causal, valid, cache);
  Tensor out({S * Ts, d});
  matmul(cache.attn_concat.data(), bp.Wo.value.data(), out.data(), S * Ts, d, d);
  return out;
}

Tensor forward(const ModelParams& params, const Batch& batch, bool training,
               std::uint64_t seed, ForwardCache* cache, AttentionMaps* maps) {
  const ModelConfig& cfg = params.cfg;
  cfg.validate();
  Geometry g = geometry(cfg, batch);
  ensure_finite(batch.X, "forward input");

  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc.S = g.S;
  fc.Ts = g.Ts;
  fc.B = g.B;
  fc.V = g.V;
  fc.T = g.T;
  fc.valid.assign(static_cast<std::size_t>(g.N), 0);
  for (std::int64_t i = 0; i < g.N; ++i) {
    double m = batch.M[i];
    if (m != 0.0 && m != 1.0)
      throw ShapeError("forward: mask element outside {0,1}");
    fc.valid[static_cast<std::size_t>(i)] = m == 1.0 ? 1 : 0;
  }

  fc.x_flat = batch.X.reshaped({g.N, cfg.features});
  Tensor h = affine(fc.x_flat, params.w_embed.value, params.b_embed.value);

  // add positional encoding: g[b,v,t] = t + offsets[b,v]
  {
    PeCache pe(cfg.d_model);
    double* hp = h.data();
    for (std::int64_t b = 0; b < g.B; ++b)
      for (std::int64_t v = 0; v < g.V; ++v) {
        double off = batch.offsets[b * g.V + v];
        if (off < 0.0 || off != std::floor(off))
          throw ShapeError("forward: offsets must be non-negative integers");
        for (std::int64_t t = 0; t < g.T; ++t) {
          const double* row = pe.row(static_cast<std::int64_t>(off) + t);
          double* dst = hp + ((b * g.V + v) * g.T + t) * cfg.d_model;
          for (int c = 0; c < cfg.d_model; ++c) dst[c] += row[c];
        }
      }
  }

  fc.blocks.clear();
  fc.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
  if (maps) maps->maps.assign(static_cast<std::size_t>(cfg.n_blocks), {});

  for (int bi = 0; bi < cfg.n_blocks; ++bi) {
    auto& bp = params.blocks[static_cast<std::size_t>(bi)];
    auto& bc = fc.blocks[static_cast<std::size_t>(bi)];
    try {
      bc.h_in = std::move(h);
      attention_forward(bp, bc.h_in, g, cfg.n_heads, cfg.causal, fc.valid, bc);
      Tensor attn_out({g.N, static_cast<std::int64_t>(cfg.d_model)});
      matmul(bc.attn_concat.data(), bp.Wo.value.data(), attn_out.data(), g.N,
             cfg.d_model, cfg.d_model);
      ensure_finite(attn_out, "attention output");

      if (maps) {
        auto& dst = maps->maps[static_cast<std::size_t>(bi)];
        dst.clear();
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
          Tensor m({g.S, g.Ts, g.Ts});
          for (std::int64_t s = 0; s < g.S; ++s)
            for (std::int64_t t = 0; t < g.Ts; ++t)
              for (std::int64_t u = 0; u < g.Ts; ++u)
                m[(s * g.Ts + t) * g.Ts + u] =
                    bc.probs[((s * cfg.n_heads + hh) * g.Ts + t) * g.Ts + u];
          dst.push_back(std::move(m));
        }
      }

      Tensor dropped = dropout(attn_out, cfg.dropout,
                               mix_seed(seed, static_cast<std::uint64_t>(2 * bi)),
                               training, bc.drop1);
      add_inplace(dropped, bc.h_in);
      bc.h1 = layer_norm(dropped, bp.ln1_gain.value, bp.ln1_bias.value, bc.ln1);

      Tensor mid = affine(bc.h1, bp.W1.value, bp.b1.value);
      bc.ffn_mid = relu(mid);
      Tensor ffn_out = affine(bc.ffn_mid, bp.W2.value, bp.b2.value);
      Tensor dropped2 =
          dropout(ffn_out, cfg.dropout,
                  mix_seed(seed, static_cast<std::uint64_t>(2 * bi + 1)),
                  training, bc.drop2);
      add_inplace(dropped2, bc.h1);
      h = layer_norm(dropped2, bp.ln2_gain.value, bp.ln2_bias.value, bc.ln2);
    } catch (const NumericError& e) {
      throw NumericError("encoder block " + std::to_string(bi) + ": " + e.what());
    }
  }

  fc.h_final = h;
  Tensor logits_flat = affine(fc.h_final, params.w_out.value, params.b_out.value);
  return logits_flat.reshaped({g.B, g.V, g.T});
}

void backward(const ModelParams& params, const ForwardCache& fc,
              const Tensor& dlogits) {
  const ModelConfig& cfg = params.cfg;
  std::int64_t N = fc.B * fc.V * fc.T;
  std::int64_t d = cfg.d_model;
  Geometry g{fc.S, fc.Ts, fc.B, fc.V, fc.T, N};
  auto& P = const_cast<ModelParams&>(params);

  Tensor dl = dlogits.reshaped({N, 1});
  Tensor dh({N, d});
  affine_backward(fc.h_final, params.w_out.value, dl, dh, P.w_out.grad,
                  P.b_out.grad);

  for (int bi = cfg.n_blocks - 1; bi >= 0; --bi) {
    auto& bp = P.blocks[static_cast<std::size_t>(bi)];
    const auto& bc = fc.blocks[static_cast<std::size_t>(bi)];

    // ln2 -> residual (h1 + drop2(ffn_out))
    Tensor d_res2({N, d});
    layer_norm_backward(bp.ln2_gain.value, bc.ln2, dh, d_res2,
                        bp.ln2_gain.grad, bp.ln2_bias.grad);
    Tensor dh1 = d_res2;  // residual branch
    Tensor d_ffn_out;
    dropout_backward(bc.drop2, d_res2, d_ffn_out);

    // FFN
    Tensor d_mid({N, static_cast<std::int64_t>(cfg.d_ff)});
    affine_backward(bc.ffn_mid, bp.W2.value, d_ffn_out, d_mid, bp.W2.grad,
                    bp.b2.grad);
    Tensor d_mid_pre({N, static_cast<std::int64_t>(cfg.d_ff)});
    relu_backward(bc.ffn_mid, d_mid, d_mid_pre);
    Tensor dh1_ffn({N, d});
    affine_backward(bc.h1, bp.W1.value, d_mid_pre, dh1_ffn, bp.W1.grad,
                    bp.b1.grad);
    add_inplace(dh1, dh1_ffn);

    // ln1 -> residual (h_in + drop1(attn_out))
    Tensor d_res1({N, d});
    layer_norm_backward(bp.ln1_gain.value, bc.ln1, dh1, d_res1,
                        bp.ln1_gain.grad, bp.ln1_bias.grad);
    Tensor dh_in = d_res1;  // residual branch
    Tensor d_attn_out;
    dropout_backward(bc.drop1, d_res1, d_attn_out);

    attention_backward(bp, g, cfg.n_heads, fc.valid, bc, d_attn_out, dh_in, bp);
    dh = std::move(dh_in);
  }

  // embedding (positional encoding has no parameters)
  Tensor dx({N, static_cast<std::int64_t>(cfg.features)});
  affine_backward(fc.x_flat, params.w_embed.value, dh, dx, P.w_embed.grad,
                  P.b_embed.grad);
}

// --- checkpoints -----------------------------------------------------------

namespace {

void write_blob(io::ByteWriter& w, const std::string& name, const Tensor& t,
                BlobDtype dtype) {
  w.str(name);
  w.u8(static_cast<std::uint8_t>(dtype));
  w.u32(static_cast<std::uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i)
    w.u64(static_cast<std::uint64_t>(t.dim(i)));
  switch (dtype) {
    case BlobDtype::f64:
      for (std::int64_t i = 0; i < t.numel(); ++i) w.f64(t[i]);
      break;
    case BlobDtype::f32:
      for (std::int64_t i = 0; i < t.numel(); ++i)
        w.f32(static_cast<float>(t[i]));
      break;
    case BlobDtype::f16:
      for (std::int64_t i = 0; i < t.numel(); ++i)
        w.u16(io::f32_to_f16(static_cast<float>(t[i])));
      break;
  }
}

struct Blob {
  std::string name;
  BlobDtype dtype;
  Tensor tensor;
};

Blob read_blob(io::ByteReader& r) {
  Blob b;
  b.name = r.str();
  auto dt = r.u8();
  if (dt != 8 && dt != 4 && dt != 2)
    throw IoError("checkpoint: unknown blob dtype code " + std::to_string(dt));
  b.dtype = static_cast<BlobDtype>(dt);
  std::uint32_t nd = r.u32();
  std::vector<std::int64_t> shape;
  for (std::uint32_t i = 0; i < nd; ++i)
    shape.push_back(static_cast<std::int64_t>(r.u64()));
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    switch (b.dtype) {
      case BlobDtype::f64:
        t[i] = r.f64();
        break;
      case BlobDtype::f32:
        t[i] = static_cast<double>(r.f32());
        break;
      case BlobDtype::f16:
        t[i] = static_cast<double>(io::f16_to_f32(r.u16()));
        break;
    }
  }
  b.tensor = std::move(t);
  return b;
}

}  // namespace

void save_checkpoint(const ModelParams& params,
                     const std::filesystem::path& path, BlobDtype dtype,
                     const std::map<std::string, Tensor>& extra) {
  io::ByteWriter w;
  w.magic("PWCK");
  w.u32(1);
  w.str(params.cfg.to_json());
  auto ps = params.all();
  w.u32(static_cast<std::uint32_t>(ps.size() + extra.size()));
  for (const auto* p : ps) write_blob(w, p->name, p->value, dtype);
  for (const auto& [name, t] : extra) write_blob(w, "extra." + name, t, BlobDtype::f64);
  io::write_checked(path, w);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto bytes = io::read_checked(path);
  io::ByteReader r(bytes);
  r.expect_magic("PWCK", "checkpoint " + path.string());
  std::uint32_t version = r.u32();
  if (version != 1)
    throw IoError("checkpoint " + path.string() + ": unsupported version " +
                  std::to_string(version));
  ModelConfig cfg = ModelConfig::from_json(r.str());
  Checkpoint ck;
  ck.params = ModelParams::zeros(cfg);
  std::uint32_t nblobs = r.u32();

  std::map<std::string, Parameter*> by_name;
  for (auto* p : ck.params.all()) by_name[p->name] = p;
  std::size_t filled = 0;
  for (std::uint32_t i = 0; i < nblobs; ++i) {
    Blob b = read_blob(r);
    if (b.name.rfind("extra.", 0) == 0) {
      ck.extra[b.name.substr(6)] = std::move(b.tensor);
      continue;
    }
    auto it = by_name.find(b.name);
    if (it == by_name.end())
      throw IoError("checkpoint " + path.string() + ": unknown parameter '" +
                    b.name + "'");
    if (b.tensor.shape() != it->second->value.shape())
      throw IoError("checkpoint " + path.string() + ": parameter '" + b.name +
                    "' has shape " + b.tensor.shape_str() + ", config expects " +
                    it->second->value.shape_str());
    it->second->value = std::move(b.tensor);
    ck.dtype = b.dtype;
    filled++;
  }
  if (filled != by_name.size())
    throw IoError("checkpoint " + path.string() + ": missing parameters (" +
                  std::to_string(filled) + " of " +
                  std::to_string(by_name.size()) + ")");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig& expect) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.params.cfg == expect))
    throw IoError("checkpoint " + path.string() +
                  ": stored config does not match the requested one");
  return ck;
}

}  // namespace pw::nn
