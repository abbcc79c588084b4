#include "platoonwatch/quant.hpp"

#include <cfenv>
#include <cmath>

#include "platoonwatch/io.hpp"
#include "platoonwatch/kernels_detail.hpp"

namespace pw::quant {

using data::WindowedDataset;
using nn::Tensor;

namespace {

std::vector<float> to_f32(const Tensor& t) {
  std::vector<float> v(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    v[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
  return v;
}

}  // namespace

InferModel::InferModel(const nn::ModelParams& params) : cfg_(params.cfg) {
  cfg_.validate();
  w_embed_ = to_f32(params.w_embed.value);
  b_embed_ = to_f32(params.b_embed.value);
  w_out_ = to_f32(params.w_out.value);
  b_out_ = static_cast<float>(params.b_out.value[0]);
  for (const auto& b : params.blocks) {
    Blk k;
    k.Wq = to_f32(b.Wq.value);
    k.Wk = to_f32(b.Wk.value);
    k.Wv = to_f32(b.Wv.value);
    k.Wo = to_f32(b.Wo.value);
    k.ln1g = to_f32(b.ln1_gain.value);
    k.ln1b = to_f32(b.ln1_bias.value);
    k.ln2g = to_f32(b.ln2_gain.value);
    k.ln2b = to_f32(b.ln2_bias.value);
    k.W1 = to_f32(b.W1.value);
    k.b1 = to_f32(b.b1.value);
    k.W2 = to_f32(b.W2.value);
    k.b2 = to_f32(b.b2.value);
    blocks_.push_back(std::move(k));
  }
}

std::vector<float> InferModel::forward_range(const WindowedDataset& ds,
                                             std::int64_t begin,
                                             std::int64_t end) const {
  std::int64_t V = ds.vehicles(), T = ds.window(), F = ds.features();
  if (F != cfg_.features || T != cfg_.window)
    throw ShapeError("infer: dataset does not match model config");
  if (begin < 0 || end > ds.samples() || begin >= end)
    throw ShapeError("infer: bad sample range");
  std::int64_t B = end - begin;
  std::int64_t N = B * V * T;
  std::int64_t d = cfg_.d_model;
  std::int64_t S = cfg_.mode == nn::EncodingMode::PerVehicle ? B * V : B;
  std::int64_t Ts = cfg_.mode == nn::EncodingMode::PerVehicle ? T : V * T;
  int heads = cfg_.n_heads;
  std::int64_t dk = d / heads;
  float scale = 1.0f / std::sqrt(static_cast<float>(dk));

  // embed + positional encoding
  std::vector<float> x(static_cast<std::size_t>(N) * F);
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) {
    valid[static_cast<std::size_t>(i)] =
        ds.M[begin * V * T + i] != 0.0 ? 1 : 0;
    for (std::int64_t f = 0; f < F; ++f)
      x[static_cast<std::size_t>(i * F + f)] =
          static_cast<float>(ds.X[(begin * V * T + i) * F + f]);
  }
  std::vector<float> h(static_cast<std::size_t>(N) * d);
  nn::detail::matmul_body<float>(x.data(), w_embed_.data(), h.data(), N, F, d,
                                 false);
  std::vector<std::vector<float>> pe_rows;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t v = 0; v < V; ++v) {
      auto off = static_cast<std::int64_t>(ds.offsets[(begin + b) * V + v]);
      for (std::int64_t t = 0; t < T; ++t) {
        auto g = static_cast<std::size_t>(off + t);
        if (g >= pe_rows.size()) pe_rows.resize(g + 1);
        if (pe_rows[g].empty()) {
          auto row = nn::sinusoidal_pe(static_cast<std::int64_t>(g), cfg_.d_model);
          pe_rows[g].assign(row.begin(), row.end());
        }
        float* dst = h.data() + static_cast<std::size_t>(((b * V + v) * T + t) * d);
        const float* pr = pe_rows[g].data();
        for (std::int64_t c = 0; c < d; ++c) dst[c] += b_embed_[static_cast<std::size_t>(c)] + pr[c];
      }
    }

  std::vector<float> Q(static_cast<std::size_t>(N) * d),
      K(static_cast<std::size_t>(N) * d), Vv(static_cast<std::size_t>(N) * d),
      concat(static_cast<std::size_t>(N) * d), tmp(static_cast<std::size_t>(N) * d),
      mid(static_cast<std::size_t>(N) * cfg_.d_ff);

  for (const auto& blk : blocks_) {
    nn::detail::matmul_body<float>(h.data(), blk.Wq.data(), Q.data(), N, d, d, false);
    nn::detail::matmul_body<float>(h.data(), blk.Wk.data(), K.data(), N, d, d, false);
    nn::detail::matmul_body<float>(h.data(), blk.Wv.data(), Vv.data(), N, d, d, false);

#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < S; ++s) {
      std::vector<float> row(static_cast<std::size_t>(Ts));
      std::vector<float> w(static_cast<std::size_t>(Ts));
      for (int hh = 0; hh < heads; ++hh) {
        std::int64_t hoff = static_cast<std::int64_t>(hh) * dk;
        for (std::int64_t t = 0; t < Ts; ++t) {
          std::int64_t nt = s * Ts + t;
          if (!valid[static_cast<std::size_t>(nt)]) {
            for (std::int64_t u = 0; u < Ts; ++u)
              w[static_cast<std::size_t>(u)] = (u == t) ? 1.0f : 0.0f;
          } else {
            const float* q = Q.data() + static_cast<std::size_t>(nt * d + hoff);
            float maxv = -1e30f;
            for (std::int64_t u = 0; u < Ts; ++u) {
              bool ok = valid[static_cast<std::size_t>(s * Ts + u)] &&
                        (!cfg_.causal || u <= t);
              if (!ok) {
                row[static_cast<std::size_t>(u)] = -1e9f;
                continue;
              }
              const float* kk = K.data() + static_cast<std::size_t>((s * Ts + u) * d + hoff);
              float dot = 0.0f;
              for (std::int64_t c = 0; c < dk; ++c) dot += q[c] * kk[c];
              float vsc = dot * scale;
              row[static_cast<std::size_t>(u)] = vsc;
              if (vsc > maxv) maxv = vsc;
            }
            float denom = 0.0f;
            for (std::int64_t u = 0; u < Ts; ++u) {
              if (row[static_cast<std::size_t>(u)] <= -1e9f) {
                w[static_cast<std::size_t>(u)] = 0.0f;
                continue;
              }
              float e = std::exp(row[static_cast<std::size_t>(u)] - maxv);
              w[static_cast<std::size_t>(u)] = e;
              denom += e;
            }
            float inv = 1.0f / denom;
            for (std::int64_t u = 0; u < Ts; ++u)
              w[static_cast<std::size_t>(u)] *= inv;
          }
          float* out = concat.data() + static_cast<std::size_t>((s * Ts + t) * d + hoff);
          for (std::int64_t c = 0; c < dk; ++c) out[c] = 0.0f;
          for (std::int64_t u = 0; u < Ts; ++u) {
            float ww = w[static_cast<std::size_t>(u)];
            if (ww == 0.0f) continue;
            const float* vv = Vv.data() + static_cast<std::size_t>((s * Ts + u) * d + hoff);
            for (std::int64_t c = 0; c < dk; ++c) out[c] += ww * vv[c];
          }
        }
      }
    }

    nn::detail::matmul_body<float>(concat.data(), blk.Wo.data(), tmp.data(), N,
                                   d, d, false);
    // residual + layer norm
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < N; ++i) {
      float* r = tmp.data() + static_cast<std::size_t>(i * d);
      const float* hi = h.data() + static_cast<std::size_t>(i * d);
      for (std::int64_t c = 0; c < d; ++c) r[c] += hi[c];
      nn::detail::layer_norm_row<float>(r, blk.ln1g.data(), blk.ln1b.data(), r,
                                        nullptr, d, 1e-5f, nullptr);
    }
    std::swap(h, tmp);  // h = h1

    nn::detail::matmul_body<float>(h.data(), blk.W1.data(), mid.data(), N, d,
                                   cfg_.d_ff, false);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < N * cfg_.d_ff; ++i) {
      float z = mid[static_cast<std::size_t>(i)] +
                blk.b1[static_cast<std::size_t>(i % cfg_.d_ff)];
      mid[static_cast<std::size_t>(i)] = z > 0.0f ? z : 0.0f;
    }
    nn::detail::matmul_body<float>(mid.data(), blk.W2.data(), tmp.data(), N,
                                   cfg_.d_ff, d, false);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < N; ++i) {
      float* r = tmp.data() + static_cast<std::size_t>(i * d);
      const float* hi = h.data() + static_cast<std::size_t>(i * d);
      for (std::int64_t c = 0; c < d; ++c)
        r[c] += blk.b2[static_cast<std::size_t>(c)] + hi[c];
      nn::detail::layer_norm_row<float>(r, blk.ln2g.data(), blk.ln2b.data(), r,
                                        nullptr, d, 1e-5f, nullptr);
    }
    std::swap(h, tmp);
  }

  std::vector<float> logits(static_cast<std::size_t>(N));
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < N; ++i) {
    const float* hi = h.data() + static_cast<std::size_t>(i * d);
    float s = b_out_;
    for (std::int64_t c = 0; c < d; ++c)
      s += hi[c] * w_out_[static_cast<std::size_t>(c)];
    logits[static_cast<std::size_t>(i)] = s;
  }
  return logits;
}

Tensor InferModel::forward_all(const WindowedDataset& ds, int chunk) const {
  std::int64_t B = ds.samples(), V = ds.vehicles(), T = ds.window();
  Tensor out({B, V, T});
  for (std::int64_t at = 0; at < B; at += chunk) {
    std::int64_t hi = std::min<std::int64_t>(at + chunk, B);
    auto part = forward_range(ds, at, hi);
    for (std::size_t i = 0; i < part.size(); ++i)
      out[at * V * T + static_cast<std::int64_t>(i)] =
          static_cast<double>(part[i]);
  }
  return out;
}

// --- quantization ------------------------------------------------------

QuantizedParams quantize(const nn::ModelParams& params) {
  QuantizedParams qp;
  qp.cfg = params.cfg;
  for (const auto* p : params.all()) {
    nn::ensure_finite(p->value, "quantize");
    if (p->value.ndim() == 2 && p->value.numel() > 1) {
      double amax = 0.0;
      for (std::int64_t i = 0; i < p->value.numel(); ++i)
        amax = std::max(amax, std::abs(p->value[i]));
      QuantizedTensor qt;
      qt.shape = p->value.shape();
      qt.scale = amax > 0.0 ? static_cast<float>(amax / 127.0) : 1.0f;
      qt.q.resize(static_cast<std::size_t>(p->value.numel()));
      double s = static_cast<double>(qt.scale);
      for (std::int64_t i = 0; i < p->value.numel(); ++i) {
        double r = std::nearbyint(p->value[i] / s);  // ties to even
        r = std::min(127.0, std::max(-127.0, r));
        qt.q[static_cast<std::size_t>(i)] = static_cast<std::int8_t>(r);
      }
      qp.weights[p->name] = std::move(qt);
    } else {
      std::vector<float> v(static_cast<std::size_t>(p->value.numel()));
      for (std::int64_t i = 0; i < p->value.numel(); ++i)
        v[static_cast<std::size_t>(i)] = static_cast<float>(p->value[i]);
      qp.vectors[p->name] = std::move(v);
    }
  }
  return qp;
}

nn::ModelParams QuantizedParams::dequantize() const {
  nn::ModelParams p = nn::ModelParams::zeros(cfg);
  for (auto* par : p.all()) {
    auto wi = weights.find(par->name);
    if (wi != weights.end()) {
      const QuantizedTensor& qt = wi->second;
      if (qt.shape != par->value.shape())
        throw IoError("quantized parameter '" + par->name + "' has wrong shape");
      for (std::int64_t i = 0; i < par->value.numel(); ++i) {
        float w = qt.scale * static_cast<float>(qt.q[static_cast<std::size_t>(i)]);
        par->value[i] = static_cast<double>(w);
      }
      continue;
    }
    auto vi = vectors.find(par->name);
    if (vi == vectors.end())
      throw IoError("quantized checkpoint missing parameter '" + par->name + "'");
    if (static_cast<std::int64_t>(vi->second.size()) != par->value.numel())
      throw IoError("quantized parameter '" + par->name + "' has wrong length");
    for (std::int64_t i = 0; i < par->value.numel(); ++i)
      par->value[i] = static_cast<double>(vi->second[static_cast<std::size_t>(i)]);
  }
  return p;
}

nn::Tensor quantized_forward(const QuantizedParams& qp,
                             const WindowedDataset& ds) {
  InferModel engine(qp.dequantize());
  return engine.forward_all(ds);
}

void save_quantized(const QuantizedParams& qp,
                    const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic("PWCQ");
  w.u32(1);
  w.str(qp.cfg.to_json());
  w.u32(static_cast<std::uint32_t>(qp.weights.size()));
  for (const auto& [name, qt] : qp.weights) {
    w.str(name);
    w.f32(qt.scale);
    w.u32(static_cast<std::uint32_t>(qt.shape.size()));
    for (auto dmn : qt.shape) w.u64(static_cast<std::uint64_t>(dmn));
    w.raw(qt.q.data(), qt.q.size());
  }
  w.u32(static_cast<std::uint32_t>(qp.vectors.size()));
  for (const auto& [name, v] : qp.vectors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(v.size()));
    for (float f : v) w.f32(f);
  }
  io::write_checked(path, w);
}

QuantizedParams load_quantized(const std::filesystem::path& path) {
  auto bytes = io::read_checked(path);
  io::ByteReader r(bytes);
  r.expect_magic("PWCQ", "quantized checkpoint " + path.string());
  if (r.u32() != 1)
    throw IoError("quantized checkpoint " + path.string() + ": bad version");
  QuantizedParams qp;
  qp.cfg = nn::ModelConfig::from_json(r.str());
  std::uint32_t nw = r.u32();
  for (std::uint32_t i = 0; i < nw; ++i) {
    std::string name = r.str();
    QuantizedTensor qt;
    qt.scale = r.f32();
    std::uint32_t nd = r.u32();
    std::int64_t numel = 1;
    for (std::uint32_t k = 0; k < nd; ++k) {
      qt.shape.push_back(static_cast<std::int64_t>(r.u64()));
      numel *= qt.shape.back();
    }
    qt.q.resize(static_cast<std::size_t>(numel));
    r.raw(qt.q.data(), qt.q.size());
    qp.weights[name] = std::move(qt);
  }
  std::uint32_t nv = r.u32();
  for (std::uint32_t i = 0; i < nv; ++i) {
    std::string name = r.str();
    std::uint32_t n = r.u32();
    std::vector<float> v(n);
    for (auto& f : v) f = r.f32();
    qp.vectors[name] = std::move(v);
  }
  return qp;
}

}  // namespace pw::quant
