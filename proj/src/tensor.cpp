#include "platoonwatch/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "platoonwatch/kernels_detail.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::nn {

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i)
    os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
  os << "]";
  return os.str();
}

void ensure_finite(const Tensor& t, const char* what) {
  // NaN/Inf both poison a running sum, so one pass decides and the detailed
  // scan only runs on failure.
  double s = 0.0;
  const double* p = t.data();
  std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) s += p[i];
  if (std::isfinite(s)) return;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i]))
      throw NumericError(std::string(what) + ": non-finite element at flat index " +
                         std::to_string(i));
  }
  throw NumericError(std::string(what) + ": magnitude overflow");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
}

void matmul(const double* A, const double* B, double* C, std::int64_t m,
            std::int64_t k, std::int64_t n, bool acc) {
  detail::matmul_body(A, B, C, m, k, n, acc);
}
void matmul_nt(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t k, std::int64_t n, bool acc) {
  detail::matmul_nt_body(A, B, C, m, k, n, acc);
}
void matmul_tn(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t k, std::int64_t n, bool acc) {
  detail::matmul_tn_body(A, B, C, m, k, n, acc);
}

Tensor affine(const Tensor& x, const Tensor& W, const Tensor& b) {
  if (W.ndim() != 2)
    throw ShapeError("affine: W must be 2-D, got " + W.shape_str());
  std::int64_t d_in = W.dim(0), d_out = W.dim(1);
  if (x.last_dim() != d_in)
    throw ShapeError("affine: x " + x.shape_str() + " does not match W " +
                     W.shape_str());
  if (b.numel() != d_out)
    throw ShapeError("affine: b " + b.shape_str() + " does not match W " +
                     W.shape_str());
  std::int64_t rows = x.rows();
  auto out_shape = x.shape();
  out_shape.back() = d_out;
  Tensor y(out_shape);
  matmul(x.data(), W.data(), y.data(), rows, d_in, d_out);
  double* yp = y.data();
  const double* bp = b.data();
#pragma omp parallel for schedule(static) if (rows * d_out > 16384)
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < d_out; ++j) yp[i * d_out + j] += bp[j];
  ensure_finite(y, "affine");
  return y;
}

void affine_backward(const Tensor& x, const Tensor& W, const Tensor& dy,
                     Tensor& dx, Tensor& dW, Tensor& db) {
  std::int64_t d_in = W.dim(0), d_out = W.dim(1);
  std::int64_t rows = x.rows();
  if (dy.rows() != rows || dy.last_dim() != d_out)
    throw ShapeError("affine_backward: dy " + dy.shape_str() +
                     " does not match x " + x.shape_str() + " and W " +
                     W.shape_str());
  // dx = dy W^T
  matmul_nt(dy.data(), W.data(), dx.data(), rows, d_out, d_in);
  // dW += x^T dy
  matmul_tn(x.data(), dy.data(), dW.data(), rows, d_in, d_out, /*acc=*/true);
  // db += column sums of dy, fixed order over rows
  double* dbp = db.data();
  const double* dyp = dy.data();
#pragma omp parallel for schedule(static) if (rows * d_out > 65536)
  for (std::int64_t j = 0; j < d_out; ++j) {
    double s = 0.0;
    for (std::int64_t i = 0; i < rows; ++i) s += dyp[i * d_out + j];
    dbp[j] += s;
  }
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  LayerNormCache& cache, double eps) {
  std::int64_t d = x.last_dim();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias do not match feature dim");
  std::int64_t rows = x.rows();
  Tensor y(x.shape());
  cache.normalized = Tensor(x.shape());
  cache.rstd.assign(static_cast<std::size_t>(rows), 0.0);
#pragma omp parallel for schedule(static) if (rows * d > 16384)
  for (std::int64_t i = 0; i < rows; ++i) {
    detail::layer_norm_row(x.data() + i * d, gain.data(), bias.data(),
                           y.data() + i * d, cache.normalized.data() + i * d, d,
                           eps, &cache.rstd[static_cast<std::size_t>(i)]);
  }
  ensure_finite(y, "layer_norm");
  return y;
}

void layer_norm_backward(const Tensor& gain, const LayerNormCache& cache,
                         const Tensor& dy, Tensor& dx, Tensor& dgain,
                         Tensor& dbias) {
  std::int64_t d = dy.last_dim();
  std::int64_t rows = dy.rows();
  const double* gp = gain.data();
  const double* hp = cache.normalized.data();
  const double* dyp = dy.data();
  double* dxp = dx.data();
#pragma omp parallel for schedule(static) if (rows * d > 16384)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* h = hp + i * d;
    const double* g = dyp + i * d;
    double* o = dxp + i * d;
    double rstd = cache.rstd[static_cast<std::size_t>(i)];
    double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
    for (std::int64_t j = 0; j < d; ++j) {
      double dh = g[j] * gp[j];
      m1 += dh;
      m2 += dh * h[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::int64_t j = 0; j < d; ++j) {
      double dh = g[j] * gp[j];
      o[j] = rstd * (dh - m1 - h[j] * m2);
    }
  }
  // parameter grads: fixed order over rows
  double* dgp = dgain.data();
  double* dbp = dbias.data();
#pragma omp parallel for schedule(static) if (rows * d > 65536)
  for (std::int64_t j = 0; j < d; ++j) {
    double sg = 0.0, sb = 0.0;
    for (std::int64_t i = 0; i < rows; ++i) {
      sg += dyp[i * d + j] * hp[i * d + j];
      sb += dyp[i * d + j];
    }
    dgp[j] += sg;
    dbp[j] += sb;
  }
}

Tensor masked_softmax(const Tensor& logits, const Tensor& additive_mask) {
  check_same_shape(logits, additive_mask, "masked_softmax");
  std::int64_t d = logits.last_dim();
  std::int64_t rows = logits.rows();
  Tensor out(logits.shape());
  bool ok = true;
#pragma omp parallel for schedule(static) if (rows * d > 8192)
  for (std::int64_t i = 0; i < rows; ++i) {
    bool row_ok = detail::softmax_row_masked(
        logits.data() + i * d, additive_mask.data() + i * d,
        out.data() + i * d, d, kMaskNegInf);
    if (!row_ok) ok = false;
  }
  if (!ok) throw ShapeError("masked_softmax: fully-masked row (upstream mask bug)");
  ensure_finite(out, "masked_softmax");
  return out;
}

void masked_softmax_backward(const Tensor& probs, const Tensor& dprobs,
                             Tensor& dlogits) {
  std::int64_t d = probs.last_dim();
  std::int64_t rows = probs.rows();
  const double* pp = probs.data();
  const double* gp = dprobs.data();
  double* op = dlogits.data();
#pragma omp parallel for schedule(static) if (rows * d > 8192)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* p = pp + i * d;
    const double* g = gp + i * d;
    double* o = op + i * d;
    double dot = 0.0;
    for (std::int64_t j = 0; j < d; ++j) dot += p[j] * g[j];
    for (std::int64_t j = 0; j < d; ++j) o[j] = p[j] * (g[j] - dot);
  }
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  const double* xp = x.data();
  double* yp = y.data();
  std::int64_t n = x.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
  for (std::int64_t i = 0; i < n; ++i) yp[i] = xp[i] > 0.0 ? xp[i] : 0.0;
  return y;
}

void relu_backward(const Tensor& y, const Tensor& dy, Tensor& dx) {
  const double* yp = y.data();
  const double* gp = dy.data();
  double* op = dx.data();
  std::int64_t n = y.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
  for (std::int64_t i = 0; i < n; ++i) op[i] = yp[i] > 0.0 ? gp[i] : 0.0;
}

Tensor dropout(const Tensor& x, double rate, std::uint64_t seed, bool training,
               DropoutMask& mask) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout: rate must be in [0,1), got " +
                      std::to_string(rate));
  if (!training || rate == 0.0) {
    mask.active = false;
    return x;
  }
  std::int64_t n = x.numel();
  mask.active = true;
  mask.scale = 1.0 / (1.0 - rate);
  mask.keep.assign(static_cast<std::size_t>(n), 1);
  Rng rng(seed);
  for (std::int64_t i = 0; i < n; ++i)
    mask.keep[static_cast<std::size_t>(i)] = rng.uniform() >= rate ? 1 : 0;
  Tensor y(x.shape());
  const double* xp = x.data();
  double* yp = y.data();
#pragma omp parallel for schedule(static) if (n > 16384)
  for (std::int64_t i = 0; i < n; ++i)
    yp[i] = mask.keep[static_cast<std::size_t>(i)] ? xp[i] * mask.scale : 0.0;
  return y;
}

void dropout_backward(const DropoutMask& mask, const Tensor& dy, Tensor& dx) {
  if (!mask.active) {
    dx = dy;
    return;
  }
  std::int64_t n = dy.numel();
  dx = Tensor(dy.shape());
  const double* gp = dy.data();
  double* op = dx.data();
#pragma omp parallel for schedule(static) if (n > 16384)
  for (std::int64_t i = 0; i < n; ++i)
    op[i] = mask.keep[static_cast<std::size_t>(i)] ? gp[i] * mask.scale : 0.0;
}

GradCheckResult grad_check(const std::function<double(bool with_grad)>& eval,
                           const std::vector<Parameter*>& params, double h) {
  GradCheckResult res;
  eval(true);
  // Freeze analytic grads before perturbing.
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::int64_t i = 0; i < p.value.numel(); ++i) {
      double a = analytic[pi][i];
      if (!std::isfinite(a))
        throw NumericError("grad_check: non-finite analytic gradient in " +
                           p.name);
      double saved = p.value[i];
      auto numeric_at = [&](double step) {
        p.value[i] = saved + step;
        double fp = eval(false);
        p.value[i] = saved - step;
        double fm = eval(false);
        p.value[i] = saved;
        return (fp - fm) / (2.0 * step);
      };
      // A central difference is only meaningful where the objective is
      // smooth across [x-h, x+h]; relu/indicator kinks inside the interval
      // poison it. Shrink the step until the measurement stabilizes and
      // judge the analytic value against the best one.
      double rel = std::numeric_limits<double>::infinity();
      double numeric = 0.0;
      double step = h;
      for (int attempt = 0; attempt < 3; ++attempt, step *= 0.1) {
        double n = numeric_at(step);
        double denom = std::max({std::abs(a), std::abs(n), 1e-6});
        double r = std::abs(a - n) / denom;
        if (r < rel) {
          rel = r;
          numeric = n;
        }
        if (rel < 1e-7) break;
      }
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace pw::nn
