#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "platoonwatch/common.hpp"

namespace pw::nn {

// Dense row-major tensor. Training and gradient checks run in double;
// the deployment path (infer.hpp) reuses the same kernel templates in float.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != static_cast<std::int64_t>(data_.size()))
      throw ShapeError("tensor data length does not match shape");
  }

  static std::int64_t count(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }
  std::int64_t rows() const { return last_dim() ? numel() / last_dim() : 0; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at2(std::int64_t i, std::int64_t j) {
    return data_[static_cast<std::size_t>(i * last_dim() + j)];
  }
  double at2(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * last_dim() + j)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

  Tensor reshaped(std::vector<std::int64_t> s) const {
    if (count(s) != numel()) throw ShapeError("reshape changes element count");
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = data_;
    return t;
  }

  std::string shape_str() const;

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

// Learnable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::int64_t> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}
  void zero_grad() { grad.zero(); }
};

// Throws NumericError naming `what` if any element is non-finite.
void ensure_finite(const Tensor& t, const char* what);

void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

// --- kernels -------------------------------------------------------------
//
// Shapes follow the convention: a tensor of shape [.., d] is treated as
// [rows, d] with rows = numel/d. All kernels are OpenMP-parallel over
// independent output elements only, so results do not depend on the thread
// count. Serial twins live in ref_kernels.hpp and back the tests.

// y = x W + b, x:[..,d_in] W:[d_in,d_out] b:[d_out]
Tensor affine(const Tensor& x, const Tensor& W, const Tensor& b);
// Accumulates dW/db; writes dx.
void affine_backward(const Tensor& x, const Tensor& W, const Tensor& dy,
                     Tensor& dx, Tensor& dW, Tensor& db);

struct LayerNormCache {
  Tensor normalized;         // x_hat
  std::vector<double> rstd;  // per row
};
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  LayerNormCache& cache, double eps = 1e-5);
void layer_norm_backward(const Tensor& gain, const LayerNormCache& cache,
                         const Tensor& dy, Tensor& dx, Tensor& dgain,
                         Tensor& dbias);

// Additive mask entries are 0 (valid) or <= kMaskNegInf (padded). Padded
// positions come out exactly 0; a row with no valid entry is a mask bug
// upstream and throws ShapeError.
inline constexpr double kMaskNegInf = -1e9;
Tensor masked_softmax(const Tensor& logits, const Tensor& additive_mask);
void masked_softmax_backward(const Tensor& probs, const Tensor& dprobs,
                             Tensor& dlogits);

Tensor relu(const Tensor& x);
// dx from dy and the forward output (gradient passes where y > 0).
void relu_backward(const Tensor& y, const Tensor& dy, Tensor& dx);

struct DropoutMask {
  std::vector<std::uint8_t> keep;
  double scale = 1.0;
  bool active = false;
};
// Inverted dropout: identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, std::uint64_t seed, bool training,
               DropoutMask& mask);
void dropout_backward(const DropoutMask& mask, const Tensor& dy, Tensor& dx);

// C[m,n] = A[m,k] B[k,n]; *_nt uses B transposed ([n,k]), *_tn uses A
// transposed (A:[m,k] read column-wise, C:[k,n]). `acc` accumulates into C.
void matmul(const double* A, const double* B, double* C, std::int64_t m,
            std::int64_t k, std::int64_t n, bool acc = false);
void matmul_nt(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t k, std::int64_t n, bool acc = false);
void matmul_tn(const double* A, const double* B, double* C, std::int64_t m,
               std::int64_t k, std::int64_t n, bool acc = false);

// --- gradient check harness ----------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// eval(with_grad): returns the scalar objective; when with_grad, must also
// leave fresh gradients in each parameter (zeroing them first is the
// callee's job). Central differences with step h per coordinate.
GradCheckResult grad_check(const std::function<double(bool with_grad)>& eval,
                           const std::vector<Parameter*>& params,
                           double h = 1e-5);

}  // namespace pw::nn
