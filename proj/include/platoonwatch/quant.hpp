#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "platoonwatch/dataset.hpp"
#include "platoonwatch/model.hpp"

namespace pw::quant {

// Deployment inference engine: float32 weights and activations, no dropout,
// no gradients. Built either from trained parameters (truncated) or from a
// dequantized int8 checkpoint.
class InferModel {
 public:
  explicit InferModel(const nn::ModelParams& params);

  const nn::ModelConfig& config() const { return cfg_; }

  // Logits for dataset samples [begin, end), flattened [n*V*T].
  std::vector<float> forward_range(const data::WindowedDataset& ds,
                                   std::int64_t begin, std::int64_t end) const;
  // Whole dataset as a double tensor [B,V,T] (for the shared eval path).
  nn::Tensor forward_all(const data::WindowedDataset& ds,
                         int chunk = 256) const;

 private:
  struct Blk {
    std::vector<float> Wq, Wk, Wv, Wo;
    std::vector<float> ln1g, ln1b, ln2g, ln2b;
    std::vector<float> W1, b1, W2, b2;
  };
  nn::ModelConfig cfg_;
  std::vector<float> w_embed_, b_embed_, w_out_;
  float b_out_ = 0.0f;
  std::vector<Blk> blocks_;
};

// Per-tensor symmetric int8: scale = max|w| / 127, round-to-nearest-even,
// so |w - scale*q| <= scale/2 for every element.
struct QuantizedTensor {
  std::vector<std::int8_t> q;
  float scale = 1.0f;
  std::vector<std::int64_t> shape;
};

struct QuantizedParams {
  nn::ModelConfig cfg;
  std::map<std::string, QuantizedTensor> weights;        // 2-D matrices
  std::map<std::string, std::vector<float>> vectors;     // biases, norm params

  // float32-valued parameters reconstructed from the int8 data
  nn::ModelParams dequantize() const;
};

QuantizedParams quantize(const nn::ModelParams& params);

// Weight-only int8 inference: dequantize into the float engine once, then
// run float32. Numerically identical to InferModel(qp.dequantize()).
nn::Tensor quantized_forward(const QuantizedParams& qp,
                             const data::WindowedDataset& ds);

// "PWCQ" container: config, scale table, int8 blobs, float vectors, checksum.
void save_quantized(const QuantizedParams& qp,
                    const std::filesystem::path& path);
QuantizedParams load_quantized(const std::filesystem::path& path);

}  // namespace pw::quant
