#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "platoonwatch/tensor.hpp"

namespace pw::nn {

// PerVehicle: attention runs over each vehicle's window independently
// (sequences of length T). InterVehicle: one sequence of length V*T per
// batch item, attending across the whole platoon.
enum class EncodingMode { PerVehicle, InterVehicle };

const char* to_string(EncodingMode m);
EncodingMode encoding_mode_from_string(const std::string& s);

struct ModelConfig {
  int d_model = 128;
  int n_heads = 2;
  int n_blocks = 4;  // 4 for the global model, 2 for individual models
  int d_ff = 512;
  double dropout = 0.1;
  EncodingMode mode = EncodingMode::PerVehicle;
  bool causal = false;
  int features = 8;  // F
  int window = 10;   // T

  int d_head() const { return d_model / n_heads; }
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& s);
  bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
  Parameter Wq, Wk, Wv, Wo;  // [d_model, d_model], heads packed column-wise
  Parameter ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Parameter W1, b1, W2, b2;  // FFN
};

struct ModelParams {
  ModelConfig cfg;
  Parameter w_embed, b_embed;
  std::vector<BlockParams> blocks;
  Parameter w_out, b_out;

  // Xavier-uniform weights, zero biases, unit norm gains.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  // Zero-valued parameters with the right shapes (checkpoint loading).
  static ModelParams zeros(const ModelConfig& cfg);

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  void zero_grad();
  std::int64_t param_count() const;
};

// --- positional encoding ---------------------------------------------------

// Standard sinusoidal encoding of a global position index.
// pe[2i] = sin(g / 10000^(2i/d)), pe[2i+1] = cos(same argument).
std::vector<double> sinusoidal_pe(std::int64_t g, int d_model);

// g[b,v,t] = t + offsets[b,v], exact integer arithmetic.
Tensor global_positions(const Tensor& offsets, int T);

// --- forward / backward ------------------------------------------------

struct Batch {
  Tensor X;        // [B,V,T,F]
  Tensor M;        // [B,V,T], elements in {0,1}
  Tensor offsets;  // [B,V], non-negative integers stored as doubles
};

struct BlockCache {
  Tensor h_in;         // [N, d]
  Tensor Q, K, V;      // [N, d]
  Tensor probs;        // [S, h, Ts, Ts]
  Tensor attn_concat;  // [N, d]
  DropoutMask drop1;
  LayerNormCache ln1;
  Tensor h1;      // [N, d]
  Tensor ffn_mid;  // [N, d_ff], post-relu
  DropoutMask drop2;
  LayerNormCache ln2;
};

struct ForwardCache {
  std::int64_t S = 0;   // sequences
  std::int64_t Ts = 0;  // tokens per sequence
  std::int64_t B = 0, V = 0, T = 0;
  Tensor x_flat;  // [N, F]
  std::vector<std::uint8_t> valid;  // per token, from M
  std::vector<BlockCache> blocks;
  Tensor h_final;  // [N, d]
};

// Per-block, per-head attention probabilities for inspection/export.
struct AttentionMaps {
  // maps[block][head]: Tensor [S, Ts, Ts]
  std::vector<std::vector<Tensor>> maps;
};

// Returns logits [B,V,T]. Padded keys receive exactly zero attention
// weight; a padded query attends only to itself, so nothing it carries can
// reach a valid position. Dropout is active only when training, seeded per
// site from `seed`.
Tensor forward(const ModelParams& params, const Batch& batch, bool training,
               std::uint64_t seed, ForwardCache* cache = nullptr,
               AttentionMaps* maps = nullptr);

// Masked multi-head self-attention over S sequences of Ts tokens, through
// the output projection. h_in is [S*Ts, d_model]; valid flags one token
// each. Exposed for oracle tests; forward() uses the same code path.
Tensor multi_head_attention(const BlockParams& bp, const Tensor& h_in,
                            std::int64_t S, std::int64_t Ts, int n_heads,
                            const std::vector<std::uint8_t>& valid,
                            bool causal = false);

// Accumulates parameter gradients from d(loss)/d(logits).
void backward(const ModelParams& params, const ForwardCache& cache,
              const Tensor& dlogits);

// --- checkpoints (PWCK) ----------------------------------------------------

enum class BlobDtype : std::uint8_t { f64 = 8, f32 = 4, f16 = 2 };

// Named parameter blobs plus optional extra blobs (optimizer state). The
// file carries the config, per-blob dtype, and a trailing checksum.
void save_checkpoint(const ModelParams& params,
                     const std::filesystem::path& path, BlobDtype dtype,
                     const std::map<std::string, Tensor>& extra = {});

struct Checkpoint {
  ModelParams params;
  BlobDtype dtype = BlobDtype::f64;
  std::map<std::string, Tensor> extra;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Same, but requires the stored config to match `expect`.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig& expect);

}  // namespace pw::nn
