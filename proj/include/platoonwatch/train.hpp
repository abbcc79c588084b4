#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "platoonwatch/dataset.hpp"
#include "platoonwatch/eval.hpp"
#include "platoonwatch/loss.hpp"
#include "platoonwatch/model.hpp"

namespace pw::train {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 128;
  int max_epochs = 50;
  int patience = 8;  // epochs without val-F1 improvement
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9, adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double decision_threshold = 0.6;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  eval::Metric val_f1;
  eval::Metric val_auc;
  bool is_best = false;
};

struct History {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_f1 = -1.0;  // undefined F1 ranks below any defined value

  std::string to_jsonl() const;
};

struct TrainResult {
  nn::ModelParams best;
  History history;
};

// Adam over a fixed parameter list, elementwise and deterministic.
class Adam {
 public:
  Adam(const TrainConfig& cfg, const std::vector<nn::Parameter*>& params);
  void step(const std::vector<nn::Parameter*>& params);
  std::int64_t steps_taken() const { return t_; }

  // optimizer-state blobs for resumable checkpoints
  std::map<std::string, nn::Tensor> state_blobs(
      const std::vector<nn::Parameter*>& params) const;
  void load_state(const std::map<std::string, nn::Tensor>& blobs,
                  const std::vector<nn::Parameter*>& params);

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<nn::Tensor> m_, v_;
};

// Forward in eval mode over the whole dataset (chunked); logits [B,V,T].
nn::Tensor forward_dataset(const nn::ModelParams& params,
                           const data::WindowedDataset& ds,
                           int chunk = 256);

// Eval-mode pass + masked metrics at the threshold. Parameters are verified
// unchanged (bitwise) across the pass.
eval::MetricsReport evaluate_pass(const nn::ModelParams& params,
                                  const data::WindowedDataset& ds,
                                  double threshold);

// Mini-batch PFBCE training with per-epoch validation, best-by-val-F1
// selection and early stopping. When checkpoint_path is given, a resumable
// checkpoint (parameters, optimizer state, best-so-far) is written after
// every epoch; resume=true continues from it.
TrainResult train(const nn::ModelConfig& mcfg, std::uint64_t init_seed,
                  const data::WindowedDataset& train_ds,
                  const data::WindowedDataset& val_ds,
                  const nn::LossConfig& lcfg, const TrainConfig& tcfg,
                  const std::filesystem::path& checkpoint_path = {},
                  bool resume = false);

}  // namespace pw::train
