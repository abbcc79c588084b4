#include "platoonwatch/train.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "platoonwatch/io.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::train {

using data::WindowedDataset;
using nlohmann::json;
using nn::Tensor;

void TrainConfig::validate() const {
  if (lr < 0) throw ConfigError("train: lr must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1 || patience > max_epochs)
    throw ConfigError("train: need 1 <= patience <= max_epochs");
}

Adam::Adam(const TrainConfig& cfg, const std::vector<nn::Parameter*>& params)
    : lr_(cfg.lr), b1_(cfg.adam_beta1), b2_(cfg.adam_beta2), eps_(cfg.adam_eps) {
  for (auto* p : params) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step(const std::vector<nn::Parameter*>& params) {
  t_++;
  double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    nn::Parameter& p = *params[pi];
    double* m = m_[pi].data();
    double* v = v_[pi].data();
    double* w = p.value.data();
    const double* g = p.grad.data();
    std::int64_t n = p.value.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      double mh = m[i] / c1;
      double vh = v[i] / c2;
      w[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

std::map<std::string, Tensor> Adam::state_blobs(
    const std::vector<nn::Parameter*>& params) const {
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out["adam.m." + params[i]->name] = m_[i];
    out["adam.v." + params[i]->name] = v_[i];
  }
  Tensor t({1});
  t[0] = static_cast<double>(t_);
  out["adam.t"] = t;
  return out;
}

void Adam::load_state(const std::map<std::string, Tensor>& blobs,
                      const std::vector<nn::Parameter*>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = blobs.at("adam.m." + params[i]->name);
    v_[i] = blobs.at("adam.v." + params[i]->name);
  }
  t_ = static_cast<std::int64_t>(blobs.at("adam.t")[0]);
}

namespace {

// Gather dataset rows into a model batch.
nn::Batch gather(const WindowedDataset& ds, const std::vector<std::int64_t>& idx) {
  std::int64_t B = static_cast<std::int64_t>(idx.size());
  std::int64_t V = ds.vehicles(), T = ds.window(), F = ds.features();
  nn::Batch b;
  b.X = Tensor({B, V, T, F});
  b.M = Tensor({B, V, T});
  b.offsets = Tensor({B, V});
  for (std::int64_t k = 0; k < B; ++k) {
    std::int64_t s = idx[static_cast<std::size_t>(k)];
    std::copy(ds.X.data() + s * V * T * F, ds.X.data() + (s + 1) * V * T * F,
              b.X.data() + k * V * T * F);
    std::copy(ds.M.data() + s * V * T, ds.M.data() + (s + 1) * V * T,
              b.M.data() + k * V * T);
    std::copy(ds.offsets.data() + s * V, ds.offsets.data() + (s + 1) * V,
              b.offsets.data() + k * V);
  }
  return b;
}

Tensor gather_labels(const WindowedDataset& ds,
                     const std::vector<std::int64_t>& idx) {
  std::int64_t B = static_cast<std::int64_t>(idx.size());
  std::int64_t V = ds.vehicles(), T = ds.window();
  Tensor y({B, V, T});
  for (std::int64_t k = 0; k < B; ++k) {
    std::int64_t s = idx[static_cast<std::size_t>(k)];
    std::copy(ds.Y.data() + s * V * T, ds.Y.data() + (s + 1) * V * T,
              y.data() + k * V * T);
  }
  return y;
}

std::uint64_t params_hash(const nn::ModelParams& p) {
  std::uint64_t h = io::kFnvOffset;
  for (const auto* q : p.all())
    h = io::fnv1a(q->value.data(),
                  static_cast<std::size_t>(q->value.numel()) * sizeof(double), h);
  return h;
}

double best_f1_rank(const eval::Metric& f1) { return f1 ? *f1 : -1.0; }

}  // namespace

Tensor forward_dataset(const nn::ModelParams& params, const WindowedDataset& ds,
                       int chunk) {
  std::int64_t B = ds.samples(), V = ds.vehicles(), T = ds.window();
  Tensor logits({B, V, T});
  for (std::int64_t at = 0; at < B; at += chunk) {
    std::int64_t n = std::min<std::int64_t>(chunk, B - at);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = at + i;
    nn::Batch b = gather(ds, idx);
    Tensor out = nn::forward(params, b, /*training=*/false, /*seed=*/0);
    std::copy(out.data(), out.data() + n * V * T, logits.data() + at * V * T);
  }
  return logits;
}

eval::MetricsReport evaluate_pass(const nn::ModelParams& params,
                                  const WindowedDataset& ds, double threshold) {
  if (ds.samples() == 0) throw ConfigError("evaluate_pass: empty dataset");
  std::uint64_t before = params_hash(params);
  Tensor logits = forward_dataset(params, ds);
  Tensor scores(logits.shape());
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    scores[i] = nn::sigmoid(logits[i]);
  eval::MetricsReport rep = eval::evaluate_scores(scores, ds.Y, ds.M, threshold);
  if (params_hash(params) != before)
    throw NumericError("evaluate_pass: parameters changed during evaluation");
  return rep;
}

std::string History::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_loss"] = e.val_loss;
    j["val_f1"] = e.val_f1 ? json(*e.val_f1) : json(nullptr);
    j["val_auc"] = e.val_auc ? json(*e.val_auc) : json(nullptr);
    j["best"] = e.is_best;
    out += j.dump();
    out += '\n';
  }
  return out;
}

TrainResult train(const nn::ModelConfig& mcfg, std::uint64_t init_seed,
                  const WindowedDataset& train_ds, const WindowedDataset& val_ds,
                  const nn::LossConfig& lcfg, const TrainConfig& tcfg,
                  const std::filesystem::path& checkpoint_path, bool resume) {
  tcfg.validate();
  lcfg.validate();
  if (train_ds.samples() == 0 || val_ds.samples() == 0)
    throw ConfigError("train: train and validation datasets must be non-empty");
  if (train_ds.features() != val_ds.features() ||
      train_ds.window() != val_ds.window())
    throw ConfigError("train: train/val feature or window mismatch");

  nn::ModelParams params = nn::ModelParams::init(mcfg, init_seed);
  auto plist = params.all();
  Adam adam(tcfg, plist);

  nn::ModelParams best = params;
  History hist;
  int since_improve = 0;
  int start_epoch = 0;

  if (resume) {
    if (checkpoint_path.empty() || !std::filesystem::exists(checkpoint_path))
      throw ConfigError("train: resume requested but checkpoint missing: " +
                        checkpoint_path.string());
    nn::Checkpoint ck = nn::load_checkpoint(checkpoint_path, mcfg);
    params = std::move(ck.params);
    plist = params.all();
    adam.load_state(ck.extra, plist);
    best = nn::ModelParams::zeros(mcfg);
    for (auto* p : best.all()) p->value = ck.extra.at("best." + p->name);
    start_epoch = static_cast<int>(ck.extra.at("train.epoch")[0]) + 1;
    hist.best_epoch = static_cast<int>(ck.extra.at("train.best_epoch")[0]);
    hist.best_f1 = ck.extra.at("train.best_f1")[0];
    since_improve = static_cast<int>(ck.extra.at("train.since_improve")[0]);
  }

  std::int64_t n_train = train_ds.samples();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n_train));

  for (int epoch = start_epoch; epoch < tcfg.max_epochs; ++epoch) {
    for (std::int64_t i = 0; i < n_train; ++i)
      order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng(mix_seed(tcfg.seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::int64_t n_batches = 0;
    for (std::int64_t at = 0; at < n_train; at += tcfg.batch_size) {
      std::int64_t n = std::min<std::int64_t>(tcfg.batch_size, n_train - at);
      std::vector<std::int64_t> idx(order.begin() + at, order.begin() + at + n);
      nn::Batch b = gather(train_ds, idx);
      Tensor y = gather_labels(train_ds, idx);

      params.zero_grad();
      nn::ForwardCache cache;
      std::uint64_t dseed = mix_seed(mix_seed(tcfg.seed, 0xd0),
                                     static_cast<std::uint64_t>(epoch) * 1000003 +
                                         static_cast<std::uint64_t>(n_batches));
      Tensor logits = nn::forward(params, b, /*training=*/true, dseed, &cache);
      double loss = nn::pfbce(logits, y, b.M, lcfg);
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(n_batches));
      Tensor dlogits = nn::pfbce_grad(logits, y, b.M, lcfg);
      nn::backward(params, cache, dlogits);
      if (tcfg.lr > 0) adam.step(plist);
      loss_sum += loss;
      n_batches++;
    }

    // validation
    Tensor vlogits = forward_dataset(params, val_ds);
    double vloss = nn::pfbce(vlogits, val_ds.Y, val_ds.M, lcfg);
    Tensor vscores(vlogits.shape());
    for (std::int64_t i = 0; i < vlogits.numel(); ++i)
      vscores[i] = nn::sigmoid(vlogits[i]);
    eval::MetricsReport vrep = eval::evaluate_scores(
        vscores, val_ds.Y, val_ds.M, tcfg.decision_threshold);

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
    st.val_loss = vloss;
    st.val_f1 = vrep.metrics.f1;
    st.val_auc = vrep.auc;
    double rank = best_f1_rank(st.val_f1);
    if (rank > hist.best_f1) {
      hist.best_f1 = rank;
      hist.best_epoch = epoch;
      best = params;
      since_improve = 0;
      st.is_best = true;
    } else {
      since_improve++;
    }
    hist.epochs.push_back(st);

    if (!checkpoint_path.empty()) {
      auto extra = adam.state_blobs(plist);
      for (auto* p : best.all()) extra["best." + p->name] = p->value;
      Tensor t1({1});
      t1[0] = epoch;
      extra["train.epoch"] = t1;
      t1[0] = hist.best_epoch;
      extra["train.best_epoch"] = t1;
      t1[0] = hist.best_f1;
      extra["train.best_f1"] = t1;
      t1[0] = since_improve;
      extra["train.since_improve"] = t1;
      nn::save_checkpoint(params, checkpoint_path, nn::BlobDtype::f64, extra);
    }

    if (since_improve >= tcfg.patience) break;
  }

  TrainResult res;
  res.best = std::move(best);
  res.history = std::move(hist);
  return res;
}

}  // namespace pw::train
