#include "platoonwatch/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "platoonwatch/io.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::data {

using nlohmann::json;
using nn::Tensor;

const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = {
      "claimed_gap",       // from predecessor's claimed position
      "claimed_pred_speed", "claimed_pred_accel",
      "radar_gap",         // ego sensing
      "ego_speed",         "ego_accel",
      "command",           // controller output
      "radar_rel_speed",   // differenced radar gap
  };
  return names;
}

namespace {

// Members in lane 0 sorted front-to-back; index of each vehicle's
// predecessor, -1 for the front vehicle and non-members.
std::vector<int> predecessors_at(const sim::Trace& tr, int step) {
  std::vector<std::pair<double, int>> lane0;
  for (int v = 0; v < tr.n_vehicles; ++v) {
    const auto& r = tr.at(step, v);
    if (r.member && r.truth.lane == 0) lane0.emplace_back(r.truth.x, v);
  }
  std::sort(lane0.begin(), lane0.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> pred(static_cast<std::size_t>(tr.n_vehicles), -1);
  for (std::size_t i = 1; i < lane0.size(); ++i)
    pred[static_cast<std::size_t>(lane0[i].second)] = lane0[i - 1].second;
  return pred;
}

// [step][row][feature] for follower rows 1..n-1.
std::vector<double> featurize(const sim::Trace& tr) {
  int V = tr.n_vehicles - 1;
  std::vector<double> feat(static_cast<std::size_t>(tr.n_steps) * V *
                               kFeatureCount,
                           0.0);
  double L = tr.spec.gains.vehicle_length;
  std::vector<double> prev_gap(static_cast<std::size_t>(tr.n_vehicles), 0.0);
  std::vector<bool> prev_ok(static_cast<std::size_t>(tr.n_vehicles), false);

  for (int s = 0; s < tr.n_steps; ++s) {
    auto pred = predecessors_at(tr, s);
    for (int v = 1; v < tr.n_vehicles; ++v) {
      const auto& r = tr.at(s, v);
      double* f = feat.data() +
                  (static_cast<std::size_t>(s) * V + (v - 1)) * kFeatureCount;
      if (!r.member || pred[static_cast<std::size_t>(v)] < 0) {
        prev_ok[static_cast<std::size_t>(v)] = false;
        continue;
      }
      const auto& pr = tr.at(s, pred[static_cast<std::size_t>(v)]);
      f[0] = pr.claimed_x - r.truth.x - L;
      f[1] = pr.claimed_v;
      f[2] = pr.claimed_a;
      f[3] = r.sensor_gap;
      f[4] = r.sensor_speed;
      f[5] = r.sensor_accel;
      f[6] = r.cmd;
      f[7] = prev_ok[static_cast<std::size_t>(v)]
                 ? (r.sensor_gap - prev_gap[static_cast<std::size_t>(v)]) /
                       kDtComms
                 : 0.0;
      prev_gap[static_cast<std::size_t>(v)] = r.sensor_gap;
      prev_ok[static_cast<std::size_t>(v)] = true;
    }
  }
  return feat;
}

}  // namespace

WindowedDataset window_stream(const RunData& run, int T, int step) {
  if (T <= 0 || step <= 0)
    throw ConfigError("window_stream: T and step must be positive");
  const sim::Trace& tr = run.trace;
  if (run.labels.n_steps != tr.n_steps ||
      run.labels.n_vehicles != tr.n_vehicles)
    throw ShapeError("window_stream: label grid " +
                     std::to_string(run.labels.n_steps) + "x" +
                     std::to_string(run.labels.n_vehicles) +
                     " does not match trace " + std::to_string(tr.n_steps) +
                     "x" + std::to_string(tr.n_vehicles));

  std::int64_t V = tr.n_vehicles - 1;
  std::int64_t nwin =
      tr.n_steps >= T ? (tr.n_steps - T) / step + 1 : 0;

  WindowedDataset ds;
  ds.X = Tensor({nwin, V, T, kFeatureCount});
  ds.Y = Tensor({nwin, V, T});
  ds.M = Tensor({nwin, V, T});
  ds.offsets = Tensor({nwin, V});
  ds.scenario_ids.push_back(run.id);
  ds.scenario_controllers.push_back(sim::to_string(tr.spec.controller));
  if (nwin == 0) return ds;

  auto feat = featurize(tr);
  for (std::int64_t b = 0; b < nwin; ++b) {
    int s0 = static_cast<int>(b) * step;
    ds.meta.push_back({0u, static_cast<std::uint32_t>(s0)});
    for (std::int64_t v = 0; v < V; ++v) {
      ds.offsets[b * V + v] = static_cast<double>(s0);
      for (int t = 0; t < T; ++t) {
        int s = s0 + t;
        std::int64_t cell = ((b * V + v) * T + t);
        for (int f = 0; f < kFeatureCount; ++f)
          ds.X[cell * kFeatureCount + f] =
              feat[(static_cast<std::size_t>(s) * V + v) * kFeatureCount + f];
        int vid = static_cast<int>(v) + 1;
        ds.Y[cell] = run.labels.yat(s, vid) ? 1.0 : 0.0;
        ds.M[cell] = run.labels.mat(s, vid) ? 1.0 : 0.0;
      }
    }
  }
  return ds;
}

WindowedDataset concat(const std::vector<WindowedDataset>& parts) {
  std::vector<const WindowedDataset*> live;
  for (const auto& p : parts)
    if (p.samples() > 0 || !p.scenario_ids.empty()) live.push_back(&p);
  if (live.empty()) throw ConfigError("concat: nothing to concatenate");

  std::int64_t V = 0, T = 0, F = 0, B = 0;
  for (const auto* p : live) {
    if (p->samples() == 0) continue;
    if (V == 0) {
      V = p->vehicles();
      T = p->window();
      F = p->features();
    } else if (p->vehicles() != V || p->window() != T || p->features() != F) {
      throw ShapeError("concat: mismatched dataset shapes");
    }
    B += p->samples();
  }
  WindowedDataset out;
  out.X = Tensor({B, V, T, F});
  out.Y = Tensor({B, V, T});
  out.M = Tensor({B, V, T});
  out.offsets = Tensor({B, V});
  std::int64_t at = 0;
  for (const auto* p : live) {
    std::uint32_t scen_base = static_cast<std::uint32_t>(out.scenario_ids.size());
    out.scenario_ids.insert(out.scenario_ids.end(), p->scenario_ids.begin(),
                            p->scenario_ids.end());
    out.scenario_controllers.insert(out.scenario_controllers.end(),
                                    p->scenario_controllers.begin(),
                                    p->scenario_controllers.end());
    std::int64_t n = p->samples();
    if (n == 0) continue;
    std::copy(p->X.data(), p->X.data() + n * V * T * F,
              out.X.data() + at * V * T * F);
    std::copy(p->Y.data(), p->Y.data() + n * V * T, out.Y.data() + at * V * T);
    std::copy(p->M.data(), p->M.data() + n * V * T, out.M.data() + at * V * T);
    std::copy(p->offsets.data(), p->offsets.data() + n * V,
              out.offsets.data() + at * V);
    for (const auto& m : p->meta)
      out.meta.push_back({m.scenario_index + scen_base, m.window_start});
    at += n;
  }
  return out;
}

WindowedDataset select_vehicle(const WindowedDataset& ds, int vehicle_row) {
  if (vehicle_row < 0 || vehicle_row >= ds.vehicles())
    throw ConfigError("select_vehicle: row out of range");
  std::int64_t B = ds.samples(), V = ds.vehicles(), T = ds.window(),
               F = ds.features();
  WindowedDataset out;
  out.X = Tensor({B, 1, T, F});
  out.Y = Tensor({B, 1, T});
  out.M = Tensor({B, 1, T});
  out.offsets = Tensor({B, 1});
  out.meta = ds.meta;
  out.scenario_ids = ds.scenario_ids;
  out.scenario_controllers = ds.scenario_controllers;
  out.normalized = ds.normalized;
  out.stats = ds.stats;
  for (std::int64_t b = 0; b < B; ++b) {
    std::copy(ds.X.data() + ((b * V + vehicle_row) * T) * F,
              ds.X.data() + ((b * V + vehicle_row) * T + T) * F,
              out.X.data() + b * T * F);
    std::copy(ds.Y.data() + (b * V + vehicle_row) * T,
              ds.Y.data() + (b * V + vehicle_row) * T + T,
              out.Y.data() + b * T);
    std::copy(ds.M.data() + (b * V + vehicle_row) * T,
              ds.M.data() + (b * V + vehicle_row) * T + T,
              out.M.data() + b * T);
    out.offsets[b] = ds.offsets[b * V + vehicle_row];
  }
  return out;
}

NormStats fit_normalizer(const WindowedDataset& train) {
  if (train.samples() == 0)
    throw ConfigError("fit_normalizer: empty training dataset");
  std::int64_t F = train.features();
  std::int64_t cells = train.samples() * train.vehicles() * train.window();
  NormStats st;
  st.mean.assign(static_cast<std::size_t>(F), 0.0);
  st.stddev.assign(static_cast<std::size_t>(F), 1.0);
  st.dropped.assign(static_cast<std::size_t>(F), 0);

  std::vector<double> sum(static_cast<std::size_t>(F), 0.0);
  std::vector<double> sum2(static_cast<std::size_t>(F), 0.0);
  double count = 0.0;
  for (std::int64_t c = 0; c < cells; ++c) {
    if (train.M[c] == 0.0) continue;
    count += 1.0;
    for (std::int64_t f = 0; f < F; ++f) {
      double x = train.X[c * F + f];
      sum[static_cast<std::size_t>(f)] += x;
      sum2[static_cast<std::size_t>(f)] += x * x;
    }
  }
  if (count == 0.0)
    throw ConfigError("fit_normalizer: no valid (masked-in) cells");
  for (std::int64_t f = 0; f < F; ++f) {
    double mean = sum[static_cast<std::size_t>(f)] / count;
    double var = sum2[static_cast<std::size_t>(f)] / count - mean * mean;
    var = std::max(var, 0.0);
    double sd = std::sqrt(var);
    st.mean[static_cast<std::size_t>(f)] = mean;
    if (sd <= 0.0) {
      st.dropped[static_cast<std::size_t>(f)] = 1;
      st.stddev[static_cast<std::size_t>(f)] = 1.0;
    } else {
      st.stddev[static_cast<std::size_t>(f)] = sd;
    }
  }
  return st;
}

WindowedDataset apply_normalizer(const WindowedDataset& ds,
                                 const NormStats& stats) {
  std::int64_t F = ds.features();
  if (static_cast<std::int64_t>(stats.mean.size()) != F)
    throw ShapeError("apply_normalizer: stats cover " +
                     std::to_string(stats.mean.size()) + " features, dataset has " +
                     std::to_string(F));
  WindowedDataset out = ds;
  std::int64_t cells = ds.samples() * ds.vehicles() * ds.window();
  for (std::int64_t c = 0; c < cells; ++c) {
    bool valid = ds.M[c] != 0.0;
    for (std::int64_t f = 0; f < F; ++f) {
      auto fi = static_cast<std::size_t>(f);
      double z = 0.0;
      if (valid && !stats.dropped[fi])
        z = (ds.X[c * F + f] - stats.mean[fi]) / stats.stddev[fi];
      out.X[c * F + f] = z;
    }
  }
  out.normalized = true;
  out.stats = stats;
  return out;
}

void SplitSpec::validate() const {
  if (train <= 0 || val <= 0 || test <= 0 ||
      std::abs(train + val + test - 1.0) > 1e-9)
    throw ConfigError("split: fractions must be positive and sum to 1");
}

SplitIndices split_scenarios(std::size_t n_runs, const SplitSpec& spec) {
  spec.validate();
  if (n_runs < 3)
    throw ConfigError("split: need at least 3 runs, got " +
                      std::to_string(n_runs));
  std::vector<std::size_t> idx(n_runs);
  for (std::size_t i = 0; i < n_runs; ++i) idx[i] = i;
  Rng rng(mix_seed(spec.seed, 0x59117));
  rng.shuffle(idx);

  auto n = static_cast<double>(n_runs);
  std::size_t n_val = static_cast<std::size_t>(std::floor(spec.val * n));
  std::size_t n_test = static_cast<std::size_t>(std::floor(spec.test * n));
  std::size_t n_train = n_runs - n_val - n_test;  // remainder goes to train
  SplitIndices out;
  out.train.assign(idx.begin(), idx.begin() + n_train);
  out.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  out.test.assign(idx.begin() + n_train + n_val, idx.end());
  if (out.train.empty() || out.val.empty() || out.test.empty())
    throw ConfigError("split: a split received zero scenarios");
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

AttackRatioReport attack_ratio_report(const WindowedDataset& ds) {
  if (ds.samples() == 0) throw ConfigError("attack_ratio_report: empty dataset");
  std::vector<std::string> controllers;
  for (const auto& c : ds.scenario_controllers)
    if (std::find(controllers.begin(), controllers.end(), c) ==
        controllers.end())
      controllers.push_back(c);

  std::int64_t V = ds.vehicles(), T = ds.window();
  AttackRatioReport rep;
  rep.controllers = controllers;
  rep.vehicle_rows = V;
  rep.cells.assign(controllers.size(),
                   std::vector<RatioCell>(static_cast<std::size_t>(V) + 1));

  for (std::size_t ci = 0; ci < controllers.size(); ++ci) {
    std::vector<double> y_count(static_cast<std::size_t>(V) + 1, 0.0);
    std::vector<double> m_count(static_cast<std::size_t>(V) + 1, 0.0);
    for (std::int64_t b = 0; b < ds.samples(); ++b) {
      const auto& ctrl =
          ds.scenario_controllers[ds.meta[static_cast<std::size_t>(b)]
                                      .scenario_index];
      if (ctrl != controllers[ci]) continue;
      for (std::int64_t v = 0; v < V; ++v)
        for (std::int64_t t = 0; t < T; ++t) {
          double m = ds.M[(b * V + v) * T + t];
          double y = ds.Y[(b * V + v) * T + t];
          m_count[static_cast<std::size_t>(v) + 1] += m;
          y_count[static_cast<std::size_t>(v) + 1] += y * m;
          m_count[0] += m;
          y_count[0] += y * m;
        }
    }
    for (std::size_t r = 0; r <= static_cast<std::size_t>(V); ++r) {
      if (m_count[r] > 0) {
        rep.cells[ci][r].defined = true;
        rep.cells[ci][r].pct = 100.0 * y_count[r] / m_count[r];
      }
    }
  }
  return rep;
}

// --- NormStats / PWDS io ---------------------------------------------------

std::string NormStats::to_json() const {
  json j;
  j["mean"] = mean;
  j["stddev"] = stddev;
  j["dropped"] = dropped;
  j["features"] = feature_names();
  return j.dump();
}

NormStats NormStats::from_json(const std::string& s) {
  json j = json::parse(s);
  NormStats st;
  st.mean = j.at("mean").get<std::vector<double>>();
  st.stddev = j.at("stddev").get<std::vector<double>>();
  st.dropped = j.at("dropped").get<std::vector<std::uint8_t>>();
  return st;
}

void save_dataset(const WindowedDataset& ds, const std::filesystem::path& p) {
  io::ByteWriter w;
  w.magic("PWDS");
  w.u32(1);
  std::int64_t B = ds.samples(), V = ds.vehicles(), T = ds.window(),
               F = ds.features();
  w.u64(static_cast<std::uint64_t>(B));
  w.u64(static_cast<std::uint64_t>(V));
  w.u64(static_cast<std::uint64_t>(T));
  w.u64(static_cast<std::uint64_t>(F));
  w.u8(8);  // X dtype: f64
  for (std::int64_t i = 0; i < ds.X.numel(); ++i) w.f64(ds.X[i]);
  w.u8(1);  // Y dtype: u8
  for (std::int64_t i = 0; i < ds.Y.numel(); ++i)
    w.u8(ds.Y[i] != 0.0 ? 1 : 0);
  w.u8(1);  // M dtype: u8
  for (std::int64_t i = 0; i < ds.M.numel(); ++i)
    w.u8(ds.M[i] != 0.0 ? 1 : 0);
  w.u8(8);  // offsets dtype: f64
  for (std::int64_t i = 0; i < ds.offsets.numel(); ++i) w.f64(ds.offsets[i]);

  json meta;
  meta["scenario_ids"] = ds.scenario_ids;
  meta["scenario_controllers"] = ds.scenario_controllers;
  json samples = json::array();
  for (const auto& m : ds.meta)
    samples.push_back({m.scenario_index, m.window_start});
  meta["samples"] = samples;
  meta["normalized"] = ds.normalized;
  if (ds.normalized) meta["stats"] = json::parse(ds.stats.to_json());
  meta["features"] = feature_names();
  w.str(meta.dump());
  io::write_checked(p, w);
}

WindowedDataset load_dataset(const std::filesystem::path& p) {
  auto bytes = io::read_checked(p);
  io::ByteReader r(bytes);
  r.expect_magic("PWDS", "dataset " + p.string());
  if (r.u32() != 1) throw IoError("dataset " + p.string() + ": unsupported version");
  auto B = static_cast<std::int64_t>(r.u64());
  auto V = static_cast<std::int64_t>(r.u64());
  auto T = static_cast<std::int64_t>(r.u64());
  auto F = static_cast<std::int64_t>(r.u64());
  WindowedDataset ds;
  ds.X = Tensor({B, V, T, F});
  ds.Y = Tensor({B, V, T});
  ds.M = Tensor({B, V, T});
  ds.offsets = Tensor({B, V});
  if (r.u8() != 8) throw IoError("dataset: unexpected X dtype");
  for (std::int64_t i = 0; i < ds.X.numel(); ++i) ds.X[i] = r.f64();
  if (r.u8() != 1) throw IoError("dataset: unexpected Y dtype");
  for (std::int64_t i = 0; i < ds.Y.numel(); ++i) ds.Y[i] = r.u8();
  if (r.u8() != 1) throw IoError("dataset: unexpected M dtype");
  for (std::int64_t i = 0; i < ds.M.numel(); ++i) ds.M[i] = r.u8();
  if (r.u8() != 8) throw IoError("dataset: unexpected offsets dtype");
  for (std::int64_t i = 0; i < ds.offsets.numel(); ++i) ds.offsets[i] = r.f64();

  json meta = json::parse(r.str());
  ds.scenario_ids = meta.at("scenario_ids").get<std::vector<std::string>>();
  ds.scenario_controllers =
      meta.at("scenario_controllers").get<std::vector<std::string>>();
  for (const auto& s : meta.at("samples"))
    ds.meta.push_back({s[0].get<std::uint32_t>(), s[1].get<std::uint32_t>()});
  ds.normalized = meta.at("normalized").get<bool>();
  if (ds.normalized) ds.stats = NormStats::from_json(meta.at("stats").dump());
  return ds;
}

}  // namespace pw::data
