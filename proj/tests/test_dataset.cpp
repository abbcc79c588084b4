#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "platoonwatch/dataset.hpp"
#include "platoonwatch/io.hpp"
#include "platoonwatch/rng.hpp"

using namespace pw;
using namespace pw::data;

namespace {

// A synthetic run with deterministic fields; vehicle `absent_until` of the
// grid becomes a member only from that step on (join-like masking).
RunData synthetic_run(int n_steps, int n_vehicles, int absent_vehicle = -1,
                      int absent_until = 0, std::uint64_t seed = 7) {
  RunData run;
  run.id = "synthetic";
  sim::Trace& tr = run.trace;
  tr.spec = sim::ScenarioSpec{};
  tr.spec.n_vehicles = n_vehicles;
  tr.n_steps = n_steps;
  tr.n_vehicles = n_vehicles;
  tr.cells.resize(static_cast<std::size_t>(n_steps) * n_vehicles);
  Rng rng(seed);
  for (int s = 0; s < n_steps; ++s)
    for (int v = 0; v < n_vehicles; ++v) {
      auto& r = tr.at(s, v);
      bool member = !(v == absent_vehicle && s < absent_until);
      r.member = member;
      r.truth.member = member;
      r.truth.x = -8.0 * v + 25.0 * s * kDtComms + rng.uniform(-0.3, 0.3);
      r.truth.v = 25.0 + rng.uniform(-1, 1);
      r.truth.a = rng.uniform(-0.5, 0.5);
      r.truth.lane = member ? 0 : 1;
      r.claimed_x = r.truth.x;
      r.claimed_v = r.truth.v;
      r.claimed_a = r.truth.a;
      if (member) {
        r.sensor_gap = 4.0 + rng.uniform(-0.2, 0.2);
        r.sensor_speed = r.truth.v;
        r.sensor_accel = r.truth.a;
        r.cmd = rng.uniform(-1, 1);
      }
    }
  run.labels = attack::benign_labels(tr);
  return run;
}

}  // namespace

TEST_CASE("window counts follow the stride arithmetic") {
  RunData run = synthetic_run(30, 3);
  WindowedDataset ds = window_stream(run, 10, 1);
  CHECK(ds.samples() == 21);  // (30-10)+1
  CHECK(ds.vehicles() == 2);  // follower rows only
  CHECK(ds.window() == 10);
  CHECK(ds.features() == kFeatureCount);

  WindowedDataset ds3 = window_stream(run, 10, 3);
  CHECK(ds3.samples() == 7);  // starts 0,3,..,18

  // consecutive windows differ by exactly the stride
  for (std::int64_t b = 1; b < ds3.samples(); ++b)
    CHECK(ds3.offsets[b * 2] - ds3.offsets[(b - 1) * 2] == 3.0);

  // short stream: empty dataset, not an error
  RunData tiny = synthetic_run(6, 3);
  CHECK(window_stream(tiny, 10, 1).samples() == 0);
}

TEST_CASE("offsets reproduce the absolute comm step of each record") {
  RunData run = synthetic_run(40, 3);
  WindowedDataset ds = window_stream(run, 10, 4);
  for (std::int64_t b = 0; b < ds.samples(); ++b) {
    CHECK(ds.meta[static_cast<std::size_t>(b)].window_start ==
          static_cast<std::uint32_t>(ds.offsets[b * ds.vehicles()]));
    for (std::int64_t v = 0; v < ds.vehicles(); ++v)
      CHECK(ds.offsets[b * ds.vehicles() + v] ==
            static_cast<double>(ds.meta[static_cast<std::size_t>(b)].window_start));
  }
}

TEST_CASE("pre-join steps come through with zero mask") {
  RunData run = synthetic_run(30, 4, /*absent_vehicle=*/3, /*absent_until=*/15);
  WindowedDataset ds = window_stream(run, 10, 1);
  // follower row 2 is vehicle 3
  for (std::int64_t b = 0; b < ds.samples(); ++b)
    for (std::int64_t t = 0; t < 10; ++t) {
      int abs_step = static_cast<int>(b) + static_cast<int>(t);
      double m = ds.M[(b * 3 + 2) * 10 + t];
      CHECK(m == (abs_step >= 15 ? 1.0 : 0.0));
    }

  // mask conservation: window sums equal a direct recount via stride math
  double win_sum = 0.0;
  for (std::int64_t i = 0; i < ds.M.numel(); ++i) win_sum += ds.M[i];
  double recount = 0.0;
  for (int b = 0; b + 10 <= 30; ++b)
    for (int v = 1; v < 4; ++v)
      for (int t = 0; t < 10; ++t) recount += run.labels.mat(b + t, v) ? 1 : 0;
  CHECK(win_sum == recount);
}

TEST_CASE("normalizer: masked stats hit mean 0 / std 1, dropped features zero") {
  RunData run = synthetic_run(60, 4, 3, 20);
  WindowedDataset ds = window_stream(run, 10, 2);
  // make one feature constant
  for (std::int64_t i = 0; i < ds.samples() * ds.vehicles() * ds.window(); ++i)
    ds.X[i * kFeatureCount + 6] = 3.25;
  NormStats st = fit_normalizer(ds);
  CHECK(st.dropped[6] == 1);
  for (int f = 0; f < kFeatureCount; ++f)
    if (f != 6) CHECK(st.dropped[static_cast<std::size_t>(f)] == 0);

  WindowedDataset out = apply_normalizer(ds, st);
  std::int64_t cells = out.samples() * out.vehicles() * out.window();
  for (int f = 0; f < kFeatureCount; ++f) {
    double sum = 0.0, sum2 = 0.0, n = 0.0;
    for (std::int64_t c = 0; c < cells; ++c) {
      if (out.M[c] == 0.0) {
        CHECK(out.X[c * kFeatureCount + f] == 0.0);
        continue;
      }
      double x = out.X[c * kFeatureCount + f];
      sum += x;
      sum2 += x * x;
      n += 1.0;
    }
    double mean = sum / n;
    double sd = std::sqrt(std::max(0.0, sum2 / n - mean * mean));
    if (f == 6) {
      CHECK(mean == 0.0);  // dropped -> exact zeros
    } else {
      CHECK(std::abs(mean) <= 1e-6);
      CHECK(std::abs(sd - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("scenario split: counts, determinism, partition") {
  SplitSpec spec;
  spec.seed = 11;
  SplitIndices s = split_scenarios(20, spec);
  CHECK(s.train.size() == 14);
  CHECK(s.val.size() == 3);
  CHECK(s.test.size() == 3);

  SplitIndices s2 = split_scenarios(20, spec);
  CHECK(s.train == s2.train);
  CHECK(s.val == s2.val);
  CHECK(s.test == s2.test);

  std::set<std::size_t> all;
  for (auto i : s.train) all.insert(i);
  for (auto i : s.val) all.insert(i);
  for (auto i : s.test) all.insert(i);
  CHECK(all.size() == 20);

  CHECK_THROWS_AS(split_scenarios(2, spec), ConfigError);
  SplitSpec bad;
  bad.train = 0.9;
  bad.val = 0.2;
  bad.test = 0.1;
  CHECK_THROWS_AS(split_scenarios(20, bad), ConfigError);
}

TEST_CASE("attack ratio report: trivial cases and recount oracle") {
  RunData run = synthetic_run(26, 3);
  WindowedDataset benign = window_stream(run, 10, 4);
  auto rep0 = attack_ratio_report(benign);
  for (const auto& col : rep0.cells)
    for (const auto& cell : col) {
      CHECK(cell.defined);
      CHECK(cell.pct == 0.0);
    }

  // hand-built grid: 2 attacked of 16 valid cells -> 12.5%
  WindowedDataset tiny;
  tiny.X = nn::Tensor({1, 2, 8, kFeatureCount});
  tiny.Y = nn::Tensor({1, 2, 8});
  tiny.M = nn::Tensor({1, 2, 8});
  tiny.offsets = nn::Tensor({1, 2});
  tiny.M.fill(1.0);
  tiny.Y[3] = 1.0;
  tiny.Y[12] = 1.0;
  tiny.meta.push_back({0, 0});
  tiny.scenario_ids.push_back("hand");
  tiny.scenario_controllers.push_back("path");
  auto rep = attack_ratio_report(tiny);
  CHECK(rep.cells[0][0].pct == doctest::Approx(12.5));

  // random grids against a direct recount
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    WindowedDataset g;
    std::int64_t B = 3, V = 2, T = 5;
    g.X = nn::Tensor({B, V, T, kFeatureCount});
    g.Y = nn::Tensor({B, V, T});
    g.M = nn::Tensor({B, V, T});
    g.offsets = nn::Tensor({B, V});
    for (std::int64_t i = 0; i < B * V * T; ++i) {
      g.M[i] = rng.uniform() < 0.7 ? 1.0 : 0.0;
      g.Y[i] = (g.M[i] == 1.0 && rng.uniform() < 0.3) ? 1.0 : 0.0;
    }
    for (std::int64_t b = 0; b < B; ++b) g.meta.push_back({0, 0});
    g.scenario_ids.push_back("r");
    g.scenario_controllers.push_back("ploeg");
    auto r = attack_ratio_report(g);
    double ysum = 0, msum = 0;
    for (std::int64_t i = 0; i < B * V * T; ++i) {
      msum += g.M[i];
      ysum += g.Y[i] * g.M[i];
    }
    if (msum > 0)
      CHECK(r.cells[0][0].pct == doctest::Approx(100.0 * ysum / msum).epsilon(1e-12));
  }
}

TEST_CASE("dataset container roundtrips losslessly and rejects truncation") {
  RunData run = synthetic_run(30, 4, 3, 12);
  WindowedDataset ds = window_stream(run, 10, 2);
  NormStats st = fit_normalizer(ds);
  ds = apply_normalizer(ds, st);

  auto dir = std::filesystem::temp_directory_path() / "pw_ds_test";
  std::filesystem::create_directories(dir);
  auto p = dir / "d.pwds";
  save_dataset(ds, p);
  WindowedDataset back = load_dataset(p);
  CHECK(back.samples() == ds.samples());
  for (std::int64_t i = 0; i < ds.X.numel(); ++i) CHECK(back.X[i] == ds.X[i]);
  for (std::int64_t i = 0; i < ds.Y.numel(); ++i) CHECK(back.Y[i] == ds.Y[i]);
  for (std::int64_t i = 0; i < ds.M.numel(); ++i) CHECK(back.M[i] == ds.M[i]);
  for (std::int64_t i = 0; i < ds.offsets.numel(); ++i)
    CHECK(back.offsets[i] == ds.offsets[i]);
  CHECK(back.normalized);
  CHECK(back.scenario_ids == ds.scenario_ids);
  CHECK(back.stats.mean == ds.stats.mean);

  auto bytes = io::read_file(p);
  bytes.resize(bytes.size() - 100);
  io::write_file(dir / "cut.pwds", bytes);
  CHECK_THROWS_AS(load_dataset(dir / "cut.pwds"), IoError);

  // empty dataset roundtrips
  RunData tiny = synthetic_run(5, 3);
  WindowedDataset empty = window_stream(tiny, 10, 1);
  save_dataset(empty, dir / "empty.pwds");
  WindowedDataset eback = load_dataset(dir / "empty.pwds");
  CHECK(eback.samples() == 0);
}

TEST_CASE("select_vehicle narrows to one row") {
  RunData run = synthetic_run(30, 4);
  WindowedDataset ds = window_stream(run, 10, 5);
  WindowedDataset one = select_vehicle(ds, 1);
  CHECK(one.vehicles() == 1);
  CHECK(one.samples() == ds.samples());
  for (std::int64_t b = 0; b < ds.samples(); ++b)
    for (std::int64_t t = 0; t < 10; ++t)
      for (int f = 0; f < kFeatureCount; ++f)
        CHECK(one.X[(b * 10 + t) * kFeatureCount + f] ==
              ds.X[((b * 3 + 1) * 10 + t) * kFeatureCount + f]);
  CHECK_THROWS_AS(select_vehicle(ds, 7), ConfigError);
}

TEST_CASE("label dims must match the trace") {
  RunData run = synthetic_run(30, 3);
  run.labels.n_steps = 29;
  CHECK_THROWS_AS(window_stream(run, 10, 1), ShapeError);
}
