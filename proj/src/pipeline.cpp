#include "platoonwatch/pipeline.hpp"

#include <cstdio>
#include <json.hpp>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "platoonwatch/bench.hpp"
#include "platoonwatch/io.hpp"
#include "platoonwatch/quant.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kNoiseSalt = 0xA015E;

std::string step_file(const std::string& step) { return step + ".json"; }

}  // namespace

Pipeline::Pipeline(config::RunConfig cfg) : cfg_(std::move(cfg)) {
  run_dir_ = fs::path(cfg_.out_dir) / io::hex64(cfg_.hash());
  fs::create_directories(run_dir_ / "manifests");
  io::write_file(run_dir_ / "config.ini", cfg_.canonical());
#ifdef _OPENMP
  if (cfg_.jobs > 0) omp_set_num_threads(cfg_.jobs);
#endif
}

bool Pipeline::manifest_valid(const std::string& step, std::uint64_t key) const {
  fs::path mp = run_dir_ / "manifests" / step_file(step);
  if (!fs::exists(mp)) return false;
  try {
    json j = json::parse(io::read_text_file(mp));
    if (j.at("key").get<std::string>() != io::hex64(key)) return false;
    for (auto& [rel, h] : j.at("outputs").items()) {
      fs::path p = run_dir_ / rel;
      if (!fs::exists(p)) return false;
      if (io::hex64(io::hash_file(p)) != h.get<std::string>()) return false;
    }
  } catch (...) {
    return false;
  }
  return true;
}

void Pipeline::write_manifest(const std::string& step, std::uint64_t key,
                              const std::vector<fs::path>& outputs) const {
  json j;
  j["key"] = io::hex64(key);
  json outs = json::object();
  for (const auto& rel : outputs)
    outs[rel.generic_string()] = io::hex64(io::hash_file(run_dir_ / rel));
  j["outputs"] = outs;
  io::write_file(run_dir_ / "manifests" / step_file(step), j.dump(2));
}

std::uint64_t Pipeline::upstream_digest(const std::string& step) const {
  fs::path mp = run_dir_ / "manifests" / step_file(step);
  if (!fs::exists(mp)) return 0;
  auto text = io::read_text_file(mp);
  return io::fnv1a(text);
}

void Pipeline::require_step(const std::string& artifact,
                            const std::string& step) const {
  fs::path mp = run_dir_ / "manifests" / step_file(step);
  if (!fs::exists(mp))
    throw ConfigError("requires " + artifact + " from step: " + step);
}

// --- simulate ---------------------------------------------------------

namespace {

std::vector<attack::RunEntry> build_entries(const config::RunConfig& cfg) {
  sim::ScenarioSpec base = cfg.base_scenario;
  base.seed = cfg.seed;
  auto roster = attack::default_attack_roster(base.duration);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < cfg.n_seeds; ++i)
    seeds.push_back(static_cast<std::uint64_t>(i));
  return attack::scenario_matrix(cfg.controllers, cfg.maneuvers, roster, seeds,
                                 base, cfg.benign_per_seed);
}

}  // namespace

StepResult Pipeline::simulate() {
  std::uint64_t key = io::fnv1a("simulate/v1|" + cfg_.canonical());
  if (manifest_valid("simulate", key)) return {"simulate", true};

  auto entries = build_entries(cfg_);
  std::vector<fs::path> outputs;
  json index = json::array();
  for (const auto& e : entries) {
    sim::Trace tr = sim::run_scenario(e.scenario);
    fs::path rel = fs::path("traces") / (e.id + ".pwtr");
    io::write_file(run_dir_ / rel, tr.to_binary());
    outputs.push_back(rel);
    json je;
    je["id"] = e.id;
    je["scenario"] = json::parse(e.scenario.to_json());
    je["attack"] = e.attack ? json::parse(e.attack->to_json()) : json(nullptr);
    index.push_back(je);
  }
  io::write_file(run_dir_ / "entries.json", index.dump(2));
  outputs.push_back("entries.json");
  write_manifest("simulate", key, outputs);
  return {"simulate", false};
}

// --- attack ---------------------------------------------------------------

StepResult Pipeline::attack() {
  require_step("traces", "simulate");
  std::uint64_t key = io::fnv1a("attack/v1|" + cfg_.canonical() + "|" +
                                io::hex64(upstream_digest("simulate")));
  if (manifest_valid("attack", key)) return {"attack", true};

  json index = json::parse(io::read_text_file(run_dir_ / "entries.json"));
  std::vector<fs::path> outputs;
  for (const auto& je : index) {
    std::string id = je.at("id").get<std::string>();
    sim::Trace benign = sim::Trace::from_binary(
        io::read_file(run_dir_ / "traces" / (id + ".pwtr")));
    sim::Trace tr;
    attack::LabelGrid labels;
    std::optional<attack::AttackSpec> aspec;
    if (!je.at("attack").is_null()) {
      aspec = attack::AttackSpec::from_json(je.at("attack").dump());
      auto run = attack::apply_attack(benign, *aspec);
      tr = std::move(run.trace);
      labels = std::move(run.labels);
    } else {
      tr = std::move(benign);
      labels = attack::benign_labels(tr);
    }
    sim::Trace noisy = sim::apply_sensor_noise(
        tr, tr.spec.noise, mix_seed(tr.spec.seed, kNoiseSalt));
    fs::path srel = fs::path("streams") / (id + ".jsonl");
    fs::path lrel = fs::path("streams") / (id + ".labels");
    io::write_file(run_dir_ / srel, attack::attacked_stream_jsonl(noisy, aspec));
    io::write_file(run_dir_ / lrel, labels.to_binary());
    outputs.push_back(srel);
    outputs.push_back(lrel);
  }
  write_manifest("attack", key, outputs);
  return {"attack", false};
}

// --- dataset ----------------------------------------------------------

data::RunData parse_stream(const std::string& jsonl,
                           const sim::ScenarioSpec& spec, const std::string& id,
                           const attack::LabelGrid& labels) {
  data::RunData run;
  run.id = id;
  sim::Trace tr;
  tr.spec = spec;
  tr.n_vehicles = spec.n_vehicles;
  std::istringstream in(jsonl);
  std::string line;
  if (!std::getline(in, line)) throw IoError("stream " + id + ": empty");
  json header = json::parse(line);
  if (!header.at("attack").is_null())
    run.attack = attack::AttackSpec::from_json(header.at("attack").dump());

  std::vector<sim::StepRecord> cells;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    sim::StepRecord r;
    r.truth.x = j.at("true").at("x").get<double>();
    r.truth.v = j.at("true").at("v").get<double>();
    r.truth.a = j.at("true").at("a").get<double>();
    r.truth.lane = j.at("true").at("lane").get<int>();
    r.sensor_gap = j.at("sensor").at("gap").get<double>();
    r.sensor_speed = j.at("sensor").at("v").get<double>();
    r.sensor_accel = j.at("sensor").at("a").get<double>();
    r.cmd = j.at("cmd").get<double>();
    r.member = j.at("member").get<int>() != 0;
    r.truth.member = r.member;
    r.claimed_x = j.at("claimed").at("x").get<double>();
    r.claimed_v = j.at("claimed").at("v").get<double>();
    r.claimed_a = j.at("claimed").at("a").get<double>();
    cells.push_back(r);
  }
  if (cells.size() % static_cast<std::size_t>(tr.n_vehicles) != 0)
    throw IoError("stream " + id + ": row count not divisible by vehicle count");
  tr.n_steps = static_cast<int>(cells.size() / tr.n_vehicles);
  tr.cells = std::move(cells);
  run.trace = std::move(tr);
  run.labels = labels;
  return run;
}

namespace {

struct SplitDatasets {
  data::WindowedDataset train, val, test;
};

json ratio_to_json(const data::AttackRatioReport& r) {
  json j;
  j["controllers"] = r.controllers;
  json cells = json::array();
  for (const auto& col : r.cells) {
    json colj = json::array();
    for (const auto& c : col)
      colj.push_back(c.defined ? json(c.pct) : json(nullptr));
    cells.push_back(colj);
  }
  j["cells"] = cells;
  j["vehicle_rows"] = r.vehicle_rows;
  return j;
}

}  // namespace

StepResult Pipeline::dataset() {
  require_step("attacked streams", "attack");
  std::uint64_t key = io::fnv1a("dataset/v1|" + cfg_.canonical() + "|" +
                                io::hex64(upstream_digest("attack")));
  if (manifest_valid("dataset", key)) return {"dataset", true};

  json index = json::parse(io::read_text_file(run_dir_ / "entries.json"));
  std::vector<std::string> ids;
  std::vector<sim::ScenarioSpec> specs;
  for (const auto& je : index) {
    ids.push_back(je.at("id").get<std::string>());
    specs.push_back(sim::ScenarioSpec::from_json(je.at("scenario").dump()));
  }

  auto split = data::split_scenarios(ids.size(), cfg_.split);
  auto build = [&](const std::vector<std::size_t>& idx, int step) {
    std::vector<data::WindowedDataset> parts;
    for (std::size_t i : idx) {
      auto labels = attack::LabelGrid::from_binary(
          io::read_file(run_dir_ / "streams" / (ids[i] + ".labels")));
      auto run = parse_stream(
          io::read_text_file(run_dir_ / "streams" / (ids[i] + ".jsonl")),
          specs[i], ids[i], labels);
      parts.push_back(data::window_stream(run, cfg_.window, step));
    }
    return data::concat(parts);
  };

  data::WindowedDataset train_ds = build(split.train, cfg_.train_step);
  data::WindowedDataset val_ds = build(split.val, cfg_.val_step);
  data::WindowedDataset test_ds = build(split.test, cfg_.test_step);

  data::NormStats stats = data::fit_normalizer(train_ds);
  train_ds = data::apply_normalizer(train_ds, stats);
  val_ds = data::apply_normalizer(val_ds, stats);
  test_ds = data::apply_normalizer(test_ds, stats);

  std::vector<fs::path> outputs;
  auto save = [&](const data::WindowedDataset& ds, const std::string& name) {
    fs::path rel = fs::path("datasets") / (name + ".pwds");
    data::save_dataset(ds, run_dir_ / rel);
    outputs.push_back(rel);
  };
  save(train_ds, "train");
  save(val_ds, "val");
  save(test_ds, "test");
  io::write_file(run_dir_ / "datasets" / "norm.json", stats.to_json());
  outputs.push_back(fs::path("datasets") / "norm.json");

  json rep;
  rep["train"] = ratio_to_json(data::attack_ratio_report(train_ds));
  rep["val"] = ratio_to_json(data::attack_ratio_report(val_ds));
  rep["test"] = ratio_to_json(data::attack_ratio_report(test_ds));
  fs::create_directories(run_dir_ / "reports");
  io::write_file(run_dir_ / "reports" / "ratio_report.json", rep.dump(2));
  outputs.push_back(fs::path("reports") / "ratio_report.json");

  write_manifest("dataset", key, outputs);
  return {"dataset", false};
}

// --- train ------------------------------------------------------------

namespace {

data::WindowedDataset view_for(const config::ModelSelector& sel,
                               const data::WindowedDataset& ds) {
  if (!sel.individual) return ds;
  return data::select_vehicle(ds, sel.vehicle - 1);
}

}  // namespace

StepResult Pipeline::train() {
  require_step("datasets", "dataset");
  std::uint64_t key = io::fnv1a("train/v1|" + cfg_.canonical() + "|" +
                                io::hex64(upstream_digest("dataset")));
  if (manifest_valid("train", key)) return {"train", true};

  auto train_full = data::load_dataset(run_dir_ / "datasets" / "train.pwds");
  auto val_full = data::load_dataset(run_dir_ / "datasets" / "val.pwds");

  std::vector<fs::path> outputs;
  for (const auto& sel : cfg_.models) {
    nn::ModelConfig mcfg = cfg_.model_config(sel);
    auto tr = view_for(sel, train_full);
    auto va = view_for(sel, val_full);
    fs::path ck_rel = fs::path("checkpoints") / (sel.name + ".train.ck");
    std::uint64_t init_seed = mix_seed(cfg_.train.seed, io::fnv1a(sel.name));
    auto result = train::train(mcfg, init_seed, tr, va, cfg_.loss, cfg_.train,
                               run_dir_ / ck_rel, /*resume=*/false);
    fs::path f32_rel = fs::path("checkpoints") / (sel.name + ".f32.ck");
    nn::save_checkpoint(result.best, run_dir_ / f32_rel, nn::BlobDtype::f32);
    fs::path hist_rel = fs::path("checkpoints") / (sel.name + ".history.jsonl");
    io::write_file(run_dir_ / hist_rel, result.history.to_jsonl());
    outputs.push_back(ck_rel);
    outputs.push_back(f32_rel);
    outputs.push_back(hist_rel);
  }
  write_manifest("train", key, outputs);
  return {"train", false};
}

// --- eval -------------------------------------------------------------

StepResult Pipeline::eval() {
  require_step("checkpoint", "train");
  std::uint64_t key = io::fnv1a("eval/v1|" + cfg_.canonical() + "|" +
                                io::hex64(upstream_digest("train")));
  if (manifest_valid("eval", key)) return {"eval", true};

  auto test_full = data::load_dataset(run_dir_ / "datasets" / "test.pwds");
  std::vector<fs::path> outputs;
  std::map<std::string, eval::MetricsReport> reports;

  for (const auto& sel : cfg_.models) {
    nn::Checkpoint ck = nn::load_checkpoint(
        run_dir_ / "checkpoints" / (sel.name + ".f32.ck"),
        cfg_.model_config(sel));
    auto ds = view_for(sel, test_full);
    eval::MetricsReport rep =
        train::evaluate_pass(ck.params, ds, cfg_.train.decision_threshold);
    rep.model_id = sel.name;
    rep.dataset_id = "test";
    reports[sel.name] = rep;

    fs::path jrel = fs::path("reports") / ("eval_" + sel.name + ".json");
    io::write_file(run_dir_ / jrel, rep.to_json());
    outputs.push_back(jrel);
    fs::path crel = fs::path("reports") / ("roc_" + sel.name + ".csv");
    io::write_file(run_dir_ / crel, rep.roc_csv());
    outputs.push_back(crel);

    if (!sel.individual && ds.samples() > 0) {
      // attention maps for the first test window
      nn::AttentionMaps maps;
      std::vector<std::int64_t> one{0};
      nn::Batch b;
      b.X = nn::Tensor({1, ds.vehicles(), ds.window(), ds.features()});
      b.M = nn::Tensor({1, ds.vehicles(), ds.window()});
      b.offsets = nn::Tensor({1, ds.vehicles()});
      std::copy(ds.X.data(), ds.X.data() + b.X.numel(), b.X.data());
      std::copy(ds.M.data(), ds.M.data() + b.M.numel(), b.M.data());
      std::copy(ds.offsets.data(), ds.offsets.data() + b.offsets.numel(),
                b.offsets.data());
      nn::forward(ck.params, b, false, 0, nullptr, &maps);
      json jm = json::array();
      for (std::size_t blk = 0; blk < maps.maps.size(); ++blk)
        for (std::size_t h = 0; h < maps.maps[blk].size(); ++h) {
          const nn::Tensor& t = maps.maps[blk][h];
          std::int64_t Ts = t.dim(1);
          json rows = json::array();
          for (std::int64_t q = 0; q < Ts; ++q) {
            json row = json::array();
            for (std::int64_t k2 = 0; k2 < Ts; ++k2)
              row.push_back(t[(0 * Ts + q) * Ts + k2]);
            rows.push_back(row);
          }
          jm.push_back({{"layer", blk}, {"head", h}, {"rows", rows}});
        }
      fs::path arel = fs::path("reports") / ("attention_" + sel.name + ".json");
      io::write_file(run_dir_ / arel, jm.dump());
      outputs.push_back(arel);
    }
  }

  // performance gain individual vs global (PerVehicle global as reference)
  if (reports.count("global_pv")) {
    json pgj = json::array();
    for (const auto& sel : cfg_.models) {
      if (!sel.individual) continue;
      const auto& ind = reports[sel.name];
      const auto& glob = reports["global_pv"];
      for (const std::string metric : {"precision", "recall", "f1", "accuracy", "auc"}) {
        try {
          auto pg = eval::performance_gain(ind, glob, sel.vehicle - 1, metric, 0);
          pgj.push_back({{"vehicle", sel.vehicle},
                         {"metric", metric},
                         {"pg", pg.pg}});
        } catch (const Error&) {
          pgj.push_back({{"vehicle", sel.vehicle}, {"metric", metric}, {"pg", nullptr}});
        }
      }
    }
    fs::path prel = fs::path("reports") / "pg.json";
    io::write_file(run_dir_ / prel, pgj.dump(2));
    outputs.push_back(prel);
  }

  write_manifest("eval", key, outputs);
  return {"eval", false};
}

// --- quantize ---------------------------------------------------------

StepResult Pipeline::quantize() {
  require_step("checkpoint", "train");
  require_step("datasets", "dataset");
  std::uint64_t key = io::fnv1a("quantize/v1|" + cfg_.canonical() + "|" +
                                io::hex64(upstream_digest("train")));
  if (manifest_valid("quantize", key)) return {"quantize", true};

  auto test_full = data::load_dataset(run_dir_ / "datasets" / "test.pwds");
  std::vector<fs::path> outputs;
  for (const auto& sel : cfg_.models) {
    fs::path f32_rel = fs::path("checkpoints") / (sel.name + ".f32.ck");
    nn::Checkpoint ck =
        nn::load_checkpoint(run_dir_ / f32_rel, cfg_.model_config(sel));
    auto ds = view_for(sel, test_full);

    json rep;
    rep["model"] = sel.name;
    rep["f32_bytes"] = static_cast<std::uint64_t>(fs::file_size(run_dir_ / f32_rel));

    if (cfg_.quant_int8) {
      auto qp = quant::quantize(ck.params);
      fs::path qrel = fs::path("quant") / (sel.name + ".int8.pwcq");
      quant::save_quantized(qp, run_dir_ / qrel);
      outputs.push_back(qrel);
      rep["int8_bytes"] = static_cast<std::uint64_t>(fs::file_size(run_dir_ / qrel));

      if (ds.samples() > 0) {
        quant::InferModel fengine(ck.params);
        nn::Tensor flog = fengine.forward_all(ds);
        nn::Tensor qlog = quant::quantized_forward(qp, ds);
        nn::Tensor fscore(flog.shape()), qscore(qlog.shape());
        for (std::int64_t i = 0; i < flog.numel(); ++i) {
          fscore[i] = nn::sigmoid(flog[i]);
          qscore[i] = nn::sigmoid(qlog[i]);
        }
        auto frep = eval::evaluate_scores(fscore, ds.Y, ds.M,
                                          cfg_.train.decision_threshold);
        auto qrep = eval::evaluate_scores(qscore, ds.Y, ds.M,
                                          cfg_.train.decision_threshold);
        double agree = 0.0, valid = 0.0;
        for (std::int64_t i = 0; i < flog.numel(); ++i) {
          if (ds.M[i] == 0.0) continue;
          valid += 1.0;
          bool pf = fscore[i] > cfg_.train.decision_threshold;
          bool pq = qscore[i] > cfg_.train.decision_threshold;
          if (pf == pq) agree += 1.0;
        }
        rep["auc_float"] = frep.auc ? json(*frep.auc) : json(nullptr);
        rep["auc_int8"] = qrep.auc ? json(*qrep.auc) : json(nullptr);
        rep["f1_float"] = frep.metrics.f1 ? json(*frep.metrics.f1) : json(nullptr);
        rep["f1_int8"] = qrep.metrics.f1 ? json(*qrep.metrics.f1) : json(nullptr);
        if (frep.auc && qrep.auc) rep["auc_delta"] = std::abs(*frep.auc - *qrep.auc);
        rep["agreement"] = valid > 0 ? agree / valid : 1.0;
      }
    }
    if (cfg_.quant_f16) {
      fs::path hrel = fs::path("quant") / (sel.name + ".f16.ck");
      nn::save_checkpoint(ck.params, run_dir_ / hrel, nn::BlobDtype::f16);
      outputs.push_back(hrel);
      rep["f16_bytes"] = static_cast<std::uint64_t>(fs::file_size(run_dir_ / hrel));
    }
    fs::path rrel = fs::path("reports") / ("quant_" + sel.name + ".json");
    io::write_file(run_dir_ / rrel, rep.dump(2));
    outputs.push_back(rrel);
  }
  write_manifest("quantize", key, outputs);
  return {"quantize", false};
}

// --- bench ------------------------------------------------------------

StepResult Pipeline::bench() {
  require_step("quantized checkpoints", "quantize");
  require_step("datasets", "dataset");
  std::uint64_t key = io::fnv1a("bench/v1|" + cfg_.canonical() + "|" +
                                io::hex64(upstream_digest("quantize")));
  if (manifest_valid("bench", key)) return {"bench", true};

  auto test_full = data::load_dataset(run_dir_ / "datasets" / "test.pwds");
  json out = json::array();
  for (const auto& sel : cfg_.models) {
    auto ds = view_for(sel, test_full);
    if (ds.samples() == 0) continue;
    nn::Checkpoint ck = nn::load_checkpoint(
        run_dir_ / "checkpoints" / (sel.name + ".f32.ck"), cfg_.model_config(sel));
    quant::InferModel fengine(ck.params);
    auto frep = bench::benchmark_forward(sel.name + "/float32", fengine, ds,
                                         cfg_.bench_runs, cfg_.bench_warmup);
    out.push_back(json::parse(frep.to_json()));
    if (cfg_.quant_int8) {
      auto qp = quant::load_quantized(run_dir_ / "quant" / (sel.name + ".int8.pwcq"));
      quant::InferModel qengine(qp.dequantize());
      auto qrep = bench::benchmark_forward(sel.name + "/int8", qengine, ds,
                                           cfg_.bench_runs, cfg_.bench_warmup);
      out.push_back(json::parse(qrep.to_json()));
    }
  }
  fs::create_directories(run_dir_ / "bench");
  io::write_file(run_dir_ / "bench" / "bench.json", out.dump(2));
  write_manifest("bench", key, {fs::path("bench") / "bench.json"});
  return {"bench", false};
}

std::vector<StepResult> Pipeline::all() {
  std::vector<StepResult> rs;
  rs.push_back(simulate());
  rs.push_back(attack());
  rs.push_back(dataset());
  rs.push_back(train());
  rs.push_back(eval());
  rs.push_back(quantize());
  rs.push_back(bench());
  return rs;
}

// --- reporting ---------------------------------------------------------

std::string Pipeline::ratio_report_json() const {
  fs::path p = run_dir_ / "reports" / "ratio_report.json";
  if (!fs::exists(p))
    throw ConfigError("requires ratio report from step: dataset");
  return io::read_text_file(p);
}

std::string Pipeline::ratio_report_text() const {
  json j = json::parse(ratio_report_json());
  const json& tr = j.at("train");
  auto controllers = tr.at("controllers").get<std::vector<std::string>>();
  auto rows = tr.at("vehicle_rows").get<std::int64_t>() + 1;

  std::ostringstream o;
  o << "Attack ratio [%], train/val/test\n";
  o << "vehicle   ";
  for (const auto& c : controllers) {
    o << "| " << c;
    for (std::size_t k = c.size(); k < 20; ++k) o << ' ';
  }
  o << "\n";
  for (std::int64_t r = 0; r < rows; ++r) {
    std::string name = r == 0 ? "Global" : ("Car " + std::to_string(r));
    o << name;
    for (std::size_t k = name.size(); k < 10; ++k) o << ' ';
    for (std::size_t c = 0; c < controllers.size(); ++c) {
      o << "| ";
      for (const char* split : {"train", "val", "test"}) {
        const json& cell = j.at(split).at("cells")[c][static_cast<std::size_t>(r)];
        char buf[16];
        if (cell.is_null())
          std::snprintf(buf, sizeof(buf), "  n/a");
        else
          std::snprintf(buf, sizeof(buf), "%5.2f", cell.get<double>());
        o << buf << (split == std::string("test") ? " " : "/");
      }
      o << "  ";
    }
    o << "\n";
  }
  return o.str();
}

}  // namespace pw::pipeline
