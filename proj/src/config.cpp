#include "platoonwatch/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "platoonwatch/io.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::config {

RunConfig::RunConfig() {
  // desk-scale training budget; the architecture and loss values are the
  // tuned ones, epochs are capped so a full run stays in CPU minutes
  train.max_epochs = 4;
  train.patience = 2;
  models = {parse_model_selector("global_pv"), parse_model_selector("global_iv"),
            parse_model_selector("indiv:3")};
  split.seed = mix_seed(seed, 0x59117);
  train.seed = mix_seed(seed, 0x7124);
}

ModelSelector parse_model_selector(const std::string& token) {
  ModelSelector s;
  s.name = token;
  if (token == "global_pv") {
    s.mode = nn::EncodingMode::PerVehicle;
  } else if (token == "global_iv") {
    s.mode = nn::EncodingMode::InterVehicle;
  } else if (token.rfind("indiv:", 0) == 0) {
    s.individual = true;
    s.mode = nn::EncodingMode::PerVehicle;
    s.vehicle = std::stoi(token.substr(6));
    if (s.vehicle < 1) throw ConfigError("model selector: car number must be >= 1");
  } else {
    throw ConfigError("unknown model selector: " + token +
                      " (expect global_pv, global_iv or indiv:<k>)");
  }
  return s;
}

nn::ModelConfig RunConfig::model_config(const ModelSelector& sel) const {
  nn::ModelConfig m;
  m.d_model = d_model;
  m.n_heads = n_heads;
  m.n_blocks = sel.individual ? blocks_individual : blocks_global;
  m.d_ff = 4 * d_model;
  m.dropout = dropout;
  m.causal = causal;
  m.mode = sel.mode;
  m.features = data::kFeatureCount;
  m.window = window;
  return m;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

struct Entry {
  std::string section, key, value;
  int line;
};

std::vector<Entry> tokenize(const std::string& text) {
  std::vector<Entry> out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    Entry e;
    e.section = section;
    e.key = trim(t.substr(0, eq));
    e.value = trim(t.substr(eq + 1));
    e.line = lineno;
    out.push_back(std::move(e));
  }
  return out;
}

double to_double(const Entry& e) {
  try {
    std::size_t pos = 0;
    double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (...) {
    throw ConfigError("config line " + std::to_string(e.line) + ": key '" +
                      e.key + "' needs a number, got '" + e.value + "'");
  }
}

int to_int(const Entry& e) {
  double v = to_double(e);
  if (v != static_cast<double>(static_cast<long long>(v)))
    throw ConfigError("config line " + std::to_string(e.line) + ": key '" +
                      e.key + "' needs an integer");
  return static_cast<int>(v);
}

std::uint64_t to_u64(const Entry& e) {
  try {
    return std::stoull(e.value);
  } catch (...) {
    throw ConfigError("config line " + std::to_string(e.line) + ": key '" +
                      e.key + "' needs an unsigned integer");
  }
}

bool to_bool(const Entry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ConfigError("config line " + std::to_string(e.line) + ": key '" +
                    e.key + "' needs true/false");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  for (const Entry& e : tokenize(text)) {
    auto unknown = [&]() -> ConfigError {
      return ConfigError("config line " + std::to_string(e.line) +
                         ": unknown key '" + e.key + "' in section [" +
                         e.section + "]");
    };
    if (e.section == "pipeline") {
      if (e.key == "out_dir") c.out_dir = e.value;
      else if (e.key == "seed") c.seed = to_u64(e);
      else if (e.key == "jobs") c.jobs = to_int(e);
      else throw unknown();
    } else if (e.section == "scenario") {
      auto& sc = c.base_scenario;
      if (e.key == "controllers") {
        c.controllers.clear();
        for (const auto& s : split_list(e.value))
          c.controllers.push_back(sim::controller_from_string(s));
      } else if (e.key == "maneuvers") {
        c.maneuvers.clear();
        for (const auto& s : split_list(e.value))
          c.maneuvers.push_back(sim::maneuver_from_string(s));
      } else if (e.key == "n_vehicles") sc.n_vehicles = to_int(e);
      else if (e.key == "duration") sc.duration = to_double(e);
      else if (e.key == "maneuver_time") sc.maneuver_time = to_double(e);
      else if (e.key == "n_seeds") c.n_seeds = to_int(e);
      else if (e.key == "benign_per_seed") c.benign_per_seed = to_int(e);
      else if (e.key == "leader_speed")
        sc.leader.points = {{0.0, to_double(e)}};
      else if (e.key == "sine_amp") sc.leader.sine_amp = to_double(e);
      else if (e.key == "sine_period") sc.leader.sine_period = to_double(e);
      else if (e.key == "sigma_pos") sc.noise.sigma_pos = to_double(e);
      else if (e.key == "sigma_speed") sc.noise.sigma_speed = to_double(e);
      else if (e.key == "sigma_accel") sc.noise.sigma_accel = to_double(e);
      else if (e.key == "tau_act") sc.tau_act = to_double(e);
      else if (e.key == "join_slot") sc.join_slot = to_int(e);
      else if (e.key == "exit_vehicle") sc.exit_vehicle = to_int(e);
      else throw unknown();
    } else if (e.section == "gains") {
      auto& g = c.base_scenario.gains;
      if (e.key == "k_a") g.k_a = to_double(e);
      else if (e.key == "k_l") g.k_l = to_double(e);
      else if (e.key == "k_v") g.k_v = to_double(e);
      else if (e.key == "k_vl") g.k_vl = to_double(e);
      else if (e.key == "k_gap") g.k_gap = to_double(e);
      else if (e.key == "gap_des") g.gap_des = to_double(e);
      else if (e.key == "ploeg_h") g.ploeg_h = to_double(e);
      else if (e.key == "ploeg_r") g.ploeg_r = to_double(e);
      else if (e.key == "ploeg_kp") g.ploeg_kp = to_double(e);
      else if (e.key == "ploeg_kd") g.ploeg_kd = to_double(e);
      else if (e.key == "consensus_gamma") g.consensus_gamma = to_double(e);
      else if (e.key == "a_max") g.a_max = to_double(e);
      else if (e.key == "vehicle_length") g.vehicle_length = to_double(e);
      else throw unknown();
    } else if (e.section == "dataset") {
      if (e.key == "window") c.window = to_int(e);
      else if (e.key == "train_step") c.train_step = to_int(e);
      else if (e.key == "val_step") c.val_step = to_int(e);
      else if (e.key == "test_step") c.test_step = to_int(e);
      else if (e.key == "train_frac") c.split.train = to_double(e);
      else if (e.key == "val_frac") c.split.val = to_double(e);
      else if (e.key == "test_frac") c.split.test = to_double(e);
      else throw unknown();
    } else if (e.section == "model") {
      if (e.key == "d_model") c.d_model = to_int(e);
      else if (e.key == "n_heads") c.n_heads = to_int(e);
      else if (e.key == "blocks_global") c.blocks_global = to_int(e);
      else if (e.key == "blocks_individual") c.blocks_individual = to_int(e);
      else if (e.key == "dropout") c.dropout = to_double(e);
      else if (e.key == "causal") c.causal = to_bool(e);
      else throw unknown();
    } else if (e.section == "loss") {
      if (e.key == "lambda_fp") c.loss.lambda_fp = to_double(e);
      else if (e.key == "lambda_pos") c.loss.lambda_pos = to_double(e);
      else if (e.key == "tau") c.loss.tau = to_double(e);
      else if (e.key == "eps") c.loss.eps = to_double(e);
      else throw unknown();
    } else if (e.section == "train") {
      if (e.key == "lr") c.train.lr = to_double(e);
      else if (e.key == "batch_size") c.train.batch_size = to_int(e);
      else if (e.key == "max_epochs") c.train.max_epochs = to_int(e);
      else if (e.key == "patience") c.train.patience = to_int(e);
      else if (e.key == "threshold") c.train.decision_threshold = to_double(e);
      else if (e.key == "models") {
        c.models.clear();
        for (const auto& s : split_list(e.value))
          c.models.push_back(parse_model_selector(s));
      } else throw unknown();
    } else if (e.section == "quant") {
      if (e.key == "int8") c.quant_int8 = to_bool(e);
      else if (e.key == "f16") c.quant_f16 = to_bool(e);
      else throw unknown();
    } else if (e.section == "bench") {
      if (e.key == "n_runs") c.bench_runs = to_int(e);
      else if (e.key == "warmup") c.bench_warmup = to_int(e);
      else throw unknown();
    } else {
      throw ConfigError("config line " + std::to_string(e.line) +
                        ": unknown section [" + e.section + "]");
    }
  }
  c.split.seed = mix_seed(c.seed, 0x59117);
  c.train.seed = mix_seed(c.seed, 0x7124);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_text_file(path));
}

std::string RunConfig::canonical() const {
  std::ostringstream o;
  o.precision(17);
  o << "[pipeline]\nseed = " << seed << "\n";
  o << "[scenario]\ncontrollers = ";
  for (std::size_t i = 0; i < controllers.size(); ++i)
    o << (i ? ", " : "") << sim::to_string(controllers[i]);
  o << "\nmaneuvers = ";
  for (std::size_t i = 0; i < maneuvers.size(); ++i)
    o << (i ? ", " : "") << sim::to_string(maneuvers[i]);
  o << "\nbase = " << base_scenario.to_json() << "\n";
  o << "n_seeds = " << n_seeds << "\nbenign_per_seed = " << benign_per_seed
    << "\n";
  o << "[dataset]\nwindow = " << window << "\ntrain_step = " << train_step
    << "\nval_step = " << val_step << "\ntest_step = " << test_step
    << "\nfractions = " << split.train << " " << split.val << " " << split.test
    << "\n";
  o << "[model]\nd_model = " << d_model << "\nn_heads = " << n_heads
    << "\nblocks_global = " << blocks_global
    << "\nblocks_individual = " << blocks_individual << "\ndropout = " << dropout
    << "\ncausal = " << causal << "\n";
  o << "[loss]\nlambda_fp = " << loss.lambda_fp
    << "\nlambda_pos = " << loss.lambda_pos << "\ntau = " << loss.tau
    << "\neps = " << loss.eps << "\n";
  o << "[train]\nlr = " << train.lr << "\nbatch_size = " << train.batch_size
    << "\nmax_epochs = " << train.max_epochs << "\npatience = " << train.patience
    << "\nthreshold = " << train.decision_threshold << "\nmodels = ";
  for (std::size_t i = 0; i < models.size(); ++i)
    o << (i ? ", " : "") << models[i].name;
  o << "\n[quant]\nint8 = " << quant_int8 << "\nf16 = " << quant_f16 << "\n";
  o << "[bench]\nn_runs = " << bench_runs << "\nwarmup = " << bench_warmup
    << "\n";
  return o.str();
}

std::uint64_t RunConfig::hash() const { return io::fnv1a(canonical()); }

std::string default_config_text() {
  RunConfig d;
  std::ostringstream o;
  o << "# platoonwatch run configuration (shipped defaults)\n"
    << "[pipeline]\n"
    << "out_dir = runs\n"
    << "seed = 1\n"
    << "jobs = 0\n\n"
    << "[scenario]\n"
    << "controllers = path, ploeg, consensus, flatbed\n"
    << "maneuvers = join, exit, steady\n"
    << "n_vehicles = 7\n"
    << "duration = 30\n"
    << "maneuver_time = 10\n"
    << "n_seeds = 1\n"
    << "benign_per_seed = 6\n"
    << "leader_speed = 25\n"
    << "sine_amp = 1\n"
    << "sine_period = 30\n"
    << "sigma_pos = 0.1\n"
    << "sigma_speed = 0.05\n"
    << "sigma_accel = 0.01\n"
    << "tau_act = 0.5\n"
    << "join_slot = 3\n"
    << "exit_vehicle = 3\n\n"
    << "[dataset]\n"
    << "window = 10\n"
    << "train_step = " << d.train_step << "\n"
    << "val_step = " << d.val_step << "\n"
    << "test_step = " << d.test_step << "\n"
    << "train_frac = 0.7\n"
    << "val_frac = 0.15\n"
    << "test_frac = 0.15\n\n"
    << "[model]\n"
    << "d_model = 128\n"
    << "n_heads = 2\n"
    << "blocks_global = 4\n"
    << "blocks_individual = 2\n"
    << "dropout = 0.1\n"
    << "causal = false\n\n"
    << "[loss]\n"
    << "lambda_fp = 1.7\n"
    << "lambda_pos = 0.6\n"
    << "tau = 0.6\n"
    << "eps = 1e-8\n\n"
    << "[train]\n"
    << "lr = 1e-4\n"
    << "batch_size = 128\n"
    << "max_epochs = " << d.train.max_epochs << "\n"
    << "patience = " << d.train.patience << "\n"
    << "threshold = 0.6\n"
    << "models = global_pv, global_iv, indiv:3\n\n"
    << "[quant]\n"
    << "int8 = true\n"
    << "f16 = true\n\n"
    << "[bench]\n"
    << "n_runs = 1000\n"
    << "warmup = 50\n";
  return o.str();
}

}  // namespace pw::config
