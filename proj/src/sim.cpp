#include "platoonwatch/sim.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "platoonwatch/io.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::sim {

using nlohmann::json;

const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::Path: return "path";
    case ControllerKind::Ploeg: return "ploeg";
    case ControllerKind::Consensus: return "consensus";
    case ControllerKind::Flatbed: return "flatbed";
  }
  return "?";
}

ControllerKind controller_from_string(const std::string& s) {
  if (s == "path") return ControllerKind::Path;
  if (s == "ploeg") return ControllerKind::Ploeg;
  if (s == "consensus") return ControllerKind::Consensus;
  if (s == "flatbed") return ControllerKind::Flatbed;
  throw ConfigError("unknown controller: " + s);
}

const char* to_string(Maneuver m) {
  switch (m) {
    case Maneuver::Join: return "join";
    case Maneuver::Exit: return "exit";
    case Maneuver::Steady: return "steady";
  }
  return "?";
}

Maneuver maneuver_from_string(const std::string& s) {
  if (s == "join") return Maneuver::Join;
  if (s == "exit") return Maneuver::Exit;
  if (s == "steady") return Maneuver::Steady;
  throw ConfigError("unknown maneuver: " + s);
}

void SensorNoiseSpec::validate() const {
  if (sigma_pos < 0 || sigma_speed < 0 || sigma_accel < 0)
    throw ConfigError("noise sigmas must be non-negative");
}

double LeaderProfile::speed_at(double t) const {
  double base;
  if (points.empty()) throw ConfigError("leader profile has no points");
  if (t <= points.front().first) {
    base = points.front().second;
  } else if (t >= points.back().first) {
    base = points.back().second;
  } else {
    base = points.back().second;
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (t <= points[i].first) {
        double t0 = points[i - 1].first, v0 = points[i - 1].second;
        double t1 = points[i].first, v1 = points[i].second;
        base = v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        break;
      }
    }
  }
  if (sine_amp != 0.0)
    base += sine_amp * std::sin(2.0 * M_PI * t / sine_period + sine_phase);
  return base;
}

double LeaderProfile::accel_at(double t) const {
  double slope = 0.0;
  if (t > points.front().first && t < points.back().first) {
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (t <= points[i].first) {
        slope = (points[i].second - points[i - 1].second) /
                (points[i].first - points[i - 1].first);
        break;
      }
    }
  }
  if (sine_amp != 0.0)
    slope += sine_amp * (2.0 * M_PI / sine_period) *
             std::cos(2.0 * M_PI * t / sine_period + sine_phase);
  return slope;
}

void ScenarioSpec::validate() const {
  if (n_vehicles < 3) throw ConfigError("scenario: n_vehicles must be >= 3");
  if (!(duration > maneuver_time) || maneuver_time < 0)
    throw ConfigError("scenario: need duration > maneuver_time >= 0");
  if (maneuver == Maneuver::Exit &&
      (exit_vehicle <= 0 || exit_vehicle >= n_vehicles - 1))
    throw ConfigError("scenario: exit vehicle must be a middle follower");
  if (maneuver == Maneuver::Join &&
      (join_slot < 1 || join_slot >= n_vehicles - 1))
    throw ConfigError("scenario: join slot out of range");
  noise.validate();
  if (tau_act <= 0) throw ConfigError("scenario: tau_act must be > 0");
}

double desired_gap(ControllerKind kind, const ControllerParams& p, double v) {
  if (kind == ControllerKind::Ploeg) return p.ploeg_r + p.ploeg_h * v;
  return p.gap_des;
}

namespace {

double clamp_accel(double a, double a_max) {
  return std::min(std::max(a, -a_max), a_max);
}

}  // namespace

double controller_accel(ControllerKind kind, const VehicleState& ego,
                        const NeighborKinematics* pred,
                        const NeighborKinematics* lead,
                        const ControllerParams& p) {
  if (pred == nullptr || lead == nullptr)
    throw ConfigError("controller_accel: topology requires predecessor and leader");
  if (!std::isfinite(ego.x) || !std::isfinite(ego.v) || !std::isfinite(ego.a) ||
      !std::isfinite(pred->x) || !std::isfinite(lead->x))
    throw NumericError("controller_accel: non-finite input");

  double gap = pred->x - ego.x - p.vehicle_length;
  double a = 0.0;
  switch (kind) {
    case ControllerKind::Path:
      a = p.k_a * pred->a + p.k_l * lead->a - p.k_v * (ego.v - pred->v) -
          p.k_vl * (ego.v - lead->v) + p.k_gap * (gap - p.gap_des_eff);
      break;
    case ControllerKind::Ploeg: {
      double e = gap - p.gap_des_eff;
      double de = (pred->v - ego.v) - p.ploeg_h * ego.a;
      a = pred->a + p.ploeg_kp * e + p.ploeg_kd * de;
      break;
    }
    case ControllerKind::Consensus: {
      double d_pred = p.gap_des_eff + p.vehicle_length;
      a = -((ego.x - pred->x + d_pred) +
            p.consensus_gamma * (ego.v - pred->v));
      if (p.hops_to_leader > 1) {
        double d_lead = static_cast<double>(p.hops_to_leader) *
                            (p.gap_des + p.vehicle_length) +
                        p.lead_extra;
        a += -((ego.x - lead->x + d_lead) +
               p.consensus_gamma * (ego.v - lead->v));
      }
      break;
    }
    case ControllerKind::Flatbed:
      a = -p.k_v * (ego.v - pred->v) - p.k_vl * (ego.v - lead->v) +
          p.k_gap * (gap - p.gap_des_eff);
      break;
  }
  return clamp_accel(a, p.a_max);
}

VehicleState integrate_step(const VehicleState& s, double command, double dt,
                            double tau_act) {
  if (dt <= 0) throw ConfigError("integrate_step: dt must be > 0");
  if (!std::isfinite(s.x) || !std::isfinite(s.v) || !std::isfinite(s.a) ||
      !std::isfinite(command))
    throw NumericError("integrate_step: non-finite input");
  VehicleState n = s;
  n.v = std::max(0.0, s.v + s.a * dt);
  n.x = s.x + n.v * dt;
  n.a = command + (s.a - command) * std::exp(-dt / tau_act);
  return n;
}

namespace {

constexpr int kSubSteps = 10;  // dt_comms / dt_physics

struct Runner {
  const ScenarioSpec& spec;
  const ClaimHook& hook;
  int n;
  std::vector<VehicleState> states;
  std::vector<NeighborKinematics> latest;  // last transmitted claim per vehicle
  double claim_time = 0.0;                 // when `latest` was transmitted
  std::vector<int> order;                  // member ids, front to back
  std::vector<bool> aeb;
  int joiner = -1;
  bool opening = false, joined = false, exited = false;

  Runner(const ScenarioSpec& sp, const ClaimHook& h) : spec(sp), hook(h) {
    n = sp.n_vehicles;
    states.resize(static_cast<std::size_t>(n));
    latest.resize(static_cast<std::size_t>(n));
    aeb.assign(static_cast<std::size_t>(n), false);

    double v0 = sp.leader.speed_at(0.0);
    double base =
        desired_gap(sp.controller, sp.gains, v0) + sp.gains.vehicle_length;
    int members = sp.maneuver == Maneuver::Join ? n - 1 : n;
    for (int i = 0; i < members; ++i) {
      auto& s = states[static_cast<std::size_t>(i)];
      s.x = -base * i;
      s.v = v0;
      s.a = 0.0;
      s.lane = 0;
      s.member = true;
      order.push_back(i);
    }
    if (sp.maneuver == Maneuver::Join) {
      joiner = n - 1;
      auto& s = states[static_cast<std::size_t>(joiner)];
      // abeam the future slot, one gap behind vehicle join_slot-1
      s.x = states[static_cast<std::size_t>(sp.join_slot - 1)].x - base;
      s.v = v0;
      s.a = 0.0;
      s.lane = 1;
      s.member = false;
    }
    for (int i = 0; i < n; ++i) {
      const auto& s = states[static_cast<std::size_t>(i)];
      latest[static_cast<std::size_t>(i)] = {s.x, s.v, s.a};
    }
  }

  // receivers dead-reckon the held claim between CAMs
  NeighborKinematics claim_at(int vid, double t) const {
    const auto& c = latest[static_cast<std::size_t>(vid)];
    double dt = t - claim_time;
    if (dt <= 0.0) return c;
    NeighborKinematics out;
    out.a = c.a;
    out.v = std::max(0.0, c.v + c.a * dt);
    out.x = c.x + c.v * dt + 0.5 * c.a * dt * dt;
    return out;
  }

  int order_index(int vid) const {
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i] == vid) return static_cast<int>(i);
    return -1;
  }

  void maneuver_update(double t) {
    if (spec.maneuver == Maneuver::Exit && !exited && t >= spec.maneuver_time) {
      auto& s = states[static_cast<std::size_t>(spec.exit_vehicle)];
      s.lane = 1;
      s.member = false;
      order.erase(std::remove(order.begin(), order.end(), spec.exit_vehicle),
                  order.end());
      exited = true;
    }
    if (spec.maneuver == Maneuver::Join && !joined) {
      if (t >= spec.maneuver_time) opening = true;
      if (opening) {
        int ahead = order[static_cast<std::size_t>(spec.join_slot - 1)];
        int opener = order[static_cast<std::size_t>(spec.join_slot)];
        const auto& sa = states[static_cast<std::size_t>(ahead)];
        const auto& so = states[static_cast<std::size_t>(opener)];
        const auto& sj = states[static_cast<std::size_t>(joiner)];
        double base = desired_gap(spec.controller, spec.gains, so.v);
        double open_target = 2.0 * base + spec.gains.vehicle_length;
        double gap = sa.x - so.x - spec.gains.vehicle_length;
        double slot_x = sa.x - (base + spec.gains.vehicle_length);
        if (gap >= 0.97 * open_target && std::abs(sj.x - slot_x) <= 2.0 &&
            std::abs(sj.v - sa.v) <= 1.0) {
          auto& j = states[static_cast<std::size_t>(joiner)];
          j.lane = 0;
          j.member = true;
          order.insert(order.begin() + spec.join_slot, joiner);
          joined = true;
          opening = false;
        }
      }
    }
  }

  double command_for(int vid, double t) {
    const auto& ego = states[static_cast<std::size_t>(vid)];
    const auto& g = spec.gains;
    if (!ego.member) {
      if (vid == joiner && !joined) {
        // station-keeping abeam the slot, fed by received claims
        int ahead = order[static_cast<std::size_t>(spec.join_slot - 1)];
        NeighborKinematics ca = claim_at(ahead, t);
        double base = desired_gap(spec.controller, g, ego.v);
        double xt = ca.x - (base + g.vehicle_length);
        double a = 0.3 * (xt - ego.x) + 1.0 * (ca.v - ego.v);
        return clamp_accel(a, g.a_max);
      }
      // departed vehicle drifts back
      double a = 1.0 * ((spec.leader.speed_at(t) - 3.0) - ego.v);
      return clamp_accel(a, g.a_max);
    }
    int idx = order_index(vid);
    if (idx == 0) {  // leader tracks its profile
      double a = spec.leader.accel_at(t) +
                 1.0 * (spec.leader.speed_at(t) - ego.v);
      return clamp_accel(a, g.a_max);
    }
    int pred = order[static_cast<std::size_t>(idx - 1)];
    int lead = order[0];
    ControllerParams p = g;
    p.hops_to_leader = idx;
    p.gap_des_eff = desired_gap(spec.controller, p, ego.v);
    if (opening && !joined &&
        vid == order[static_cast<std::size_t>(spec.join_slot)]) {
      double base = p.gap_des_eff;
      p.gap_des_eff = 2.0 * base + p.vehicle_length;
      p.lead_extra = p.gap_des_eff - base;
    }
    NeighborKinematics pk = claim_at(pred, t);
    NeighborKinematics lk = claim_at(lead, t);
    double cmd = controller_accel(spec.controller, ego, &pk, &lk, p);
    bool is_opener = opening && !joined &&
                     vid == order[static_cast<std::size_t>(spec.join_slot)];
    if (is_opener) cmd = std::max(cmd, -1.5);  // comfort decel while opening

    if (!spec.aeb) return cmd;
    const auto& ps = states[static_cast<std::size_t>(pred)];
    double true_gap = ps.x - ego.x - g.vehicle_length;
    double closing = ego.v - ps.v;

    // proximity governor: whatever the claims say, do not accelerate into a
    // predecessor the radar puts inside 70% of the nominal gap
    double prox = 0.7 * desired_gap(spec.controller, g, ego.v);
    if (true_gap < prox)
      cmd = std::max(std::min(cmd, true_gap - prox), -g.a_max);

    // Radar emergency brake on true kinematics: engage when stopping-distance
    // arithmetic says CACC is about to be too late, with hysteresis on release.
    double margin = 0.4 + 0.08 * ego.v;
    bool danger = true_gap < 1.5;
    if (closing > 0 && true_gap < closing * closing / (2.0 * g.a_max) +
                                      0.3 * closing + margin)
      danger = true;
    if (ps.a < -0.5) {  // predecessor braking hard: compare stopping distances
      double bp = std::min(-ps.a, g.a_max);
      double s_ego = ego.v * ego.v / (2.0 * g.a_max);
      double s_pred = ps.v * ps.v / (2.0 * bp);
      if (s_ego + margin > true_gap + s_pred) danger = true;
    }
    bool on = aeb[static_cast<std::size_t>(vid)];
    if (!on && danger)
      on = true;
    else if (on && !danger && closing <= 0.0 && true_gap > 2.5)
      on = false;
    aeb[static_cast<std::size_t>(vid)] = on;
    if (on) return -g.a_max;
    return cmd;
  }

  void check_collisions(double t) const {
    for (std::size_t i = 1; i < order.size(); ++i) {
      const auto& front = states[static_cast<std::size_t>(order[i - 1])];
      const auto& rear = states[static_cast<std::size_t>(order[i])];
      if (front.x - rear.x - spec.gains.vehicle_length <= 0.0)
        throw CollisionError(order[i], order[i - 1], t);
    }
  }

  ScenarioRun run(bool tolerate_collision) {
    ScenarioRun result;
    Trace& tr = result.trace;
    tr.spec = spec;
    tr.n_vehicles = n;
    tr.n_steps = static_cast<int>(std::llround(spec.duration / kDtComms));
    tr.cells.resize(static_cast<std::size_t>(tr.n_steps) * n);

    for (int step = 0; step < tr.n_steps; ++step) {
      double t = step * kDtComms;
      maneuver_update(t);
      for (int vid = 0; vid < n; ++vid) {
        const auto& s = states[static_cast<std::size_t>(vid)];
        NeighborKinematics honest{s.x, s.v, s.a};
        latest[static_cast<std::size_t>(vid)] =
            hook ? hook(vid, t, honest) : honest;
      }
      claim_time = t;
      std::vector<double> cmds(static_cast<std::size_t>(n));
      for (int vid = 0; vid < n; ++vid)
        cmds[static_cast<std::size_t>(vid)] = command_for(vid, t);

      for (int vid = 0; vid < n; ++vid) {
        StepRecord& rec = tr.at(step, vid);
        const auto& s = states[static_cast<std::size_t>(vid)];
        rec.truth = s;
        rec.member = s.member;
        rec.cmd = s.member ? cmds[static_cast<std::size_t>(vid)] : 0.0;
        const auto& c = latest[static_cast<std::size_t>(vid)];
        rec.claimed_x = c.x;
        rec.claimed_v = c.v;
        rec.claimed_a = c.a;
        if (s.member) {
          int idx = order_index(vid);
          if (idx > 0) {
            const auto& ps =
                states[static_cast<std::size_t>(order[static_cast<std::size_t>(idx - 1)])];
            rec.sensor_gap = ps.x - s.x - spec.gains.vehicle_length;
          }
          rec.sensor_speed = s.v;
          rec.sensor_accel = s.a;
        }
      }

      try {
        for (int sub = 0; sub < kSubSteps; ++sub) {
          double tp = t + sub * kDtPhysics;
          if (sub > 0)
            for (int vid = 0; vid < n; ++vid)
              cmds[static_cast<std::size_t>(vid)] = command_for(vid, tp);
          for (int vid = 0; vid < n; ++vid) {
            double tau = aeb[static_cast<std::size_t>(vid)] ? 0.1 : spec.tau_act;
            states[static_cast<std::size_t>(vid)] =
                integrate_step(states[static_cast<std::size_t>(vid)],
                               cmds[static_cast<std::size_t>(vid)], kDtPhysics,
                               tau);
          }
          check_collisions(tp + kDtPhysics);
        }
      } catch (const CollisionError& e) {
        if (!tolerate_collision) throw;
        // keep the steps recorded so far; the current one predates the crash
        tr.n_steps = step + 1;
        tr.cells.resize(static_cast<std::size_t>(tr.n_steps) * n);
        result.collided = true;
        result.collision_time = e.time;
        result.rear_vehicle = e.rear_vehicle;
        result.front_vehicle = e.front_vehicle;
        return result;
      }
    }
    return result;
  }
};

}  // namespace

Trace run_scenario(const ScenarioSpec& spec, const ClaimHook& hook) {
  spec.validate();
  Runner r(spec, hook);
  return std::move(r.run(false).trace);
}

ScenarioRun run_scenario_tolerant(const ScenarioSpec& spec,
                                  const ClaimHook& hook) {
  spec.validate();
  Runner r(spec, hook);
  return r.run(true);
}

Trace apply_sensor_noise(const Trace& trace, const SensorNoiseSpec& noise,
                         std::uint64_t seed) {
  noise.validate();
  Trace out = trace;
  Rng rng(seed);
  for (int step = 0; step < out.n_steps; ++step) {
    for (int vid = 0; vid < out.n_vehicles; ++vid) {
      double zg = rng.normal(), zv = rng.normal(), za = rng.normal();
      StepRecord& rec = out.at(step, vid);
      if (!rec.member) continue;
      if (vid != 0) rec.sensor_gap += noise.sigma_pos * zg;
      rec.sensor_speed += noise.sigma_speed * zv;
      rec.sensor_accel += noise.sigma_accel * za;
    }
  }
  return out;
}

// --- serialization ---------------------------------------------------------

std::string ScenarioSpec::to_json() const {
  json j;
  j["controller"] = sim::to_string(controller);
  j["n_vehicles"] = n_vehicles;
  j["maneuver"] = sim::to_string(maneuver);
  j["maneuver_time"] = maneuver_time;
  j["duration"] = duration;
  json pts = json::array();
  for (auto& [t, v] : leader.points) pts.push_back({t, v});
  j["leader"] = {{"points", pts},
                 {"sine_amp", leader.sine_amp},
                 {"sine_period", leader.sine_period},
                 {"sine_phase", leader.sine_phase}};
  j["seed"] = seed;
  j["noise"] = {{"sigma_pos", noise.sigma_pos},
                {"sigma_speed", noise.sigma_speed},
                {"sigma_accel", noise.sigma_accel}};
  j["gains"] = {{"k_a", gains.k_a},
                {"k_l", gains.k_l},
                {"k_v", gains.k_v},
                {"k_vl", gains.k_vl},
                {"k_gap", gains.k_gap},
                {"gap_des", gains.gap_des},
                {"ploeg_h", gains.ploeg_h},
                {"ploeg_r", gains.ploeg_r},
                {"ploeg_kp", gains.ploeg_kp},
                {"ploeg_kd", gains.ploeg_kd},
                {"consensus_gamma", gains.consensus_gamma},
                {"a_max", gains.a_max},
                {"vehicle_length", gains.vehicle_length}};
  j["tau_act"] = tau_act;
  j["aeb"] = aeb;
  j["join_slot"] = join_slot;
  j["exit_vehicle"] = exit_vehicle;
  return j.dump();
}

ScenarioSpec ScenarioSpec::from_json(const std::string& s) {
  json j = json::parse(s);
  ScenarioSpec sp;
  sp.controller = controller_from_string(j.at("controller").get<std::string>());
  sp.n_vehicles = j.at("n_vehicles").get<int>();
  sp.maneuver = maneuver_from_string(j.at("maneuver").get<std::string>());
  sp.maneuver_time = j.at("maneuver_time").get<double>();
  sp.duration = j.at("duration").get<double>();
  sp.leader.points.clear();
  for (auto& p : j.at("leader").at("points"))
    sp.leader.points.emplace_back(p[0].get<double>(), p[1].get<double>());
  sp.leader.sine_amp = j.at("leader").at("sine_amp").get<double>();
  sp.leader.sine_period = j.at("leader").at("sine_period").get<double>();
  sp.leader.sine_phase = j.at("leader").at("sine_phase").get<double>();
  sp.seed = j.at("seed").get<std::uint64_t>();
  sp.noise.sigma_pos = j.at("noise").at("sigma_pos").get<double>();
  sp.noise.sigma_speed = j.at("noise").at("sigma_speed").get<double>();
  sp.noise.sigma_accel = j.at("noise").at("sigma_accel").get<double>();
  auto& g = j.at("gains");
  sp.gains.k_a = g.at("k_a").get<double>();
  sp.gains.k_l = g.at("k_l").get<double>();
  sp.gains.k_v = g.at("k_v").get<double>();
  sp.gains.k_vl = g.at("k_vl").get<double>();
  sp.gains.k_gap = g.at("k_gap").get<double>();
  sp.gains.gap_des = g.at("gap_des").get<double>();
  sp.gains.ploeg_h = g.at("ploeg_h").get<double>();
  sp.gains.ploeg_r = g.at("ploeg_r").get<double>();
  sp.gains.ploeg_kp = g.at("ploeg_kp").get<double>();
  sp.gains.ploeg_kd = g.at("ploeg_kd").get<double>();
  sp.gains.consensus_gamma = g.at("consensus_gamma").get<double>();
  sp.gains.a_max = g.at("a_max").get<double>();
  sp.gains.vehicle_length = g.at("vehicle_length").get<double>();
  sp.tau_act = j.at("tau_act").get<double>();
  sp.aeb = j.at("aeb").get<bool>();
  sp.join_slot = j.at("join_slot").get<int>();
  sp.exit_vehicle = j.at("exit_vehicle").get<int>();
  return sp;
}

std::string Trace::to_jsonl(bool with_claims) const {
  std::string out;
  for (int step = 0; step < n_steps; ++step) {
    for (int vid = 0; vid < n_vehicles; ++vid) {
      const StepRecord& r = at(step, vid);
      json j;
      j["t"] = time_of(step);
      j["vid"] = vid;
      j["true"] = {{"x", r.truth.x},
                   {"v", r.truth.v},
                   {"a", r.truth.a},
                   {"lane", r.truth.lane}};
      j["sensor"] = {{"gap", r.sensor_gap},
                     {"v", r.sensor_speed},
                     {"a", r.sensor_accel}};
      j["cmd"] = r.cmd;
      j["member"] = r.member ? 1 : 0;
      if (with_claims)
        j["claimed"] = {{"x", r.claimed_x}, {"v", r.claimed_v}, {"a", r.claimed_a}};
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

std::vector<unsigned char> Trace::to_binary() const {
  io::ByteWriter w;
  w.magic("PWTR");
  w.u32(1);
  w.str(spec.to_json());
  w.u32(static_cast<std::uint32_t>(n_steps));
  w.u32(static_cast<std::uint32_t>(n_vehicles));
  for (const auto& r : cells) {
    w.f64(r.truth.x);
    w.f64(r.truth.v);
    w.f64(r.truth.a);
    w.f64(static_cast<double>(r.truth.lane));
    w.f64(r.member ? 1.0 : 0.0);
    w.f64(r.sensor_gap);
    w.f64(r.sensor_speed);
    w.f64(r.sensor_accel);
    w.f64(r.cmd);
    w.f64(r.claimed_x);
    w.f64(r.claimed_v);
    w.f64(r.claimed_a);
  }
  std::vector<unsigned char> out = w.bytes();
  std::uint64_t h = io::fnv1a(out.data(), out.size());
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<unsigned char>((h >> (8 * i)) & 0xff));
  return out;
}

Trace Trace::from_binary(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw IoError("trace: truncated");
  std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (stored != io::fnv1a(bytes.data(), body))
    throw IoError("trace: checksum failure");
  io::ByteReader r(bytes.data(), body);
  r.expect_magic("PWTR", "trace");
  if (r.u32() != 1) throw IoError("trace: unsupported version");
  Trace tr;
  tr.spec = ScenarioSpec::from_json(r.str());
  tr.n_steps = static_cast<int>(r.u32());
  tr.n_vehicles = static_cast<int>(r.u32());
  tr.cells.resize(static_cast<std::size_t>(tr.n_steps) * tr.n_vehicles);
  for (auto& rec : tr.cells) {
    rec.truth.x = r.f64();
    rec.truth.v = r.f64();
    rec.truth.a = r.f64();
    rec.truth.lane = static_cast<int>(r.f64());
    rec.member = r.f64() != 0.0;
    rec.truth.member = rec.member;
    rec.sensor_gap = r.f64();
    rec.sensor_speed = r.f64();
    rec.sensor_accel = r.f64();
    rec.cmd = r.f64();
    rec.claimed_x = r.f64();
    rec.claimed_v = r.f64();
    rec.claimed_a = r.f64();
  }
  return tr;
}

std::uint64_t Trace::content_hash() const {
  auto b = to_binary();
  return io::fnv1a(b.data(), b.size());
}

}  // namespace pw::sim
