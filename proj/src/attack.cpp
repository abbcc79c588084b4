#include "platoonwatch/attack.hpp"

#include <cmath>
#include <json.hpp>

#include "platoonwatch/io.hpp"
#include "platoonwatch/rng.hpp"

namespace pw::attack {

using nlohmann::json;

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::ConstantOffset: return "constant";
    case Strategy::GradualDrift: return "gradual";
    case Strategy::CombinedConsistent: return "combined";
  }
  return "?";
}

const char* to_string(TargetField f) {
  switch (f) {
    case TargetField::Position: return "position";
    case TargetField::Speed: return "speed";
    case TargetField::Accel: return "accel";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "constant") return Strategy::ConstantOffset;
  if (s == "gradual") return Strategy::GradualDrift;
  if (s == "combined") return Strategy::CombinedConsistent;
  throw ConfigError("unknown attack strategy: " + s);
}

TargetField field_from_string(const std::string& s) {
  if (s == "position") return TargetField::Position;
  if (s == "speed") return TargetField::Speed;
  if (s == "accel") return TargetField::Accel;
  throw ConfigError("unknown attack field: " + s);
}

void AttackSpec::validate(const sim::ScenarioSpec& scenario) const {
  if (!(start_time < end_time) || end_time > scenario.duration + 1e-9)
    throw ConfigError("attack: need start_time < end_time <= duration");
  if (attacker != 0 && attacker != 2)
    throw ConfigError("attack: attacker must be 0 (leader) or 2, got " +
                      std::to_string(attacker));
  if (attacker >= scenario.n_vehicles)
    throw ConfigError("attack: attacker index out of range");
}

std::string AttackSpec::to_json() const {
  json j;
  j["strategy"] = attack::to_string(strategy);
  j["field"] = attack::to_string(field);
  j["magnitude"] = magnitude;
  j["attacker"] = attacker;
  j["start"] = start_time;
  j["end"] = end_time;
  return j.dump();
}

AttackSpec AttackSpec::from_json(const std::string& s) {
  json j = json::parse(s);
  AttackSpec a;
  a.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  a.field = field_from_string(j.at("field").get<std::string>());
  a.magnitude = j.at("magnitude").get<double>();
  a.attacker = j.at("attacker").get<int>();
  a.start_time = j.at("start").get<double>();
  a.end_time = j.at("end").get<double>();
  return a;
}

std::string AttackSpec::short_name() const {
  std::string s = attack::to_string(strategy);
  if (strategy != Strategy::CombinedConsistent) {
    s += "_";
    s += attack::to_string(field);
  } else {
    s += (magnitude >= 0 ? "_p" : "_m") +
         std::to_string(static_cast<int>(std::round(std::abs(magnitude) * 10)));
  }
  s += "_a" + std::to_string(attacker);
  return s;
}

CamRecord falsify_record(const CamRecord& rec, const AttackSpec& spec,
                         FalsifyState& st) {
  if (rec.sender != spec.attacker) return rec;
  if (!spec.active_at(rec.t)) {
    st.active = false;
    return rec;
  }
  CamRecord out = rec;
  switch (spec.strategy) {
    case Strategy::ConstantOffset:
      switch (spec.field) {
        case TargetField::Position: out.claimed_x += spec.magnitude; break;
        case TargetField::Speed: out.claimed_v += spec.magnitude; break;
        case TargetField::Accel: out.claimed_a += spec.magnitude; break;
      }
      break;
    case Strategy::GradualDrift: {
      double drift = spec.magnitude * (rec.t - spec.start_time);
      switch (spec.field) {
        case TargetField::Position: out.claimed_x += drift; break;
        case TargetField::Speed: out.claimed_v += drift; break;
        case TargetField::Accel: out.claimed_a += drift; break;
      }
      break;
    }
    case Strategy::CombinedConsistent: {
      double cv = rec.claimed_v + spec.magnitude;
      if (!st.active) {
        st.active = true;
        st.cx = rec.claimed_x;  // anchored at the first falsified CAM
      } else {
        st.cx += 0.5 * (rec.t - st.prev_t) * (st.prev_cv + cv);
      }
      st.prev_t = rec.t;
      st.prev_cv = cv;
      out.claimed_x = st.cx;
      out.claimed_v = cv;
      // claimed_a stays the true acceleration: d(claimed_v)/dt = true_a
      break;
    }
  }
  return out;
}

std::vector<unsigned char> LabelGrid::to_binary() const {
  io::ByteWriter w;
  w.magic("PWLG");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(n_steps));
  w.u32(static_cast<std::uint32_t>(n_vehicles));
  auto pack = [&](const std::vector<std::uint8_t>& bits) {
    std::uint8_t cur = 0;
    int fill = 0;
    for (std::uint8_t b : bits) {
      cur |= static_cast<std::uint8_t>((b ? 1 : 0) << fill);
      if (++fill == 8) {
        w.u8(cur);
        cur = 0;
        fill = 0;
      }
    }
    if (fill) w.u8(cur);
  };
  pack(y);
  pack(m);
  std::vector<unsigned char> out = w.bytes();
  std::uint64_t h = io::fnv1a(out.data(), out.size());
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<unsigned char>((h >> (8 * i)) & 0xff));
  return out;
}

LabelGrid LabelGrid::from_binary(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw IoError("labels: truncated");
  std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (stored != io::fnv1a(bytes.data(), body))
    throw IoError("labels: checksum failure");
  io::ByteReader r(bytes.data(), body);
  r.expect_magic("PWLG", "labels");
  if (r.u32() != 1) throw IoError("labels: unsupported version");
  LabelGrid g;
  g.n_steps = static_cast<int>(r.u32());
  g.n_vehicles = static_cast<int>(r.u32());
  std::size_t count = static_cast<std::size_t>(g.n_steps) * g.n_vehicles;
  auto unpack = [&](std::vector<std::uint8_t>& bits) {
    bits.assign(count, 0);
    std::uint8_t cur = 0;
    int fill = 8;
    for (std::size_t i = 0; i < count; ++i) {
      if (fill == 8) {
        cur = r.u8();
        fill = 0;
      }
      bits[i] = (cur >> fill) & 1;
      fill++;
    }
  };
  unpack(g.y);
  unpack(g.m);
  return g;
}

LabelGrid benign_labels(const sim::Trace& trace) {
  LabelGrid g;
  g.n_steps = trace.n_steps;
  g.n_vehicles = trace.n_vehicles;
  std::size_t count = static_cast<std::size_t>(g.n_steps) * g.n_vehicles;
  g.y.assign(count, 0);
  g.m.assign(count, 0);
  for (int s = 0; s < g.n_steps; ++s)
    for (int v = 0; v < g.n_vehicles; ++v)
      g.mat(s, v) = trace.member(s, v) ? 1 : 0;
  return g;
}

AttackedRun apply_attack(const sim::Trace& benign, const AttackSpec& spec) {
  spec.validate(benign.spec);
  // the attacker must be a member over the whole window
  for (int s = 0; s < benign.n_steps; ++s) {
    double t = benign.time_of(s);
    if (spec.active_at(t) && !benign.member(s, spec.attacker))
      throw ConfigError("attack: attacker " + std::to_string(spec.attacker) +
                        " is not a platoon member at t=" + std::to_string(t));
  }

  FalsifyState st;
  sim::ClaimHook hook = [&](int vid, double t,
                            const sim::NeighborKinematics& honest) {
    CamRecord rec{t, vid, honest.x, honest.v, honest.a};
    CamRecord out = falsify_record(rec, spec, st);
    return sim::NeighborKinematics{out.claimed_x, out.claimed_v, out.claimed_a};
  };

  AttackedRun run;
  sim::ScenarioRun sr = sim::run_scenario_tolerant(benign.spec, hook);
  run.trace = std::move(sr.trace);
  run.collided = sr.collided;
  run.collision_time = sr.collision_time;
  run.labels = benign_labels(run.trace);
  for (int s = 0; s < run.trace.n_steps; ++s) {
    double t = run.trace.time_of(s);
    if (!spec.active_at(t)) continue;
    for (int v = 0; v < run.trace.n_vehicles; ++v)
      if (run.labels.mat(s, v)) run.labels.yat(s, v) = 1;
  }
  return run;
}

std::vector<AttackSpec> default_attack_roster(double duration) {
  double start = duration / 3.0, end = 2.0 * duration / 3.0;
  auto mk = [&](Strategy s, TargetField f, double mag, int attacker) {
    AttackSpec a;
    a.strategy = s;
    a.field = f;
    a.magnitude = mag;
    a.attacker = attacker;
    a.start_time = start;
    a.end_time = end;
    return a;
  };
  return {
      mk(Strategy::ConstantOffset, TargetField::Position, 20.0, 0),
      mk(Strategy::ConstantOffset, TargetField::Speed, 5.0, 2),
      mk(Strategy::ConstantOffset, TargetField::Accel, 1.5, 0),
      mk(Strategy::GradualDrift, TargetField::Position, 2.0, 2),
      mk(Strategy::GradualDrift, TargetField::Speed, 0.5, 0),
      mk(Strategy::GradualDrift, TargetField::Accel, 0.2, 2),
      mk(Strategy::CombinedConsistent, TargetField::Speed, 3.0, 0),
      mk(Strategy::CombinedConsistent, TargetField::Speed, -3.0, 2),
      mk(Strategy::CombinedConsistent, TargetField::Speed, 1.5, 0),
  };
}

std::vector<RunEntry> scenario_matrix(
    const std::vector<sim::ControllerKind>& controllers,
    const std::vector<sim::Maneuver>& maneuvers,
    const std::vector<AttackSpec>& attacks,
    const std::vector<std::uint64_t>& seeds, const sim::ScenarioSpec& base,
    int benign_per_seed) {
  if (controllers.empty() || maneuvers.empty() || seeds.empty())
    throw ConfigError("scenario_matrix: empty controller/maneuver/seed list");
  if (benign_per_seed < 0)
    throw ConfigError("scenario_matrix: benign_per_seed must be >= 0");
  if (attacks.empty() && benign_per_seed == 0)
    throw ConfigError("scenario_matrix: empty product");

  std::vector<RunEntry> out;
  std::uint64_t run_index = 0;
  for (auto c : controllers) {
    for (auto m : maneuvers) {
      for (auto s : seeds) {
        auto make_scenario = [&](std::uint64_t salt) {
          sim::ScenarioSpec sp = base;
          sp.controller = c;
          sp.maneuver = m;
          sp.seed = mix_seed(s, salt);
          // per-run dynamics jitter so distinct seeds give distinct traffic
          Rng r(sp.seed);
          sp.leader.sine_phase = r.uniform(0.0, 2.0 * M_PI);
          if (!sp.leader.points.empty()) {
            double dv = r.uniform(-2.0, 2.0);
            for (auto& p : sp.leader.points) p.second += dv;
          }
          return sp;
        };
        std::uint64_t salt = 0;
        for (const auto& a : attacks) {
          RunEntry e;
          e.scenario = make_scenario(mix_seed(run_index, salt++));
          e.attack = a;
          e.id = std::string(sim::to_string(c)) + "_" + sim::to_string(m) +
                 "_" + a.short_name() + "_s" + std::to_string(s);
          out.push_back(std::move(e));
        }
        for (int b = 0; b < benign_per_seed; ++b) {
          RunEntry e;
          e.scenario = make_scenario(mix_seed(run_index, salt++));
          e.attack = std::nullopt;
          e.id = std::string(sim::to_string(c)) + "_" + sim::to_string(m) +
                 "_benign" + std::to_string(b) + "_s" + std::to_string(s);
          out.push_back(std::move(e));
        }
        run_index++;
      }
    }
  }
  return out;
}

std::string attacked_stream_jsonl(const sim::Trace& trace,
                                  const std::optional<AttackSpec>& spec) {
  json header;
  if (spec) {
    header["attack"] = {{"strategy", attack::to_string(spec->strategy)},
                        {"field", attack::to_string(spec->field)},
                        {"magnitude", spec->magnitude},
                        {"start", spec->start_time},
                        {"end", spec->end_time},
                        {"attacker", spec->attacker}};
  } else {
    header["attack"] = nullptr;
  }
  return header.dump() + "\n" + trace.to_jsonl(/*with_claims=*/true);
}

}  // namespace pw::attack
