#pragma once

#include <optional>
#include <string>
#include <vector>

#include "platoonwatch/sim.hpp"

namespace pw::attack {

enum class Strategy { ConstantOffset, GradualDrift, CombinedConsistent };
enum class TargetField { Position, Speed, Accel };

const char* to_string(Strategy s);
const char* to_string(TargetField f);
Strategy strategy_from_string(const std::string& s);
TargetField field_from_string(const std::string& s);

struct AttackSpec {
  Strategy strategy = Strategy::ConstantOffset;
  // Ignored for CombinedConsistent, which falsifies speed and position
  // jointly (speed offset, position integrated from it).
  TargetField field = TargetField::Position;
  double magnitude = 20.0;  // offset for Constant, rate per second for Gradual
  int attacker = 0;         // 0 (leader) or 2 (just ahead of the maneuver slot)
  double start_time = 10.0;
  double end_time = 20.0;

  void validate(const sim::ScenarioSpec& scenario) const;
  bool active_at(double t) const {
    return t >= start_time - 1e-9 && t < end_time - 1e-9;
  }
  std::string to_json() const;
  static AttackSpec from_json(const std::string& s);
  std::string short_name() const;
};

struct CamRecord {
  double t = 0.0;
  int sender = 0;
  double claimed_x = 0.0, claimed_v = 0.0, claimed_a = 0.0;
};

// Integration state for the physics-consistent strategy: claimed position is
// the trapezoidal integral of claimed speed on the CAM grid, anchored at the
// first falsified record, so claimed (x,v,a) stay kinematically coherent.
struct FalsifyState {
  bool active = false;
  double prev_t = 0.0, prev_cv = 0.0, cx = 0.0;
};

// Falsifies one CAM. Outside the attack window the record passes through
// unchanged and the integration state resets.
CamRecord falsify_record(const CamRecord& rec, const AttackSpec& spec,
                         FalsifyState& state);

// Per-(vehicle, timestep) ground truth. y=1 iff the attack is active and the
// vehicle is a member; m=1 iff the vehicle is a member.
struct LabelGrid {
  int n_steps = 0, n_vehicles = 0;
  std::vector<std::uint8_t> y, m;  // [step][vehicle]

  std::uint8_t& yat(int s, int v) { return y[static_cast<std::size_t>(s) * n_vehicles + v]; }
  std::uint8_t yat(int s, int v) const { return y[static_cast<std::size_t>(s) * n_vehicles + v]; }
  std::uint8_t& mat(int s, int v) { return m[static_cast<std::size_t>(s) * n_vehicles + v]; }
  std::uint8_t mat(int s, int v) const { return m[static_cast<std::size_t>(s) * n_vehicles + v]; }

  std::vector<unsigned char> to_binary() const;  // packed bitfields, "PWLG"
  static LabelGrid from_binary(const std::vector<unsigned char>& bytes);
};

struct AttackedRun {
  sim::Trace trace;  // closed-loop re-simulation with falsified claims
  LabelGrid labels;
  // set when the attack drove the platoon into a crash; the trace then ends
  // at the last pre-collision comm step
  bool collided = false;
  double collision_time = 0.0;
};

// Re-simulates the scenario with the attacker's CAMs falsified in-window, so
// the rest of the platoon reacts to the false data. The benign trace supplies
// the spec and the membership baseline for validation.
AttackedRun apply_attack(const sim::Trace& benign, const AttackSpec& spec);

// Labels for a run with no attack.
LabelGrid benign_labels(const sim::Trace& trace);

// --- experiment grid ---------------------------------------------------

struct RunEntry {
  std::string id;
  sim::ScenarioSpec scenario;
  std::optional<AttackSpec> attack;
};

// The paper-style roster: {constant, drift} x {position, speed, accel} plus
// three physics-consistent variants; attacker alternates leader / vehicle 2;
// window [duration/3, 2*duration/3].
std::vector<AttackSpec> default_attack_roster(double duration);

// Cartesian product of controllers x maneuvers x (attacks + benign) x seeds.
// Each run gets a derived seed; the leader profile phase and base speed are
// jittered per seed so distinct runs exercise distinct dynamics.
// benign_per_seed controls how many benign runs accompany each attack set
// (the knob that places the dataset's attack ratio).
std::vector<RunEntry> scenario_matrix(
    const std::vector<sim::ControllerKind>& controllers,
    const std::vector<sim::Maneuver>& maneuvers,
    const std::vector<AttackSpec>& attacks,
    const std::vector<std::uint64_t>& seeds, const sim::ScenarioSpec& base,
    int benign_per_seed = 1);

// Attacked-stream interchange: an attack header line (null for benign runs)
// followed by the trace rows with claims.
std::string attacked_stream_jsonl(const sim::Trace& trace,
                                  const std::optional<AttackSpec>& spec);

}  // namespace pw::attack
