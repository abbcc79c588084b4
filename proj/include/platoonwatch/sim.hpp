#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "platoonwatch/common.hpp"

namespace pw::sim {

struct VehicleState {
  double x = 0.0;     // m along road
  double v = 0.0;     // m/s
  double a = 0.0;     // m/s^2, actual (post actuator lag)
  int lane = 0;       // 0 = platoon lane, 1 = adjacent
  bool member = false;
};

enum class ControllerKind { Path, Ploeg, Consensus, Flatbed };
const char* to_string(ControllerKind k);
ControllerKind controller_from_string(const std::string& s);

enum class Maneuver { Join, Exit, Steady };
const char* to_string(Maneuver m);
Maneuver maneuver_from_string(const std::string& s);

// Kinematics of a neighbor as the controller sees them (CAM claims under
// attack, truth otherwise).
struct NeighborKinematics {
  double x = 0.0, v = 0.0, a = 0.0;
};

struct ControllerParams {
  // PATH / Flatbed (constant-spacing) gains
  double k_a = 0.6, k_l = 0.2, k_v = 0.6, k_vl = 0.2, k_gap = 0.45;
  double gap_des = 5.0;  // bumper-to-bumper, m
  // Ploeg (constant time headway)
  double ploeg_h = 0.5;   // s
  double ploeg_r = 2.0;   // standstill gap, m
  double ploeg_kp = 0.2, ploeg_kd = 0.7;
  // Consensus
  double consensus_gamma = 2.0;
  double a_max = 4.0;
  double vehicle_length = 4.0;
  // situational: desired bumper gap for this vehicle at this instant (the
  // maneuver logic widens it while a slot opens) and hops to the leader;
  // lead_extra widens the leader-anchored spacing for controllers that hold
  // an absolute slot (consensus) while a gap opens
  double gap_des_eff = 5.0;
  double lead_extra = 0.0;
  int hops_to_leader = 1;
};

// Commanded acceleration for a follower. `pred`/`lead` are required for
// every kind; passing nullptr is a configuration error. Returns a value
// clamped to [-a_max, a_max]; exactly 0 at the controller's equilibrium.
double controller_accel(ControllerKind kind, const VehicleState& ego,
                        const NeighborKinematics* pred,
                        const NeighborKinematics* lead,
                        const ControllerParams& p);

// Equilibrium desired bumper gap for a controller at speed v.
double desired_gap(ControllerKind kind, const ControllerParams& p, double v);

// Semi-implicit Euler with first-order actuator lag:
// v' = max(0, v + a dt); x' = x + v' dt; a' = cmd + (a - cmd) e^(-dt/tau).
VehicleState integrate_step(const VehicleState& s, double command, double dt,
                            double tau_act);

struct SensorNoiseSpec {
  double sigma_pos = 0.1;     // radar gap, m
  double sigma_speed = 0.05;  // m/s
  double sigma_accel = 0.01;  // m/s^2
  void validate() const;
};

struct LeaderProfile {
  // piecewise-linear speed schedule plus an optional sinusoid
  std::vector<std::pair<double, double>> points{{0.0, 25.0}};  // (t, v)
  double sine_amp = 1.0;
  double sine_period = 30.0;
  double sine_phase = 0.0;  // rad

  double speed_at(double t) const;
  double accel_at(double t) const;
};

struct ScenarioSpec {
  ControllerKind controller = ControllerKind::Path;
  int n_vehicles = 7;  // leader C0 plus followers C1..C6
  Maneuver maneuver = Maneuver::Steady;
  double maneuver_time = 10.0;  // s
  double duration = 30.0;       // s
  LeaderProfile leader;
  std::uint64_t seed = 0;
  SensorNoiseSpec noise;
  ControllerParams gains;
  double tau_act = 0.5;  // actuator lag, s
  bool aeb = true;       // radar emergency brake override
  int join_slot = 3;     // joiner's platoon position after a join
  int exit_vehicle = 3;  // id of the departing vehicle

  void validate() const;
  std::string to_json() const;
  static ScenarioSpec from_json(const std::string& s);
};

// One (comm step, vehicle) cell of a trace.
struct StepRecord {
  VehicleState truth;
  double sensor_gap = 0.0;    // radar, bumper-to-bumper
  double sensor_speed = 0.0;  // ego odometry
  double sensor_accel = 0.0;  // ego IMU
  double cmd = 0.0;           // commanded acceleration
  bool member = false;
  double claimed_x = 0.0, claimed_v = 0.0, claimed_a = 0.0;  // transmitted CAM
};

struct Trace {
  ScenarioSpec spec;
  int n_steps = 0;     // comm steps (10 Hz)
  int n_vehicles = 0;
  std::vector<StepRecord> cells;  // [step][vehicle]

  StepRecord& at(int step, int vid) {
    return cells[static_cast<std::size_t>(step) * n_vehicles + vid];
  }
  const StepRecord& at(int step, int vid) const {
    return cells[static_cast<std::size_t>(step) * n_vehicles + vid];
  }
  double time_of(int step) const { return step * kDtComms; }
  bool member(int step, int vid) const { return at(step, vid).member; }

  std::string to_jsonl(bool with_claims = false) const;
  std::vector<unsigned char> to_binary() const;  // PWTR
  static Trace from_binary(const std::vector<unsigned char>& bytes);
  std::uint64_t content_hash() const;
};

struct CollisionError : Error {
  CollisionError(int rear, int front, double t)
      : Error("collision between vehicle " + std::to_string(rear) +
              " and vehicle " + std::to_string(front) + " at t=" +
              std::to_string(t) + " s"),
        rear_vehicle(rear),
        front_vehicle(front),
        time(t) {}
  int rear_vehicle, front_vehicle;
  double time;
};

// Falsification hook: given the sender, comm time, and honest claim, returns
// the transmitted claim. Used by the attack module; the benign path passes
// nothing.
using ClaimHook = std::function<NeighborKinematics(
    int vid, double t, const NeighborKinematics& honest)>;

// Deterministic closed-loop run. Controllers consume the latest transmitted
// claims (dead-reckoned between 10 Hz CAMs); radar safety overrides (a
// proximity governor and an emergency brake) protect against hostile claims.
// Sensor channels here are noiseless; apply_sensor_noise adds measurement
// error afterwards. Throws CollisionError if members touch.
Trace run_scenario(const ScenarioSpec& spec, const ClaimHook& hook = nullptr);

// Some attacks are violent enough that no safety layer can absorb them at
// platoon spacing. This variant keeps the comm steps recorded before the
// collision instead of throwing; the dataset keeps the pre-crash data.
struct ScenarioRun {
  Trace trace;
  bool collided = false;
  double collision_time = 0.0;
  int rear_vehicle = -1, front_vehicle = -1;
};
ScenarioRun run_scenario_tolerant(const ScenarioSpec& spec,
                                  const ClaimHook& hook = nullptr);

// Gaussian noise on the ego sensor channels of member rows; truth untouched.
Trace apply_sensor_noise(const Trace& trace, const SensorNoiseSpec& noise,
                         std::uint64_t seed);

}  // namespace pw::sim
