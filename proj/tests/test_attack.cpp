#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "platoonwatch/attack.hpp"

using namespace pw;
using namespace pw::attack;

namespace {

sim::ScenarioSpec steady_spec(double duration = 30.0) {
  sim::ScenarioSpec sp;
  sp.controller = sim::ControllerKind::Path;
  sp.maneuver = sim::Maneuver::Steady;
  sp.duration = duration;
  sp.maneuver_time = duration / 3.0;
  return sp;
}

AttackSpec make_attack(Strategy s, TargetField f, double mag, int attacker,
                       double start, double end) {
  AttackSpec a;
  a.strategy = s;
  a.field = f;
  a.magnitude = mag;
  a.attacker = attacker;
  a.start_time = start;
  a.end_time = end;
  return a;
}

}  // namespace

TEST_CASE("falsify_record: constant and gradual offsets") {
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Position,
                             20.0, 0, 10.0, 20.0);
  FalsifyState st;
  CamRecord rec{12.0, 0, 100.0, 25.0, 0.5};
  CamRecord out = falsify_record(rec, a, st);
  CHECK(out.claimed_x == 120.0);
  CHECK(out.claimed_v == 25.0);

  // outside the window: unchanged
  CamRecord rec2{22.0, 0, 100.0, 25.0, 0.5};
  CamRecord out2 = falsify_record(rec2, a, st);
  CHECK(out2.claimed_x == 100.0);

  // wrong sender: unchanged
  CamRecord rec3{12.0, 3, 100.0, 25.0, 0.5};
  CHECK(falsify_record(rec3, a, st).claimed_x == 100.0);

  AttackSpec g = make_attack(Strategy::GradualDrift, TargetField::Speed, 0.5, 0,
                             10.0, 20.0);
  FalsifyState st2;
  CamRecord rec4{14.0, 0, 100.0, 25.0, 0.5};
  CHECK(falsify_record(rec4, g, st2).claimed_v == doctest::Approx(27.0));
}

TEST_CASE("combined-consistent claims integrate exactly on the CAM grid") {
  sim::ScenarioSpec sp = steady_spec(30.0);
  sim::Trace benign = sim::run_scenario(sp);
  AttackSpec a = make_attack(Strategy::CombinedConsistent, TargetField::Speed,
                             3.0, 0, 10.0, 20.0);
  AttackedRun run = apply_attack(benign, a);

  // over the attacked window, delta claimed_x == trapezoid of claimed_v
  int s0 = 100, s1 = 199;  // [10.0 .. 19.9)
  const auto& tr = run.trace;
  double integral = 0.0;
  for (int s = s0 + 1; s <= s1; ++s) {
    integral += 0.5 * kDtComms *
                (tr.at(s - 1, 0).claimed_v + tr.at(s, 0).claimed_v);
    double dx = tr.at(s, 0).claimed_x - tr.at(s0, 0).claimed_x;
    CHECK(std::abs(dx - integral) < 1e-6);
  }
  // speed offset applied, acceleration claim honest
  CHECK(tr.at(150, 0).claimed_v ==
        doctest::Approx(tr.at(150, 0).truth.v + 3.0).epsilon(1e-12));
  CHECK(tr.at(150, 0).claimed_a == tr.at(150, 0).truth.a);
}

TEST_CASE("no-op window leaves the stream identical with zero labels") {
  sim::ScenarioSpec sp = steady_spec(20.0);
  sim::Trace benign = sim::run_scenario(sp);
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Position,
                             20.0, 0, -5.0, -1.0);  // ends before the first step
  AttackedRun run = apply_attack(benign, a);
  CHECK(run.trace.content_hash() == benign.content_hash());
  for (auto b : run.labels.y) CHECK(b == 0);
}

TEST_CASE("label accounting: 100 attacked steps per member vehicle") {
  sim::ScenarioSpec sp = steady_spec(60.0);
  sim::Trace benign = sim::run_scenario(sp);
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Speed, 5.0,
                             2, 10.0, 20.0);
  AttackedRun run = apply_attack(benign, a);
  for (int v = 0; v < run.trace.n_vehicles; ++v) {
    int count = 0;
    for (int s = 0; s < run.trace.n_steps; ++s) count += run.labels.yat(s, v);
    CHECK(count == 100);
  }
}

TEST_CASE("join scenario: pre-join rows are masked out") {
  sim::ScenarioSpec sp;
  sp.controller = sim::ControllerKind::Path;
  sp.maneuver = sim::Maneuver::Join;
  sp.duration = 60.0;
  sp.maneuver_time = 20.0;
  sim::Trace benign = sim::run_scenario(sp);
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Position,
                             20.0, 2, 20.0, 40.0);
  AttackedRun run = apply_attack(benign, a);
  int joiner = sp.n_vehicles - 1;
  bool saw_masked = false;
  for (int s = 0; s < run.trace.n_steps; ++s) {
    if (!run.trace.member(s, joiner)) {
      CHECK(run.labels.mat(s, joiner) == 0);
      CHECK(run.labels.yat(s, joiner) == 0);
      saw_masked = true;
    }
  }
  CHECK(saw_masked);
  // y implies m everywhere
  for (int s = 0; s < run.labels.n_steps; ++s)
    for (int v = 0; v < run.labels.n_vehicles; ++v)
      if (run.labels.yat(s, v)) CHECK(run.labels.mat(s, v) == 1);
}

TEST_CASE("closed loop: a position lie on the leader moves real gaps") {
  sim::ScenarioSpec sp = steady_spec(30.0);
  sim::Trace benign = sim::run_scenario(sp);
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Position,
                             10.0, 0, 10.0, 20.0);
  AttackedRun run = apply_attack(benign, a);

  // prefix identity before the attack starts
  for (int s = 0; s < 100; ++s)
    for (int v = 0; v < sp.n_vehicles; ++v) {
      CHECK(run.trace.at(s, v).truth.x == benign.at(s, v).truth.x);
      CHECK(run.trace.at(s, v).claimed_x == benign.at(s, v).claimed_x);
    }

  // within 5 s some follower's true gap deviates by more than a meter
  double max_dev = 0.0;
  for (int s = 100; s < 150; ++s)
    for (int v = 1; v < sp.n_vehicles; ++v)
      max_dev = std::max(max_dev, std::abs(run.trace.at(s, v).sensor_gap -
                                           benign.at(s, v).sensor_gap));
  CHECK(max_dev > 1.0);
}

TEST_CASE("emergency brake keeps hostile runs collision-free; without it they truncate") {
  sim::ScenarioSpec sp = steady_spec(30.0);
  sim::Trace benign = sim::run_scenario(sp);
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Position,
                             20.0, 0, 10.0, 20.0);
  AttackedRun safe = apply_attack(benign, a);
  CHECK_FALSE(safe.collided);
  CHECK(safe.trace.n_steps == benign.n_steps);

  sim::ScenarioSpec unsafe = sp;
  unsafe.aeb = false;
  sim::Trace benign2 = sim::run_scenario(unsafe);
  AttackedRun run = apply_attack(benign2, a);
  CHECK(run.collided);
  CHECK(run.collision_time > 10.0);
  CHECK(run.trace.n_steps < benign2.n_steps);
  // the truncated trace ends before the crash and stays label-consistent
  CHECK(run.labels.n_steps == run.trace.n_steps);
  CHECK(run.trace.time_of(run.trace.n_steps - 1) <= run.collision_time);

  // the strict runner still aborts with the diagnostic
  attack::FalsifyState st;
  sim::ClaimHook hook = [&](int vid, double t,
                            const sim::NeighborKinematics& honest) {
    CamRecord rec{t, vid, honest.x, honest.v, honest.a};
    CamRecord out = falsify_record(rec, a, st);
    return sim::NeighborKinematics{out.claimed_x, out.claimed_v, out.claimed_a};
  };
  bool threw = false;
  try {
    sim::run_scenario(unsafe, hook);
  } catch (const sim::CollisionError& e) {
    threw = true;
    CHECK(e.time > 10.0);
    CHECK(e.front_vehicle == 0);
    CHECK(e.rear_vehicle == 1);
  }
  CHECK(threw);
}

TEST_CASE("attacker must be a member through the window") {
  sim::ScenarioSpec sp;
  sp.controller = sim::ControllerKind::Path;
  sp.maneuver = sim::Maneuver::Exit;
  sp.duration = 30.0;
  sp.maneuver_time = 10.0;
  sp.exit_vehicle = 2;  // the attacker position leaves mid-run
  sim::Trace benign = sim::run_scenario(sp);
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Speed, 5.0,
                             2, 10.0, 20.0);
  CHECK_THROWS_AS(apply_attack(benign, a), ConfigError);
}

TEST_CASE("attack spec validation") {
  sim::ScenarioSpec sp = steady_spec(30.0);
  AttackSpec a = make_attack(Strategy::ConstantOffset, TargetField::Speed, 5.0,
                             3, 10.0, 20.0);
  CHECK_THROWS_AS(a.validate(sp), ConfigError);  // attacker not in {0,2}
  a.attacker = 0;
  a.end_time = 40.0;
  CHECK_THROWS_AS(a.validate(sp), ConfigError);  // beyond duration
}

TEST_CASE("scenario matrix: counts, determinism, benign-only") {
  sim::ScenarioSpec base = steady_spec(30.0);
  auto roster = default_attack_roster(base.duration);
  CHECK(roster.size() == 9);
  std::vector<sim::ControllerKind> ctrls{
      sim::ControllerKind::Path, sim::ControllerKind::Ploeg,
      sim::ControllerKind::Consensus, sim::ControllerKind::Flatbed};
  std::vector<sim::Maneuver> mans{sim::Maneuver::Join, sim::Maneuver::Exit,
                                  sim::Maneuver::Steady};
  auto entries = scenario_matrix(ctrls, mans, roster, {17}, base, 1);
  CHECK(entries.size() == 120);

  auto entries2 = scenario_matrix(ctrls, mans, roster, {17}, base, 1);
  REQUIRE(entries2.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(entries[i].id == entries2[i].id);
    CHECK(entries[i].scenario.seed == entries2[i].scenario.seed);
  }
  // ids are unique
  for (std::size_t i = 1; i < entries.size(); ++i)
    for (std::size_t j = 0; j < i; ++j) CHECK(entries[i].id != entries[j].id);

  auto benign_only = scenario_matrix(ctrls, mans, {}, {17}, base, 2);
  CHECK(benign_only.size() == 4 * 3 * 2);
  for (const auto& e : benign_only) CHECK_FALSE(e.attack.has_value());

  CHECK_THROWS_AS(scenario_matrix({}, mans, roster, {17}, base, 1), ConfigError);
  CHECK_THROWS_AS(scenario_matrix(ctrls, mans, {}, {17}, base, 0), ConfigError);
}

TEST_CASE("label grid binary roundtrip") {
  LabelGrid g;
  g.n_steps = 13;
  g.n_vehicles = 3;
  g.y.assign(39, 0);
  g.m.assign(39, 0);
  for (std::size_t i = 0; i < 39; ++i) {
    g.m[i] = (i % 3) != 2;
    g.y[i] = g.m[i] && (i % 5 == 0);
  }
  auto bytes = g.to_binary();
  LabelGrid back = LabelGrid::from_binary(bytes);
  CHECK(back.y == g.y);
  CHECK(back.m == g.m);

  auto cut = bytes;
  cut.resize(cut.size() - 3);
  CHECK_THROWS_AS(LabelGrid::from_binary(cut), IoError);
}
