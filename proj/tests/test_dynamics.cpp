/*
 Copyright 2026 The diffmpc Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#include <cmath>
#include <numbers>

#include "diffmpc/dynamics.hpp"
#include "doctest.h"

using namespace diffmpc;

namespace {

constexpr double kPi = std::numbers::pi;

State vec(std::initializer_list<double> v) {
  State s(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) s[i++] = x;
  return s;
}

Input u1(double v) { return Input::Constant(1, v); }

// Total mechanical energy computed from point-mass kinematics, independent of
// the mass matrices used in the models.
double mechanical_energy(const SystemModel& m, const State& x) {
  const auto& p = m.params();
  const double g = p.gravity;
  switch (m.kind()) {
    case SystemKind::CartPole: {
      const double vx = x[1] + p.length1 * std::cos(x[2]) * x[3];
      const double vy = p.length1 * std::sin(x[2]) * x[3];
      const double y = -p.length1 * std::cos(x[2]);
      return 0.5 * p.cart_mass * x[1] * x[1] + 0.5 * p.mass1 * (vx * vx + vy * vy) + p.mass1 * g * y;
    }
    case SystemKind::Pendubot: {
      const double a1 = x[0], a12 = x[0] + x[1];
      const double w1 = x[2], w12 = x[2] + x[3];
      const double v1x = p.length1 * std::cos(a1) * w1, v1y = p.length1 * std::sin(a1) * w1;
      const double v2x = v1x + p.length2 * std::cos(a12) * w12, v2y = v1y + p.length2 * std::sin(a12) * w12;
      const double y1 = -p.length1 * std::cos(a1), y2 = y1 - p.length2 * std::cos(a12);
      return 0.5 * p.mass1 * (v1x * v1x + v1y * v1y) + 0.5 * p.mass2 * (v2x * v2x + v2y * v2y) +
             g * (p.mass1 * y1 + p.mass2 * y2);
    }
    case SystemKind::DoubleCartPole: {
      const double v1x = x[1] + p.length1 * std::cos(x[2]) * x[3];
      const double v1y = -p.length1 * std::sin(x[2]) * x[3];
      const double v2x = v1x + p.length2 * std::cos(x[4]) * x[5];
      const double v2y = v1y - p.length2 * std::sin(x[4]) * x[5];
      const double y1 = p.length1 * std::cos(x[2]), y2 = y1 + p.length2 * std::cos(x[4]);
      return 0.5 * p.cart_mass * x[1] * x[1] + 0.5 * p.mass1 * (v1x * v1x + v1y * v1y) +
             0.5 * p.mass2 * (v2x * v2x + v2y * v2y) + g * (p.mass1 * y1 + p.mass2 * y2);
    }
  }
  return 0.0;
}

State integrate(const SystemModel& m, State x, double h, int steps) {
  auto f = [&](const State& s, const Input& u) { return m.derivative(s, u); };
  for (int i = 0; i < steps; ++i) x = rk4_step(f, x, u1(0.0), h);
  return x;
}

}  // namespace

TEST_CASE("equilibria have zero derivative and are fixed points") {
  SystemModel cp(SystemKind::CartPole);
  SystemModel pb(SystemKind::Pendubot);
  SystemModel dc(SystemKind::DoubleCartPole);

  CHECK(cp.derivative(vec({0, 0, 0, 0}), u1(0)).norm() == 0.0);
  CHECK(pb.derivative(vec({kPi, 0, 0, 0}), u1(0)).norm() < 1e-14);

  const std::vector<std::pair<const SystemModel*, State>> cases = {
      {&cp, vec({0.3, 0, 0, 0})},     {&cp, vec({-1, 0, kPi, 0})},          {&pb, vec({0, 0, 0, 0})},
      {&pb, vec({kPi, 0, 0, 0})},     {&dc, vec({0, 0, 0, 0, 0, 0})},       {&dc, vec({1, 0, kPi, 0, kPi, 0})},
      {&dc, vec({0, 0, kPi, 0, 0, 0})}};
  for (const auto& [m, x] : cases) {
    CHECK((m->step(x, u1(0)) - x).lpNorm<Eigen::Infinity>() < 1e-15);
  }
}

TEST_CASE("frictionless models conserve mechanical energy over one second") {
  const std::vector<std::pair<SystemKind, State>> cases = {
      {SystemKind::CartPole, vec({0.2, 0.3, 1.0, 0.5})},
      {SystemKind::Pendubot, vec({0.7, -0.4, 1.0, -0.5})},
      {SystemKind::DoubleCartPole, vec({0.0, 0.2, 2.5, 0.3, 3.3, -0.2})},
  };
  for (const auto& [kind, x0] : cases) {
    SystemModel m(kind);
    const double e0 = mechanical_energy(m, x0);
    State x = x0;
    for (int i = 0; i < 100; ++i) x = m.step(x, u1(0));
    CAPTURE(to_string(kind));
    CHECK(std::abs(mechanical_energy(m, x) - e0) / std::abs(e0) < 1e-6);
  }
}

TEST_CASE("rk4 on the scalar decay matches the exponential") {
  auto f = [](const State& x, const Input&) -> State { return -x; };
  const State next = rk4_step(f, vec({1.0}), u1(0), 0.01);
  CHECK(std::abs(next[0] - std::exp(-0.01)) < 1e-10);
}

TEST_CASE("stepping with the reversed field returns to the start") {
  SystemModel m(SystemKind::CartPole);
  auto f = [&](const State& s, const Input& u) { return m.derivative(s, u); };
  const State x0 = vec({0.1, -0.2, 0.8, 1.1});
  const State x1 = m.step(x0, u1(3.0));
  const State back = rk4_step(f, x1, u1(3.0), -m.dt());
  CHECK((back - x0).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("rk4 global error scales with the fourth power of the step") {
  // Fixed integration interval; the local one-step error is fifth order.
  for (SystemKind kind : {SystemKind::CartPole, SystemKind::Pendubot, SystemKind::DoubleCartPole}) {
    SystemModel m(kind);
    const State x0 = kind == SystemKind::DoubleCartPole ? vec({0, 0.5, 2.0, 1.0, 2.5, -1.0}) : vec({0.3, 0.5, 2.0, 1.0});
    const double horizon = 0.4;
    const double h = 0.02;
    const State ref = integrate(m, x0, h / 100.0, 2000);
    const double e1 = (integrate(m, x0, h, 20) - ref).norm();
    const double e2 = (integrate(m, x0, h / 2.0, 40) - ref).norm();
    const double order = std::log2(e1 / e2);
    CAPTURE(to_string(kind));
    CAPTURE(horizon);
    CHECK(order >= 3.5);
    CHECK(order <= 4.5);
  }
}

TEST_CASE("rollout composes single steps bit-identically") {
  SystemModel m(SystemKind::DoubleCartPole);
  const State x0 = vec({0.1, 0, kPi - 0.2, 0.1, 3.3, 0});
  ControlSequence u(12, 1);
  for (int i = 0; i < 12; ++i) u.input(i)[0] = std::sin(0.7 * i) * 20.0;

  const auto states = m.rollout_states(x0, u);
  REQUIRE(states.size() == 13);
  State x = x0;
  CHECK(states[0] == x0);
  for (int i = 0; i < 12; ++i) {
    x = m.step(x, u.input(i));
    CHECK(states[static_cast<std::size_t>(i) + 1] == x);
  }
  CHECK(m.rollout_states(x0, u) == states);

  const auto empty = m.rollout_states(x0, ControlSequence(0, 1));
  REQUIRE(empty.size() == 1);
  CHECK(empty[0] == x0);

  const auto rest = SystemModel(SystemKind::CartPole).rollout_states(vec({0, 0, 0, 0}), ControlSequence(5, 1));
  for (const auto& s : rest) CHECK(s == vec({0, 0, 0, 0}));
}

TEST_CASE("analytic jacobians agree with the plain vector field") {
  SystemModel m(SystemKind::Pendubot);
  const State x = vec({0.4, -1.0, 0.3, 0.9});
  State xdot;
  Eigen::MatrixXd a, b;
  m.derivative_jacobians(x, u1(0.5), xdot, a, b);
  CHECK((xdot - m.derivative(x, u1(0.5))).norm() < 1e-14);
  const double h = 1e-6;
  for (int j = 0; j < 4; ++j) {
    State xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    const State col = (m.derivative(xp, u1(0.5)) - m.derivative(xm, u1(0.5))) / (2 * h);
    CHECK((col - a.col(j)).norm() < 1e-7);
  }
  const State bcol = (m.derivative(x, u1(0.5 + h)) - m.derivative(x, u1(0.5 - h))) / (2 * h);
  CHECK((bcol - b.col(0)).norm() < 1e-7);
}

TEST_CASE("errors") {
  SystemModel m(SystemKind::CartPole);
  CHECK_THROWS_AS(m.step(vec({0, 0, 0}), u1(0)), DimensionError);
  CHECK_THROWS_AS(m.step(vec({0, 0, 0, 0}), Input::Zero(2)), DimensionError);
  CHECK_THROWS_AS(m.step(vec({0, 1e300, 1.0, 1e300}), u1(1e300)), NonFiniteError);
  CHECK_THROWS_AS(SystemModel(SystemKind::CartPole, {}, 0.0), ConfigError);
  PhysicalParams bad;
  bad.length1 = -1.0;
  CHECK_THROWS_AS(SystemModel(SystemKind::Pendubot, bad), ConfigError);
}
