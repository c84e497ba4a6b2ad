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

#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "diffmpc/types.hpp"

namespace diffmpc {

enum class SystemKind { CartPole, Pendubot, DoubleCartPole };

std::string to_string(SystemKind kind);
SystemKind parse_system_kind(const std::string& name);

/// Physical constants shared by the three benchmark models. Which fields a
/// model reads depends on its kind (the pendubot has no cart).
struct PhysicalParams {
  double cart_mass = 1.0;
  double mass1 = 0.1;
  double mass2 = 0.1;
  double length1 = 0.5;
  double length2 = 0.5;
  double gravity = 9.81;
};

/// Fixed-step RK4 with zero-order-hold input. `field(x, u)` returns dx/dt.
/// A negative `h` integrates backwards in time.
template <typename Field>
State rk4_step(const Field& field, const State& x, const Input& u, double h) {
  const State k1 = field(x, u);
  const State k2 = field(State(x + 0.5 * h * k1), u);
  const State k3 = field(State(x + 0.5 * h * k2), u);
  const State k4 = field(State(x + h * k3), u);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Discrete-time benchmark system x_{t+1} = f(x_t, u_t).
///
/// State layouts:
///   cart-pole         [x, xdot, theta, thetadot]            theta = 0 hanging down
///   pendubot          [theta1, theta2, theta1dot, theta2dot] theta1 from down, theta2 relative
///   double cart-pole  [x, xdot, phi1, phi1dot, phi2, phi2dot] absolute angles, 0 upright
///
/// Poles are massless rods with point masses at their tips. No friction.
class SystemModel {
 public:
  SystemModel(SystemKind kind, PhysicalParams params = {}, double dt = 0.01);

  SystemKind kind() const { return kind_; }
  const PhysicalParams& params() const { return params_; }
  double dt() const { return dt_; }
  int state_dim() const;
  int input_dim() const { return 1; }

  /// Continuous-time vector field.
  State derivative(const State& x, const Input& u) const;

  /// Vector field plus its Jacobians A = d(xdot)/dx and B = d(xdot)/du.
  void derivative_jacobians(const State& x, const Input& u, State& xdot, Eigen::MatrixXd& a,
                            Eigen::MatrixXd& b) const;

  /// One RK4 step of length dt. Throws NonFiniteError on blow-up.
  State step(const State& x, const Input& u) const;

  /// States x_0..x_H of the open-loop rollout under `u`.
  std::vector<State> rollout_states(const State& x0, const ControlSequence& u) const;

  void check_state(const State& x) const;
  void check_input(const Input& u) const;

 private:
  SystemKind kind_;
  PhysicalParams params_;
  double dt_;
};

}  // namespace diffmpc
