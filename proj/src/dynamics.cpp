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

#include "diffmpc/dynamics.hpp"

#include <unsupported/Eigen/AutoDiff>

#include <array>
#include <cmath>

namespace diffmpc {

namespace {

constexpr int kMaxStateDim = 6;
constexpr int kMaxJacobianCols = kMaxStateDim + 1;

using AdScalar = Eigen::AutoDiffScalar<Eigen::Matrix<double, kMaxJacobianCols, 1>>;

template <typename T>
void cart_pole_field(const PhysicalParams& p, const T* x, const T& u, T* xdot) {
  using std::cos;
  using std::sin;
  const T s = sin(x[2]);
  const T c = cos(x[2]);
  const double m = p.mass1;
  const double l = p.length1;
  const T den = p.cart_mass + m * s * s;
  const T xdd = (u + m * l * s * x[3] * x[3] + m * p.gravity * s * c) / den;
  const T thdd = -(c * xdd + p.gravity * s) / l;
  xdot[0] = x[1];
  xdot[1] = xdd;
  xdot[2] = x[3];
  xdot[3] = thdd;
}

template <typename T>
void pendubot_field(const PhysicalParams& p, const T* x, const T& u, T* xdot) {
  using std::cos;
  using std::sin;
  const double m1 = p.mass1, m2 = p.mass2, l1 = p.length1, l2 = p.length2, g = p.gravity;
  const T c2 = cos(x[1]);
  const T s2 = sin(x[1]);
  const T s1 = sin(x[0]);
  const T s12 = sin(x[0] + x[1]);
  const T& qd1 = x[2];
  const T& qd2 = x[3];

  const T m11 = m1 * l1 * l1 + m2 * (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * c2);
  const T m12 = m2 * (l2 * l2 + l1 * l2 * c2);
  const double m22 = m2 * l2 * l2;

  const T h = m2 * l1 * l2 * s2;
  const T rhs1 = u + h * (2.0 * qd1 * qd2 + qd2 * qd2) - (m1 + m2) * g * l1 * s1 - m2 * g * l2 * s12;
  const T rhs2 = -h * qd1 * qd1 - m2 * g * l2 * s12;

  const T det = m11 * m22 - m12 * m12;
  xdot[0] = qd1;
  xdot[1] = qd2;
  xdot[2] = (m22 * rhs1 - m12 * rhs2) / det;
  xdot[3] = (m11 * rhs2 - m12 * rhs1) / det;
}

template <typename T>
void double_cart_pole_field(const PhysicalParams& p, const T* x, const T& u, T* xdot) {
  using std::cos;
  using std::sin;
  const double mc = p.cart_mass, m1 = p.mass1, m2 = p.mass2, l1 = p.length1, l2 = p.length2, g = p.gravity;
  const T s1 = sin(x[2]), c1 = cos(x[2]);
  const T s2 = sin(x[4]), c2 = cos(x[4]);
  const T s12 = sin(x[2] - x[4]), c12 = cos(x[2] - x[4]);
  const T& w1 = x[3];
  const T& w2 = x[5];

  // Symmetric mass matrix over q = [x, phi1, phi2].
  const double a = mc + m1 + m2;
  const T b = (m1 + m2) * l1 * c1;
  const T c = m2 * l2 * c2;
  const double d = (m1 + m2) * l1 * l1;
  const T e = m2 * l1 * l2 * c12;
  const double f = m2 * l2 * l2;

  const T r0 = u + (m1 + m2) * l1 * s1 * w1 * w1 + m2 * l2 * s2 * w2 * w2;
  const T r1 = -m2 * l1 * l2 * s12 * w2 * w2 + (m1 + m2) * g * l1 * s1;
  const T r2 = m2 * l1 * l2 * s12 * w1 * w1 + m2 * g * l2 * s2;

  // Cramer's rule on [[a b c] [b d e] [c e f]].
  const T det = a * (d * f - e * e) - b * (b * f - e * c) + c * (b * e - d * c);
  const T q0 = (r0 * (d * f - e * e) - b * (r1 * f - e * r2) + c * (r1 * e - d * r2)) / det;
  const T q1 = (a * (r1 * f - e * r2) - r0 * (b * f - e * c) + c * (b * r2 - r1 * c)) / det;
  const T q2 = (a * (d * r2 - r1 * e) - b * (b * r2 - r1 * c) + r0 * (b * e - d * c)) / det;

  xdot[0] = x[1];
  xdot[1] = q0;
  xdot[2] = w1;
  xdot[3] = q1;
  xdot[4] = w2;
  xdot[5] = q2;
}

template <typename T>
void field(SystemKind kind, const PhysicalParams& p, const T* x, const T& u, T* xdot) {
  switch (kind) {
    case SystemKind::CartPole:
      cart_pole_field(p, x, u, xdot);
      return;
    case SystemKind::Pendubot:
      pendubot_field(p, x, u, xdot);
      return;
    case SystemKind::DoubleCartPole:
      double_cart_pole_field(p, x, u, xdot);
      return;
  }
}

}  // namespace

std::string to_string(SystemKind kind) {
  switch (kind) {
    case SystemKind::CartPole:
      return "cartpole";
    case SystemKind::Pendubot:
      return "pendubot";
    case SystemKind::DoubleCartPole:
      return "double_cartpole";
  }
  return "unknown";
}

SystemKind parse_system_kind(const std::string& name) {
  if (name == "cartpole" || name == "cart_pole") return SystemKind::CartPole;
  if (name == "pendubot") return SystemKind::Pendubot;
  if (name == "double_cartpole" || name == "double_cart_pole") return SystemKind::DoubleCartPole;
  throw ConfigError("unknown system '" + name + "'");
}

SystemModel::SystemModel(SystemKind kind, PhysicalParams params, double dt)
    : kind_(kind), params_(params), dt_(dt) {
  if (!(dt > 0.0)) throw ConfigError("sampling interval dt must be positive");
  const bool has_cart = kind != SystemKind::Pendubot;
  const bool has_second = kind != SystemKind::CartPole;
  if ((has_cart && !(params.cart_mass > 0.0)) || !(params.mass1 > 0.0) || !(params.length1 > 0.0) ||
      (has_second && (!(params.mass2 > 0.0) || !(params.length2 > 0.0)))) {
    throw ConfigError("masses and lengths must be positive");
  }
}

int SystemModel::state_dim() const { return kind_ == SystemKind::DoubleCartPole ? 6 : 4; }

void SystemModel::check_state(const State& x) const {
  if (x.size() != state_dim()) {
    throw DimensionError(to_string(kind_) + " expects a state of dimension " + std::to_string(state_dim()) +
                         ", got " + std::to_string(x.size()));
  }
}

void SystemModel::check_input(const Input& u) const {
  if (u.size() != input_dim()) {
    throw DimensionError(to_string(kind_) + " expects an input of dimension " + std::to_string(input_dim()) +
                         ", got " + std::to_string(u.size()));
  }
}

State SystemModel::derivative(const State& x, const Input& u) const {
  check_state(x);
  check_input(u);
  State xdot(x.size());
  field(kind_, params_, x.data(), u[0], xdot.data());
  return xdot;
}

void SystemModel::derivative_jacobians(const State& x, const Input& u, State& xdot, Eigen::MatrixXd& a,
                                       Eigen::MatrixXd& b) const {
  check_state(x);
  check_input(u);
  const int n = state_dim();
  std::array<AdScalar, kMaxStateDim> xa;
  std::array<AdScalar, kMaxStateDim> da;
  for (int i = 0; i < n; ++i) {
    xa[i].value() = x[i];
    xa[i].derivatives().setZero();
    xa[i].derivatives()[i] = 1.0;
  }
  AdScalar ua;
  ua.value() = u[0];
  ua.derivatives().setZero();
  ua.derivatives()[n] = 1.0;
  field(kind_, params_, xa.data(), ua, da.data());

  xdot.resize(n);
  a.resize(n, n);
  b.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    xdot[i] = da[i].value();
    const auto& dv = da[i].derivatives();
    for (int j = 0; j < n; ++j) a(i, j) = dv[j];
    b(i, 0) = dv[n];
  }
}

State SystemModel::step(const State& x, const Input& u) const {
  check_state(x);
  check_input(u);
  auto f = [this](const State& s, const Input& v) {
    State d(s.size());
    field(kind_, params_, s.data(), v[0], d.data());
    return d;
  };
  State next = rk4_step(f, x, u, dt_);
  if (!next.allFinite()) throw NonFiniteError("integration produced a non-finite state");
  return next;
}

std::vector<State> SystemModel::rollout_states(const State& x0, const ControlSequence& u) const {
  check_state(x0);
  if (u.horizon() > 0 && u.input_dim() != input_dim()) throw DimensionError("control sequence input width mismatch");
  std::vector<State> states;
  states.reserve(static_cast<std::size_t>(u.horizon()) + 1);
  states.push_back(x0);
  for (int i = 0; i < u.horizon(); ++i) states.push_back(step(states.back(), u.input(i)));
  return states;
}

}  // namespace diffmpc
