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

#include "diffmpc/ocp.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "diffmpc/binary_io.hpp"

namespace diffmpc {

namespace {

Eigen::VectorXd diag(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

void check_transform_input(SystemKind kind, const State& x) {
  const int expected = kind == SystemKind::DoubleCartPole ? 6 : 4;
  if (x.size() != expected) throw DimensionError("nonlinear_transform: state dimension mismatch");
}

/// Stage points s1..s4 of one RK4 step with their Jacobians.
struct StageJacobians {
  Eigen::MatrixXd a[4];
  Eigen::MatrixXd b[4];
};

void rk4_stage_jacobians(const SystemModel& model, const State& x, const Input& u, StageJacobians& out) {
  const double h = model.dt();
  State k;
  model.derivative_jacobians(x, u, k, out.a[0], out.b[0]);
  State s = x + 0.5 * h * k;
  model.derivative_jacobians(s, u, k, out.a[1], out.b[1]);
  s = x + 0.5 * h * k;
  model.derivative_jacobians(s, u, k, out.a[2], out.b[2]);
  s = x + h * k;
  model.derivative_jacobians(s, u, k, out.a[3], out.b[3]);
}

/// Pulls the cotangent `lambda` of x_{i+1} back through one RK4 step.
void rk4_vjp(const StageJacobians& j, double h, const Eigen::VectorXd& lambda, Eigen::VectorXd& grad_x,
             Eigen::VectorXd& grad_u) {
  Eigen::VectorXd gk1 = (h / 6.0) * lambda;
  Eigen::VectorXd gk2 = (h / 3.0) * lambda;
  Eigen::VectorXd gk3 = (h / 3.0) * lambda;
  const Eigen::VectorXd gk4 = (h / 6.0) * lambda;
  grad_x = lambda;
  grad_u = j.b[3].transpose() * gk4;

  Eigen::VectorXd t = j.a[3].transpose() * gk4;
  grad_x += t;
  gk3 += h * t;

  t = j.a[2].transpose() * gk3;
  grad_u += j.b[2].transpose() * gk3;
  grad_x += t;
  gk2 += 0.5 * h * t;

  t = j.a[1].transpose() * gk2;
  grad_u += j.b[1].transpose() * gk2;
  grad_x += t;
  gk1 += 0.5 * h * t;

  grad_u += j.b[0].transpose() * gk1;
  grad_x += j.a[0].transpose() * gk1;
}

}  // namespace

OcpSpec OcpSpec::benchmark(SystemKind kind, double input_bound) {
  OcpSpec s;
  s.transform = kind;
  s.box = InputBox::symmetric(1, input_bound);
  switch (kind) {
    case SystemKind::CartPole:
      s.horizon = 64;
      s.q = diag({0.01, 0.01, 1000, 0.01});
      s.r = diag({0.001});
      s.p = diag({0.01, 0.1, 1000, 0.1});
      break;
    case SystemKind::Pendubot:
      s.horizon = 256;
      s.q = diag({100, 100, 1, 1});
      s.r = diag({1});
      s.p = diag({1000, 1000, 10, 10});
      break;
    case SystemKind::DoubleCartPole:
      s.horizon = 128;
      s.q = diag({1, 1, 1000, 1, 1000, 1});
      s.r = diag({0.001});
      s.p = diag({1, 1, 100, 1, 100, 1});
      break;
  }
  return s;
}

void OcpSpec::validate(const SystemModel& model) const {
  if (horizon < 1) throw ConfigError("horizon must be at least 1");
  if (transform != model.kind()) throw ConfigError("cost transform does not match the system model");
  const int nl = transform_dim(transform);
  if (q.size() != nl || p.size() != nl) throw DimensionError("Q/P diagonals must match the transform dimension");
  if (r.size() != model.input_dim()) throw DimensionError("R diagonal must match the input dimension");
  if ((q.array() < 0.0).any() || (p.array() < 0.0).any()) throw ConfigError("Q and P must be PSD");
  if (!(r.array() > 0.0).all()) throw ConfigError("R must be positive definite");
  box.validate();
  if (box.dim() != model.input_dim()) throw DimensionError("input box width mismatch");
}

std::string OcpSpec::digest() const {
  std::ostringstream os;
  os.precision(17);
  os << to_string(transform) << '|' << horizon << "|q";
  for (double v : q) os << ',' << v;
  os << "|r";
  for (double v : r) os << ',' << v;
  os << "|p";
  for (double v : p) os << ',' << v;
  os << "|lo";
  for (double v : box.lower) os << ',' << v;
  os << "|hi";
  for (double v : box.upper) os << ',' << v;
  return hex_digest(os.str());
}

int transform_dim(SystemKind kind) { return kind == SystemKind::DoubleCartPole ? 6 : 4; }

Eigen::VectorXd nonlinear_transform(SystemKind kind, const State& x) {
  check_transform_input(kind, x);
  constexpr double pi = std::numbers::pi;
  Eigen::VectorXd nl(x.size());
  switch (kind) {
    case SystemKind::CartPole:
      nl << x[0], x[1], -(x[2] - pi) * (x[2] - pi) / pi, x[3];
      break;
    case SystemKind::Pendubot:
      nl << 1.0 + std::cos(x[0]), 1.0 - std::cos(x[1]), x[2], x[3];
      break;
    case SystemKind::DoubleCartPole:
      nl << x[0], x[1], std::sin(0.5 * x[2]), x[3], std::sin(0.5 * x[4]), x[5];
      break;
  }
  return nl;
}

Eigen::MatrixXd nonlinear_transform_jacobian(SystemKind kind, const State& x) {
  check_transform_input(kind, x);
  constexpr double pi = std::numbers::pi;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Identity(x.size(), x.size());
  switch (kind) {
    case SystemKind::CartPole:
      jac(2, 2) = -2.0 * (x[2] - pi) / pi;
      break;
    case SystemKind::Pendubot:
      jac(0, 0) = -std::sin(x[0]);
      jac(1, 1) = std::sin(x[1]);
      break;
    case SystemKind::DoubleCartPole:
      jac(2, 2) = 0.5 * std::cos(0.5 * x[2]);
      jac(4, 4) = 0.5 * std::cos(0.5 * x[4]);
      break;
  }
  return jac;
}

double stage_cost(const OcpSpec& spec, const State& x, const Input& u) {
  const Eigen::VectorXd nl = nonlinear_transform(spec.transform, x);
  return nl.dot(spec.q.cwiseProduct(nl)) + u.dot(spec.r.cwiseProduct(u));
}

double terminal_cost(const OcpSpec& spec, const State& x) {
  const Eigen::VectorXd nl = nonlinear_transform(spec.transform, x);
  return nl.dot(spec.p.cwiseProduct(nl));
}

double total_cost(const OcpSpec& spec, const SystemModel& model, const State& x0, const ControlSequence& u) {
  if (u.horizon() != spec.horizon) throw DimensionError("control sequence length differs from the OCP horizon");
  model.check_state(x0);
  double cost = 0.0;
  State x = x0;
  for (int i = 0; i < spec.horizon; ++i) {
    const Input ui = u.input(i);
    cost += stage_cost(spec, x, ui);
    x = model.step(x, ui);
  }
  cost += terminal_cost(spec, x);
  if (!std::isfinite(cost)) throw NonFiniteError("cost evaluation overflowed");
  return cost;
}

std::vector<double> total_costs(const OcpSpec& spec, const SystemModel& model, const State& x0,
                                const std::vector<ControlSequence>& candidates) {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(total_cost(spec, model, x0, c));
  return out;
}

CostAndGradient cost_gradient(const OcpSpec& spec, const SystemModel& model, const State& x0,
                              const ControlSequence& u) {
  if (u.horizon() != spec.horizon) throw DimensionError("control sequence length differs from the OCP horizon");
  const int horizon = spec.horizon;
  const int nu = model.input_dim();

  std::vector<State> xs;
  xs.reserve(static_cast<std::size_t>(horizon) + 1);
  xs.push_back(x0);
  model.check_state(x0);
  CostAndGradient out;
  for (int i = 0; i < horizon; ++i) {
    const Input ui = u.input(i);
    out.cost += stage_cost(spec, xs.back(), ui);
    xs.push_back(model.step(xs.back(), ui));
  }
  out.cost += terminal_cost(spec, xs.back());
  if (!std::isfinite(out.cost)) throw NonFiniteError("cost evaluation overflowed");

  out.gradient.resize(static_cast<Eigen::Index>(horizon) * nu);
  auto state_cost_grad = [&](const State& x, const Eigen::VectorXd& w) -> Eigen::VectorXd {
    const Eigen::VectorXd nl = nonlinear_transform(spec.transform, x);
    return 2.0 * nonlinear_transform_jacobian(spec.transform, x).transpose() * w.cwiseProduct(nl);
  };

  Eigen::VectorXd lambda = state_cost_grad(xs.back(), spec.p);
  StageJacobians jac;
  Eigen::VectorXd gx, gu;
  for (int i = horizon - 1; i >= 0; --i) {
    const Input ui = u.input(i);
    rk4_stage_jacobians(model, xs[static_cast<std::size_t>(i)], ui, jac);
    rk4_vjp(jac, model.dt(), lambda, gx, gu);
    out.gradient.segment(static_cast<Eigen::Index>(i) * nu, nu) = gu + 2.0 * spec.r.cwiseProduct(ui);
    lambda = gx + state_cost_grad(xs[static_cast<std::size_t>(i)], spec.q);
  }
  if (!out.gradient.allFinite()) throw NonFiniteError("adjoint recursion produced a non-finite gradient");
  return out;
}

}  // namespace diffmpc
