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

#include <vector>

#include "diffmpc/dynamics.hpp"
#include "diffmpc/types.hpp"

namespace diffmpc {

/// Quadratic cost on a nonlinear state transform:
///   J = sum_{i<H} [nl(x_i)' Q nl(x_i) + u_i' R u_i] + nl(x_H)' P nl(x_H).
/// Q, R and P are stored as their diagonals.
struct OcpSpec {
  int horizon = 1;
  Eigen::VectorXd q;
  Eigen::VectorXd r;
  Eigen::VectorXd p;
  SystemKind transform = SystemKind::CartPole;
  InputBox box;

  /// Weights and horizon for `kind` as used in the benchmark study, with the
  /// given symmetric input bound.
  static OcpSpec benchmark(SystemKind kind, double input_bound);

  void validate(const SystemModel& model) const;

  /// Hex digest over every field, used to tie datasets and checkpoints to a spec.
  std::string digest() const;
};

int transform_dim(SystemKind kind);

/// x_nl for the given system kind.
Eigen::VectorXd nonlinear_transform(SystemKind kind, const State& x);

/// Jacobian of x_nl with respect to x.
Eigen::MatrixXd nonlinear_transform_jacobian(SystemKind kind, const State& x);

double stage_cost(const OcpSpec& spec, const State& x, const Input& u);
double terminal_cost(const OcpSpec& spec, const State& x);

/// J(x0, u) over the RK4 rollout. Throws NonFiniteError on blow-up.
double total_cost(const OcpSpec& spec, const SystemModel& model, const State& x0, const ControlSequence& u);

/// Batched evaluation; entry m equals total_cost(..., candidates[m]) exactly.
std::vector<double> total_costs(const OcpSpec& spec, const SystemModel& model, const State& x0,
                                const std::vector<ControlSequence>& candidates);

struct CostAndGradient {
  double cost = 0.0;
  Eigen::VectorXd gradient;  // flat, same layout as ControlSequence::flat()
};

/// Exact gradient of the discretized cost by reverse accumulation through
/// every RK4 stage.
CostAndGradient cost_gradient(const OcpSpec& spec, const SystemModel& model, const State& x0,
                              const ControlSequence& u);

}  // namespace diffmpc
