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

#include <functional>
#include <vector>

#include "diffmpc/dynamics.hpp"
#include "diffmpc/ocp.hpp"
#include "diffmpc/types.hpp"

namespace diffmpc {

struct SolverConfig {
  int max_iterations = 500;
  double stationarity_tol = 1e-4;  // sup-norm of u - P(u - g)
  double initial_step = 1.0;       // sup-norm length of the first steepest-descent trial step
  double armijo = 1e-4;
  double backtrack = 0.5;
  int memory = 10;                 // quasi-Newton pairs; 0 gives plain projected gradient
  int max_backtracks = 60;

  void validate() const;
};

struct SolveResult {
  ControlSequence sequence;
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
  bool diverged = false;  // only set by solve_multistart for starts whose guess could not be evaluated
  double projected_gradient_norm = 0.0;
  double wall_time = 0.0;             // seconds
  std::vector<double> cost_history;   // cost of every accepted iterate, starting with the projected guess
};

/// Raised by solve_multistart when no start produced a finite cost.
class AllSolvesDiverged : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

ControlSequence project_box(const ControlSequence& u, const InputBox& box);

/// ‖u − P(u − g)‖∞ for a flat gradient g.
double projected_gradient_norm(const ControlSequence& u, const Eigen::VectorXd& gradient, const InputBox& box);

/// f(x) with optional gradient output. May throw NonFiniteError.
using BoxObjective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* gradient)>;

struct BoxMinimum {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
  double projected_gradient_norm = 0.0;
  std::vector<double> history;
};

/// Projected quasi-Newton descent on lower <= x <= upper with Armijo
/// backtracking along the projection arc. Trial points whose objective
/// throws NonFiniteError are rejected like any failed Armijo test.
BoxMinimum minimize_box(const BoxObjective& objective, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                        const Eigen::VectorXd& start, const SolverConfig& cfg);

/// Locally optimal sequence for J(x0, .) from `guess`. Throws NonFiniteError
/// if the projected guess itself cannot be evaluated.
SolveResult solve_local(const OcpSpec& spec, const SystemModel& model, const State& x0, const ControlSequence& guess,
                        const SolverConfig& cfg);

struct MultistartResult {
  std::size_t best_index = 0;
  std::vector<SolveResult> results;  // one per guess, in guess order

  const SolveResult& best() const { return results[best_index]; }
};

/// solve_local from every guess; the minimum-cost result wins, ties go to the
/// lowest index. `threads` = 0 uses every hardware thread.
MultistartResult solve_multistart(const OcpSpec& spec, const SystemModel& model, const State& x0,
                                  const std::vector<ControlSequence>& guesses, const SolverConfig& cfg,
                                  int threads = 1);

/// Receding-horizon warm start: drop the first input, repeat the last.
ControlSequence shift_warm_start(const ControlSequence& previous);

}  // namespace diffmpc
