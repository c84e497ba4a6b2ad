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

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "diffmpc/control.hpp"
#include "diffmpc/datagen.hpp"
#include "diffmpc/dynamics.hpp"
#include "diffmpc/ocp.hpp"

namespace diffmpc {

/// Draws `count` sequences for state x; `probe` identifies the state so that
/// random streams can be derived from it.
using SequenceSampler = std::function<std::vector<ControlSequence>(const State& x, std::uint64_t probe, int count)>;

struct MultimodalityConfig {
  int samples = 20;   // M_mm
  double tau = 0.0;   // separation threshold in sequence L2 units

  void validate() const;
};

/// Percentage, per time step, of probe trajectories whose samples at that
/// step contain a pair further apart than tau. Trajectories may differ in length.
std::vector<double> multimodality_percentage(const SequenceSampler& sampler,
                                             const std::vector<std::vector<State>>& probe_trajectories,
                                             const MultimodalityConfig& cfg);

SequenceSampler diffusion_sampler(std::shared_ptr<const DiffusionModel> model, double guidance_w, std::uint64_t seed);
/// Converged local solutions from uniform box guesses; the cheapest solve when none converge.
SequenceSampler multistart_sampler(const OcpSpec& spec, const SystemModel& model, const SolverConfig& solver,
                                   std::uint64_t seed);

/// Every pole within `tolerance` rad of upright at state x.
bool swing_up_success(SystemKind kind, const State& x, double tolerance = 0.2);

/// Builds a fresh controller for run `run`.
using ControllerFactory = std::function<std::unique_ptr<Controller>(int run)>;

struct NamedController {
  std::string name;
  ControllerFactory make;
};

struct ControllerSummary {
  std::string controller;
  std::vector<double> costs;  // per initial state, in run order
  std::vector<bool> success;
  double median_cost = 0.0;
  double q25_cost = 0.0;
  double q75_cost = 0.0;
  double normalized_median = 0.0;  // median / max cost observed across all controllers
  double mean_step_time = 0.0;
  double max_step_time = 0.0;
  double success_rate = 0.0;
  int aborted = 0;
};

struct ExperimentReport {
  std::string config_digest;
  std::uint64_t seed = 0;
  std::vector<ControllerSummary> rows;

  const ControllerSummary& row(const std::string& controller) const;
};

/// Closed-loop runs of every controller from every initial state.
ExperimentReport run_comparison(const SystemModel& model, const OcpSpec& spec,
                                const std::vector<NamedController>& controllers,
                                const std::vector<State>& initial_states, int steps, std::uint64_t seed,
                                const std::string& config_digest, std::vector<RolloutLog>* logs = nullptr);

/// N states from a box, drawn from the stream (seed, key).
std::vector<State> sample_initial_states(const StateBox& box, int n, std::uint64_t seed);

/// Wall times are only written when requested since they differ between runs.
void write_report_csv(const ExperimentReport& report, const std::string& path, bool with_timing = false);

struct AblationRow {
  std::string parameter;
  double value = 0.0;
  ControllerSummary summary;
  std::string config_digest;
  std::uint64_t seed = 0;
};

/// Evaluates each grid point through `evaluate`, which returns the report for
/// one parameter value.
std::vector<AblationRow> run_ablation(const std::string& parameter, const std::vector<double>& grid,
                                      const std::function<ExperimentReport(double)>& evaluate);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path, bool with_timing = false);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// (1 - p_B + delta_tilde)^M.
double theorem2_bound(double p_b, double delta_tilde, int M);

/// Toy OCP with a one-dimensional input over horizon H whose solution
/// distribution is a mixture of two isotropic Gaussians; the first centre is
/// the global optimum.
struct BimodalToy {
  int horizon = 8;
  Eigen::VectorXd global_mode;
  Eigen::VectorXd local_mode;
  double global_mass = 0.35;
  double spread = 0.25;

  static BimodalToy standard();
  Eigen::VectorXd sample(Rng& rng) const;
  /// Exact mass of the eps-ball around the global optimum.
  double ball_mass(double eps) const;
  /// Radius at which the ball mass equals `p_b` (bisection).
  double radius_for_mass(double p_b) const;
};

struct Theorem2Result {
  int M = 0;
  int trials = 0;
  double eps = 0.0;
  double p_b = 0.0;
  double delta_tilde = 0.0;
  double bound = 0.0;
  double empirical_failure = 0.0;
  double standard_error = 0.0;
  bool inconclusive = false;  // delta_tilde >= p_B
  bool within_bound = false;  // failure <= bound + 3 standard errors
};

/// `draw(rng)` returns one sample of the model under test. delta_tilde is
/// measured as the shortfall of the model's ball mass (over `mass_samples`
/// draws) relative to the exact p_B.
Theorem2Result theorem2_check(const BimodalToy& toy, const std::function<Eigen::VectorXd(Rng&)>& draw, int M,
                              double eps, int trials, int mass_samples, std::uint64_t seed);

/// Median, over probe states, of the distance to the nearest dataset state.
double median_nearest_distance(const std::vector<State>& probes, const Dataset& ds);

struct CoverageResult {
  std::vector<std::uint64_t> budgets;  // records per dataset
  std::vector<double> median_distance;
  bool strictly_decreasing = false;
};

CoverageResult theorem1_coverage_check(const std::vector<Dataset>& datasets, const std::vector<State>& probes);

}  // namespace diffmpc
