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
#include <optional>
#include <string>
#include <vector>

#include "diffmpc/datagen.hpp"
#include "diffmpc/diffusion.hpp"
#include "diffmpc/dynamics.hpp"
#include "diffmpc/neural.hpp"
#include "diffmpc/ocp.hpp"
#include "diffmpc/solver.hpp"

namespace diffmpc {

struct ControllerConfig {
  int M = 5;                  // candidates (diffusion) or restarts (multistart)
  double guidance_w = 0.0;
  SolverConfig solver;
  std::uint64_t seed = 0;
  double guess_amplitude = 0.0;  // multistart guesses; <= 0 uses the full input box
  int threads = 1;

  void validate() const;
};

struct StepLog {
  State state;
  Input applied;
  int chosen_index = 0;
  double chosen_cost = 0.0;
  std::vector<double> candidate_costs;
  double wall_time = 0.0;  // seconds spent inside the controller
  int solver_iterations = 0;
  std::uint64_t reverse_steps = 0;
  std::uint64_t cost_rollouts = 0;
  std::uint64_t local_solves = 0;
};

struct RolloutLog {
  std::string controller;
  std::vector<StepLog> steps;
  std::vector<State> states;  // S + 1 entries unless aborted
  double closed_loop_cost = 0.0;
  bool aborted = false;

  double mean_step_time() const;
  double max_step_time() const;
};

/// Index of the smallest cost; ties and NaNs resolve to the lowest index.
int select_candidate(const std::vector<double>& costs);

/// Costs of candidate sequences; a candidate whose rollout blows up scores +inf.
std::vector<double> score_candidates(const OcpSpec& spec, const SystemModel& model, const State& x,
                                     const std::vector<ControlSequence>& candidates);

class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  virtual void reset() {}
  /// Input to apply at closed-loop step `t`. Fills the step log.
  virtual Input act(const State& x, int t, StepLog& log) = 0;
};

/// Sample M sequences from the diffusion model, score them under the true
/// cost and apply the first input of the best one.
class DiffusionController : public Controller {
 public:
  DiffusionController(std::shared_ptr<const DiffusionModel> model, OcpSpec spec, SystemModel system,
                      ControllerConfig cfg);
  std::string name() const override { return "diffusion"; }
  Input act(const State& x, int t, StepLog& log) override;
  /// Candidates drawn at step t, in candidate order.
  std::vector<ControlSequence> candidates(const State& x, int t, SamplingCounters* counters = nullptr) const;

 private:
  std::shared_ptr<const DiffusionModel> model_;
  OcpSpec spec_;
  SystemModel system_;
  ControllerConfig cfg_;
};

/// Receding-horizon local solver warm-started from the shifted previous solution.
class LocalMpcController : public Controller {
 public:
  LocalMpcController(OcpSpec spec, SystemModel system, ControllerConfig cfg);
  std::string name() const override { return "local_mpc"; }
  void reset() override { previous_.reset(); }
  Input act(const State& x, int t, StepLog& log) override;
  const ControlSequence* previous_solution() const { return previous_ ? &*previous_ : nullptr; }

 private:
  OcpSpec spec_;
  SystemModel system_;
  ControllerConfig cfg_;
  std::optional<ControlSequence> previous_;
};

/// M uniform random guesses over the input range, best local solution applied.
class MultistartMpcController : public Controller {
 public:
  MultistartMpcController(OcpSpec spec, SystemModel system, ControllerConfig cfg);
  std::string name() const override { return "multistart_mpc"; }
  Input act(const State& x, int t, StepLog& log) override;
  std::vector<ControlSequence> guesses(int t) const;
  MultistartResult solve(const State& x, int t) const;

 private:
  OcpSpec spec_;
  SystemModel system_;
  ControllerConfig cfg_;
};

/// Regression network from state to a full control sequence.
struct BehaviorClonePolicy {
  Mlp net;
  Normalizer normalizer;
  InputBox box;
  int horizon = 0;
  int input_dim = 0;
  bool globally_optimized = false;
  std::string spec_digest;

  ControlSequence predict(const State& x) const;
  Eigen::MatrixXd predict_normalized(const Eigen::MatrixXd& states_normalized) const;
};

struct BehaviorCloneConfig {
  int depth = 3;
  int width = 50;
  Activation activation = Activation::Tanh;
  int batch_size = 256;
  int epochs = 300;
  double learning_rate = 3e-3;
  double validation_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BehaviorCloneResult {
  BehaviorClonePolicy policy;
  std::vector<TrainLogRow> log;  // losses are per-entry MSE in normalized units
  int best_epoch = 0;
  double best_validation_mse = 0.0;
};

BehaviorCloneResult train_behavior_clone(const Eigen::MatrixXd& states, const Eigen::MatrixXd& sequences,
                                         const InputBox& box, int horizon, const BehaviorCloneConfig& cfg,
                                         bool globally_optimized = false, const std::string& spec_digest = {});
BehaviorCloneResult train_behavior_clone(const Dataset& ds, const InputBox& box, const BehaviorCloneConfig& cfg,
                                         bool globally_optimized = false);

/// Generator settings for the NN* dataset: each record stores the best of
/// `restarts` local solves while the total number of solves stays close to
/// that of `base` (N_p is reduced first, then N_s).
GenConfig budget_matched_config(const GenConfig& base, int restarts);

void save_behavior_clone(const BehaviorClonePolicy& policy, const std::string& path);
BehaviorClonePolicy load_behavior_clone(const std::string& path);

class BehaviorCloneController : public Controller {
 public:
  explicit BehaviorCloneController(std::shared_ptr<const BehaviorClonePolicy> policy);
  std::string name() const override { return policy_->globally_optimized ? "nn_star" : "nn"; }
  Input act(const State& x, int t, StepLog& log) override;

 private:
  std::shared_ptr<const BehaviorClonePolicy> policy_;
};

using Plant = std::function<State(const State&, const Input&)>;

/// Alternates controller and plant for S steps. The closed-loop cost is the
/// sum of stage costs plus the terminal cost at the final state. A non-finite
/// state stops the rollout and marks the log aborted with infinite cost.
RolloutLog closed_loop_rollout(Controller& controller, const Plant& plant, const OcpSpec& spec, const State& x0,
                               int steps);
RolloutLog closed_loop_rollout(Controller& controller, const SystemModel& model, const OcpSpec& spec,
                               const State& x0, int steps);

/// One row per step: state, applied input, chosen index and cost, and counters.
/// Wall times are only written when requested since they differ between runs.
void export_rollout_csv(const RolloutLog& log, const std::string& path, bool with_timing = false);

}  // namespace diffmpc
