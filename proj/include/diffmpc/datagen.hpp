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
#include <string>
#include <vector>

#include "diffmpc/dynamics.hpp"
#include "diffmpc/ocp.hpp"
#include "diffmpc/random.hpp"
#include "diffmpc/solver.hpp"
#include "diffmpc/types.hpp"

namespace diffmpc {

/// Axis-aligned uniform initial-state distribution; lower == upper pins a
/// coordinate.
struct StateBox {
  State lower;
  State upper;

  State sample(Rng& rng) const;
  bool contains(const State& x) const;
};

/// Initial-state box used in the benchmark study for each system.
StateBox benchmark_initial_states(SystemKind kind);

struct GenConfig {
  int num_trajectories = 1;  // N_s
  int steps = 1;             // N_T
  int perturbations = 1;     // N_p
  int restarts = 1;          // local solves per record; > 1 stores the multistart winner
  State sigma;               // per-dimension perturbation std
  std::vector<State> sigma_schedule;  // optional sigma(t); entry t overrides `sigma`
  StateBox initial_states;
  double guess_amplitude_initial = 1.0;  // u_bar_0
  double guess_amplitude_floor = 0.0;    // lower limit for u_bar_t after step 0
  bool adapt_guess_amplitude = true;     // false keeps u_bar_0 for the whole trajectory
  bool advance_from_nominal = false;     // solve once at the unperturbed state to advance
  bool drop_unconverged = false;
  std::uint64_t seed = 0;
  int threads = 1;

  const State& sigma_at(int t) const;
  void validate(int state_dim) const;
  std::string describe() const;  // canonical key=value text
};

struct DatasetRecord {
  State state;
  ControlSequence sequence;
  double cost = 0.0;
  bool converged = false;
  std::uint32_t trajectory_id = 0;
  std::uint32_t step_index = 0;
  std::uint32_t perturbation_index = 0;

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

struct DatasetHeader {
  SystemKind system = SystemKind::CartPole;
  std::string spec_digest;
  int state_dim = 0;
  int horizon = 0;
  int input_dim = 0;
  std::string generator;        // GenConfig::describe() of the producing run
  std::uint64_t dropped = 0;    // solves excluded (diverged, or unconverged when dropping)
  std::uint64_t total_solves = 0;

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<DatasetRecord> records;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Uniform entries in [-amplitude, amplitude].
ControlSequence sample_initial_guess(double amplitude, int horizon, int input_dim, Rng& rng);

/// x + N(0, diag(sigma^2)).
State perturb_state(const State& x, const State& sigma, Rng& rng);

/// Optimizer-based data generation along perturbed closed-loop trajectories.
/// Records are ordered by (trajectory, step, perturbation).
Dataset generate_dataset(const SystemModel& model, const OcpSpec& spec, const GenConfig& gen,
                         const SolverConfig& solver);

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

/// One record per line, comma-separated, with a header row.
void export_dataset_csv(const Dataset& ds, const std::string& path);

}  // namespace diffmpc
