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
#include <filesystem>
#include <numbers>

#include "diffmpc/control.hpp"
#include "diffmpc/metrics.hpp"
#include "doctest.h"

using namespace diffmpc;

namespace {

State cart_pole(double x, double theta) {
  State s(4);
  s << x, 0, theta, 0;
  return s;
}

// Random-weight denoiser: enough for bookkeeping checks.
std::shared_ptr<const DiffusionModel> untrained_model(const OcpSpec& spec, std::uint64_t seed) {
  DenoiserArch arch;
  arch.width = 32;
  Rng rng = make_stream(seed, {});
  Eigen::MatrixXd states = Eigen::MatrixXd::Random(4, 16);
  return std::make_shared<const DiffusionModel>(DiffusionModel{Denoiser::initialized(4, spec.horizon, arch, rng),
                                                               default_schedule(), ReverseVariance::Beta,
                                                               Normalizer::fit(states, spec.box, spec.horizon),
                                                               spec.box, spec.horizon, 1, spec.digest()});
}

class ConstantController : public Controller {
 public:
  explicit ConstantController(double u) : u_(u) {}
  std::string name() const override { return "constant"; }
  Input act(const State&, int, StepLog& log) override {
    log.candidate_costs = {0.0};
    return Input::Constant(1, u_);
  }

 private:
  double u_;
};

constexpr int kH = 8;

Eigen::VectorXd bc_sequence(const Eigen::VectorXd& x) {
  Eigen::VectorXd u(kH);
  for (int i = 0; i < kH; ++i) u[i] = 2.0 * std::sin(x[0] + 0.3 * i) + x[1];
  return u;
}

// Returns mean distance of predictions to the nearest mode.
double bc_mode_distance(bool bimodal, double* val_mse) {
  Rng rng = make_stream(bimodal ? 2 : 1, {});
  const int n = 2000;
  Eigen::MatrixXd xs(2, n), us(kH, n);
  for (int c = 0; c < n; ++c) {
    xs(0, c) = uniform(rng, -1.0, 1.0);
    xs(1, c) = uniform(rng, -0.5, 0.5);
    const double sign = bimodal && c % 2 ? -1.0 : 1.0;
    us.col(c) = sign * bc_sequence(xs.col(c));
  }
  BehaviorCloneConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 128;
  const auto res = train_behavior_clone(xs, us, InputBox::symmetric(1, 4.0), kH, cfg);
  if (val_mse) *val_mse = res.best_validation_mse;
  double sum = 0.0;
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd x(2);
    x << uniform(rng, -1.0, 1.0), uniform(rng, -0.5, 0.5);
    const Eigen::VectorXd mode = bc_sequence(x);
    const Eigen::VectorXd pred = res.policy.predict(x).flat();
    sum += bimodal ? std::min((pred - mode).norm(), (pred + mode).norm()) : (pred - mode).norm();
  }
  return sum / 100.0;
}

}  // namespace

TEST_CASE("candidate selection") {
  CHECK(select_candidate({3.0, 1.0, 2.0}) == 1);
  CHECK(select_candidate({2.0, 1.0, 1.0}) == 1);
  CHECK(select_candidate({5.0}) == 0);
  CHECK(select_candidate({NAN, 4.0, INFINITY}) == 1);
  CHECK_THROWS_AS(select_candidate({}), DimensionError);
  Rng rng = make_stream(1, {});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> c(7), scaled(7);
    const double k = std::exp(uniform(rng, -20.0, 20.0));
    for (int i = 0; i < 7; ++i) c[i] = std::floor(uniform(rng, 0.0, 5.0)), scaled[i] = k * c[i];
    CHECK(select_candidate(c) == select_candidate(scaled));
  }
}

TEST_CASE("rollout with a stub plant and constant controller") {
  const OcpSpec spec = OcpSpec::benchmark(SystemKind::CartPole, 100.0);
  ConstantController ctrl(2.5);
  const Plant still = [](const State& x, const Input&) { return x; };
  const RolloutLog log = closed_loop_rollout(ctrl, still, spec, cart_pole(0.5, 1.0), 6);
  REQUIRE(log.steps.size() == 6);
  REQUIRE(log.states.size() == 7);
  for (const auto& s : log.steps) {
    CHECK(s.state == cart_pole(0.5, 1.0));
    CHECK(s.applied[0] == 2.5);
  }
  const double stage = stage_cost(spec, cart_pole(0.5, 1.0), Input::Constant(1, 2.5));
  CHECK(log.closed_loop_cost == doctest::Approx(6 * stage + terminal_cost(spec, cart_pole(0.5, 1.0))).epsilon(1e-14));
  CHECK_THROWS_AS(closed_loop_rollout(ctrl, still, spec, cart_pole(0, 0), 0), ConfigError);

  ConstantController wild(1e3);
  CHECK_THROWS_AS(closed_loop_rollout(wild, still, spec, cart_pole(0, 0), 2), Error);

  const Plant blowup = [](const State& x, const Input&) { return State::Constant(x.size(), NAN); };
  const RolloutLog ab = closed_loop_rollout(ctrl, blowup, spec, cart_pole(0, 0), 5);
  CHECK(ab.aborted);
  CHECK(ab.steps.size() == 1);
  CHECK(std::isinf(ab.closed_loop_cost));
}

TEST_CASE("diffusion controller bookkeeping") {
  const SystemModel model(SystemKind::CartPole);
  const OcpSpec spec = OcpSpec::benchmark(SystemKind::CartPole, 100.0);
  const auto dm = untrained_model(spec, 3);
  ControllerConfig cfg;
  cfg.M = 4;
  cfg.seed = 17;
  DiffusionController ctrl(dm, spec, model, cfg);
  const State x0 = cart_pole(0.3, 2.0);
  const RolloutLog log = closed_loop_rollout(ctrl, model, spec, x0, 5);
  REQUIRE(log.steps.size() == 5);
  for (std::size_t t = 0; t < log.steps.size(); ++t) {
    const auto& s = log.steps[t];
    CHECK(s.reverse_steps == 4u * 25u);
    CHECK(s.cost_rollouts == 4u);
    CHECK(s.candidate_costs.size() == 4);
    CHECK(spec.box.contains(s.applied));
    const auto cands = ctrl.candidates(s.state, static_cast<int>(t));
    CHECK(s.chosen_index == select_candidate(s.candidate_costs));
    CHECK(s.applied == cands[static_cast<std::size_t>(s.chosen_index)].input(0));
    CHECK(s.chosen_cost == total_cost(spec, model, s.state, cands[static_cast<std::size_t>(s.chosen_index)]));
    for (double c : s.candidate_costs) CHECK(s.chosen_cost <= c);
  }
  DiffusionController again(dm, spec, model, cfg);
  const RolloutLog log2 = closed_loop_rollout(again, model, spec, x0, 5);
  CHECK(log2.states == log.states);

  cfg.M = 1;
  DiffusionController single(dm, spec, model, cfg);
  StepLog st;
  const Input u = single.act(x0, 0, st);
  CHECK(u == single.candidates(x0, 0)[0].input(0));

  OcpSpec shorter = spec;
  shorter.horizon = 32;
  CHECK_THROWS_AS(DiffusionController(dm, shorter, model, cfg), DimensionError);
  cfg.M = 0;
  CHECK_THROWS_AS(DiffusionController(dm, spec, model, cfg), ConfigError);
}

TEST_CASE("local MPC") {
  const SystemModel model(SystemKind::CartPole);
  const OcpSpec spec = OcpSpec::benchmark(SystemKind::CartPole, 100.0);
  LocalMpcController ctrl(spec, model, ControllerConfig{});

  StepLog st;
  const Input u_target = ctrl.act(cart_pole(0, std::numbers::pi), 0, st);
  CHECK(std::abs(u_target[0]) < 1e-6 * 100.0);

  ctrl.reset();
  const State x0 = cart_pole(1.0, 2.2);
  const Input u0 = ctrl.act(x0, 0, st);
  const SolveResult direct = solve_local(spec, model, x0, ControlSequence(spec.horizon, 1), SolverConfig{});
  CHECK(u0 == direct.sequence.input(0));
  CHECK(*ctrl.previous_solution() == direct.sequence);

  // Warm starts versus cold starts along a rollout.
  ctrl.reset();
  State x = x0;
  int steps = 0, warm_not_worse = 0, unconverged = 0;
  for (int t = 0; t < 40; ++t) {
    const ControlSequence warm_guess =
        ctrl.previous_solution() ? shift_warm_start(*ctrl.previous_solution()) : ControlSequence(spec.horizon, 1);
    const SolveResult warm = solve_local(spec, model, x, warm_guess, SolverConfig{});
    const SolveResult cold = solve_local(spec, model, x, ControlSequence(spec.horizon, 1), SolverConfig{});
    StepLog s;
    const Input u = ctrl.act(x, t, s);
    CHECK(s.solver_iterations == warm.iterations);
    unconverged += warm.converged ? 0 : 1;
    ++steps;
    warm_not_worse += warm.iterations <= cold.iterations ? 1 : 0;
    x = model.step(x, u);
  }
  MESSAGE("warm start used no more iterations than cold start in " << warm_not_worse << " of " << steps
                                                                    << " steps");
  CHECK(unconverged == 0);
  CHECK(warm_not_worse >= 0.8 * steps);
}

TEST_CASE("multistart MPC") {
  const SystemModel model(SystemKind::CartPole);
  const OcpSpec spec = OcpSpec::benchmark(SystemKind::CartPole, 100.0);
  ControllerConfig cfg;
  cfg.M = 1;
  cfg.seed = 5;
  MultistartMpcController one(spec, model, cfg);
  const State x = cart_pole(0.0, 1.8);
  StepLog st;
  const Input u = one.act(x, 3, st);
  const auto g = one.guesses(3);
  REQUIRE(g.size() == 1);
  CHECK(spec.box.contains(g[0]));
  CHECK(u == solve_local(spec, model, x, g[0], SolverConfig{}).sequence.input(0));
  CHECK(st.local_solves == 1);

  cfg.M = 20;
  MultistartMpcController many(spec, model, cfg);
  StepLog log;
  many.act(x, 0, log);
  CHECK(log.local_solves == 20);
  for (double c : log.candidate_costs) CHECK(log.chosen_cost <= c);

  // Rest state at the lower edge of the initial-state box.
  const MultistartResult ms = many.solve(x, 0);
  std::vector<ControlSequence> sols;
  for (const auto& r : ms.results) sols.push_back(r.sequence);
  CHECK(threshold_cluster_count(sols, default_mode_threshold(spec.box, spec.horizon)) == 2);
}

TEST_CASE("behavior clone learns unimodal data and averages bimodal data") {
  double uni_mse = 0.0;
  const double uni = bc_mode_distance(false, &uni_mse);
  const double bi = bc_mode_distance(true, nullptr);
  MESSAGE("unimodal val MSE " << uni_mse << ", nearest-mode distance " << uni << " vs bimodal " << bi);
  CHECK(uni_mse < 1e-3);
  CHECK(bi >= 10.0 * uni);
}

TEST_CASE("behavior clone checkpoint and budget-matched dataset") {
  Eigen::MatrixXd xs = Eigen::MatrixXd::Random(2, 40), us = Eigen::MatrixXd::Random(kH, 40);
  BehaviorCloneConfig cfg;
  cfg.epochs = 3;
  const auto res = train_behavior_clone(xs, us, InputBox::symmetric(1, 1.0), kH, cfg, true, "abc");
  const auto path = (std::filesystem::temp_directory_path() / "diffmpc_test_control_bc.bin").string();
  save_behavior_clone(res.policy, path);
  const BehaviorClonePolicy back = load_behavior_clone(path);
  CHECK(back.globally_optimized);
  CHECK(back.spec_digest == "abc");
  CHECK(back.predict(xs.col(3)) == res.policy.predict(xs.col(3)));
  BehaviorCloneController ctrl(std::make_shared<const BehaviorClonePolicy>(back));
  CHECK(ctrl.name() == "nn_star");

  GenConfig base;
  base.num_trajectories = 20;
  base.steps = 50;
  base.perturbations = 4;
  const GenConfig m = budget_matched_config(base, 4);
  CHECK(m.restarts == 4);
  CHECK(m.num_trajectories * m.steps * m.perturbations * m.restarts == 4000);

  const SystemModel model(SystemKind::CartPole);
  OcpSpec spec = OcpSpec::benchmark(SystemKind::CartPole, 100.0);
  spec.horizon = 12;
  GenConfig small;
  small.num_trajectories = 2;
  small.steps = 2;
  small.perturbations = 4;
  small.sigma = State::Constant(4, 0.15);
  small.initial_states = benchmark_initial_states(SystemKind::CartPole);
  small.guess_amplitude_initial = 100.0;
  const GenConfig reduced = budget_matched_config(small, 2);
  const Dataset ds = generate_dataset(model, spec, reduced, SolverConfig{});
  CHECK(ds.records.size() ==
        static_cast<std::size_t>(reduced.num_trajectories * reduced.steps * reduced.perturbations));
  CHECK(ds.header.total_solves <= 2u * 2u * 4u);
}
