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

#include "diffmpc/control.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "diffmpc/parallel.hpp"
#include "json.hpp"

namespace diffmpc {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& m, const std::vector<std::size_t>& idx, std::size_t from,
                               std::size_t to) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(to - from));
  for (std::size_t c = from; c < to; ++c) out.col(static_cast<Eigen::Index>(c - from)) = m.col(static_cast<Eigen::Index>(idx[c]));
  return out;
}

nlohmann::json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void ControllerConfig::validate() const {
  if (M < 1) throw ConfigError("M must be >= 1");
  if (!std::isfinite(guidance_w)) throw ConfigError("guidance weight must be finite");
  solver.validate();
}

double RolloutLog::mean_step_time() const {
  if (steps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& st : steps) s += st.wall_time;
  return s / static_cast<double>(steps.size());
}

double RolloutLog::max_step_time() const {
  double m = 0.0;
  for (const auto& st : steps) m = std::max(m, st.wall_time);
  return m;
}

int select_candidate(const std::vector<double>& costs) {
  if (costs.empty()) throw DimensionError("select_candidate: no candidates");
  int best = 0;
  for (int m = 1; m < static_cast<int>(costs.size()); ++m) {
    if (costs[static_cast<std::size_t>(m)] < costs[static_cast<std::size_t>(best)] ||
        (std::isnan(costs[static_cast<std::size_t>(best)]) && !std::isnan(costs[static_cast<std::size_t>(m)]))) {
      best = m;
    }
  }
  return best;
}

std::vector<double> score_candidates(const OcpSpec& spec, const SystemModel& model, const State& x,
                                     const std::vector<ControlSequence>& candidates) {
  std::vector<double> costs(candidates.size());
  for (std::size_t m = 0; m < candidates.size(); ++m) {
    try {
      costs[m] = total_cost(spec, model, x, candidates[m]);
    } catch (const NonFiniteError&) {
      costs[m] = INFINITY;
    }
  }
  return costs;
}

DiffusionController::DiffusionController(std::shared_ptr<const DiffusionModel> model, OcpSpec spec,
                                         SystemModel system, ControllerConfig cfg)
    : model_(std::move(model)), spec_(std::move(spec)), system_(std::move(system)), cfg_(cfg) {
  cfg_.validate();
  spec_.validate(system_);
  if (!model_) throw ConfigError("diffusion controller needs a model");
  if (model_->state_dim() != system_.state_dim() || model_->horizon != spec_.horizon ||
      model_->input_dim != system_.input_dim()) {
    throw DimensionError("diffusion model does not match the OCP");
  }
}

std::vector<ControlSequence> DiffusionController::candidates(const State& x, int t, SamplingCounters* counters) const {
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(cfg_.M));
  for (int m = 0; m < cfg_.M; ++m) {
    rngs.push_back(make_stream(cfg_.seed, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(m)}));
  }
  return sample_sequences(*model_, x, cfg_.guidance_w, rngs, counters);
}

Input DiffusionController::act(const State& x, int t, StepLog& log) {
  SamplingCounters counters;
  const auto cands = candidates(x, t, &counters);
  log.candidate_costs = score_candidates(spec_, system_, x, cands);
  log.chosen_index = select_candidate(log.candidate_costs);
  log.chosen_cost = log.candidate_costs[static_cast<std::size_t>(log.chosen_index)];
  log.reverse_steps = counters.reverse_steps;
  log.cost_rollouts = cands.size();
  return cands[static_cast<std::size_t>(log.chosen_index)].input(0);
}

LocalMpcController::LocalMpcController(OcpSpec spec, SystemModel system, ControllerConfig cfg)
    : spec_(std::move(spec)), system_(std::move(system)), cfg_(cfg) {
  cfg_.validate();
  spec_.validate(system_);
}

Input LocalMpcController::act(const State& x, int, StepLog& log) {
  const ControlSequence guess = previous_ ? shift_warm_start(*previous_)
                                          : project_box(ControlSequence(spec_.horizon, system_.input_dim()), spec_.box);
  SolveResult r = solve_local(spec_, system_, x, guess, cfg_.solver);
  if (r.diverged) throw AllSolvesDiverged("local MPC solve diverged");
  log.candidate_costs = {r.cost};
  log.chosen_index = 0;
  log.chosen_cost = r.cost;
  log.solver_iterations = r.iterations;
  log.local_solves = 1;
  previous_ = std::move(r.sequence);
  return previous_->input(0);
}

MultistartMpcController::MultistartMpcController(OcpSpec spec, SystemModel system, ControllerConfig cfg)
    : spec_(std::move(spec)), system_(std::move(system)), cfg_(cfg) {
  cfg_.validate();
  spec_.validate(system_);
}

std::vector<ControlSequence> MultistartMpcController::guesses(int t) const {
  Rng rng = make_stream(cfg_.seed, {static_cast<std::uint64_t>(t)});
  const int nu = system_.input_dim();
  std::vector<ControlSequence> out;
  for (int m = 0; m < cfg_.M; ++m) {
    ControlSequence u(spec_.horizon, nu);
    for (int i = 0; i < spec_.horizon; ++i) {
      for (int j = 0; j < nu; ++j) {
        double lo = spec_.box.lower[j], hi = spec_.box.upper[j];
        if (cfg_.guess_amplitude > 0.0) {
          lo = std::max(lo, -cfg_.guess_amplitude);
          hi = std::min(hi, cfg_.guess_amplitude);
        }
        u.flat()[i * nu + j] = uniform(rng, lo, hi);
      }
    }
    out.push_back(std::move(u));
  }
  return out;
}

MultistartResult MultistartMpcController::solve(const State& x, int t) const {
  return solve_multistart(spec_, system_, x, guesses(t), cfg_.solver, cfg_.threads);
}

Input MultistartMpcController::act(const State& x, int t, StepLog& log) {
  const MultistartResult ms = solve(x, t);
  log.candidate_costs.clear();
  for (const auto& r : ms.results) {
    log.candidate_costs.push_back(r.cost);
    log.solver_iterations += r.iterations;
  }
  log.chosen_index = ms.best_index;
  log.chosen_cost = ms.results[static_cast<std::size_t>(ms.best_index)].cost;
  log.local_solves = ms.results.size();
  return ms.results[static_cast<std::size_t>(ms.best_index)].sequence.input(0);
}

Eigen::MatrixXd BehaviorClonePolicy::predict_normalized(const Eigen::MatrixXd& states_normalized) const {
  return net.forward(states_normalized);
}

ControlSequence BehaviorClonePolicy::predict(const State& x) const {
  Eigen::VectorXd flat = normalizer.sequence.invert(net.forward(normalizer.state.apply(x)));
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    const Eigen::Index j = i % input_dim;
    if (!std::isfinite(flat[i])) flat[i] = 0.5 * (box.lower[j] + box.upper[j]);
    flat[i] = std::clamp(flat[i], box.lower[j], box.upper[j]);
  }
  return ControlSequence(std::move(flat), input_dim);
}

void BehaviorCloneConfig::validate() const {
  if (depth < 1 || width < 1 || batch_size < 1 || epochs < 1) throw ConfigError("invalid behavior-clone settings");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation fraction must lie in (0, 1)");
  }
}

BehaviorCloneResult train_behavior_clone(const Eigen::MatrixXd& states, const Eigen::MatrixXd& sequences,
                                         const InputBox& box, int horizon, const BehaviorCloneConfig& cfg,
                                         bool globally_optimized, const std::string& spec_digest) {
  cfg.validate();
  box.validate();
  const auto N = static_cast<std::size_t>(states.cols());
  if (N == 0) throw DimensionError("cannot train on an empty dataset");
  if (sequences.cols() != states.cols() || sequences.rows() != horizon * box.dim()) {
    throw DimensionError("training sequences do not match the horizon and input box");
  }
  const auto d = static_cast<double>(sequences.rows());
  Rng init = make_stream(cfg.seed, {2});
  BehaviorClonePolicy policy{
      Mlp::initialized(MlpSpec::uniform(static_cast<int>(states.rows()), cfg.depth, cfg.width, cfg.activation,
                                        static_cast<int>(sequences.rows())),
                       init),
      Normalizer::fit(states, box, horizon),
      box,
      horizon,
      box.dim(),
      globally_optimized,
      spec_digest};
  const Eigen::MatrixXd xs = policy.normalizer.state.apply(states);
  const Eigen::MatrixXd us = policy.normalizer.sequence.apply(sequences);

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = make_stream(cfg.seed, {1});
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_val =
      N < 2 ? 0 : std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(cfg.validation_fraction * N)), 1, N - 1);
  const std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  const auto& val_idx = n_val ? val : train;
  const Eigen::MatrixXd val_x = gather_columns(xs, val_idx, 0, val_idx.size());
  const Eigen::MatrixXd val_u = gather_columns(us, val_idx, 0, val_idx.size());

  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  Adam adam(adam_cfg, policy.net.params());
  BehaviorCloneResult result{policy, {}, 0, INFINITY};
  MlpTape tape;
  Tensors grads;
  Eigen::MatrixXd d_pred;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng = make_stream(cfg.seed, {3, static_cast<std::uint64_t>(epoch)});
    std::shuffle(train.begin(), train.end(), shuffle_rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t from = 0; from < train.size(); from += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t to = std::min(train.size(), from + static_cast<std::size_t>(cfg.batch_size));
      const Eigen::MatrixXd pred = policy.net.forward(gather_columns(xs, train, from, to), tape);
      sum += squared_error_loss(pred, gather_columns(us, train, from, to), &d_pred) / d;
      d_pred /= d;
      policy.net.backward(tape, d_pred, grads);
      adam.step(policy.net.params(), grads);
      ++batches;
    }
    const double train_mse = sum / static_cast<double>(batches);
    const double val_mse = squared_error_loss(policy.net.forward(val_x), val_u, nullptr) / d;
    if (!std::isfinite(train_mse) || !std::isfinite(val_mse)) {
      throw NonFiniteError("behavior-clone training diverged at epoch " + std::to_string(epoch));
    }
    result.log.push_back({epoch, train_mse, val_mse});
    if (val_mse < result.best_validation_mse) {
      result.best_validation_mse = val_mse;
      result.best_epoch = epoch;
      result.policy.net.set_params(policy.net.params());
    }
  }
  return result;
}

BehaviorCloneResult train_behavior_clone(const Dataset& ds, const InputBox& box, const BehaviorCloneConfig& cfg,
                                         bool globally_optimized) {
  Eigen::MatrixXd states, sequences;
  dataset_matrices(ds, states, sequences);
  return train_behavior_clone(states, sequences, box, ds.header.horizon, cfg, globally_optimized,
                              ds.header.spec_digest);
}

GenConfig budget_matched_config(const GenConfig& base, int restarts) {
  if (restarts < 1) throw ConfigError("restarts must be >= 1");
  GenConfig g = base;
  g.restarts = restarts * base.restarts;
  g.perturbations = std::max(1, base.perturbations / restarts);
  const double target = static_cast<double>(base.num_trajectories) * base.perturbations / restarts;
  g.num_trajectories = std::max(1, static_cast<int>(std::lround(target / g.perturbations)));
  return g;
}

void save_behavior_clone(const BehaviorClonePolicy& p, const std::string& path) {
  const auto& s = p.net.spec();
  nlohmann::ordered_json meta;
  meta["input_dim"] = s.input_dim;
  meta["hidden"] = s.hidden;
  std::vector<std::string> acts;
  for (auto a : s.activations) acts.push_back(to_string(a));
  meta["activations"] = acts;
  meta["output_dim"] = s.output_dim;
  meta["horizon"] = p.horizon;
  meta["control_dim"] = p.input_dim;
  meta["globally_optimized"] = p.globally_optimized;
  meta["spec_digest"] = p.spec_digest;
  meta["normalizer"] = {{"state_offset", vector_json(p.normalizer.state.offset)},
                        {"state_scale", vector_json(p.normalizer.state.scale)},
                        {"sequence_offset", vector_json(p.normalizer.sequence.offset)},
                        {"sequence_scale", vector_json(p.normalizer.sequence.scale)}};
  meta["box"] = {{"lower", vector_json(p.box.lower)}, {"upper", vector_json(p.box.upper)}};
  save_checkpoint({"behavior_clone", s.digest(), meta.dump(), p.net.params()}, path);
}

BehaviorClonePolicy load_behavior_clone(const std::string& path) {
  const Checkpoint c = load_checkpoint(path, "behavior_clone");
  try {
    const auto meta = nlohmann::json::parse(c.meta);
    MlpSpec s;
    s.input_dim = meta.at("input_dim").get<int>();
    s.hidden = meta.at("hidden").get<std::vector<int>>();
    for (const auto& a : meta.at("activations").get<std::vector<std::string>>()) s.activations.push_back(parse_activation(a));
    s.output_dim = meta.at("output_dim").get<int>();
    if (s.digest() != c.digest) throw FormatError("architecture digest mismatch in '" + path + "'");
    Mlp net(s);
    net.set_params(c.tensors);
    BehaviorClonePolicy p{std::move(net),
                          {},
                          {},
                          meta.at("horizon").get<int>(),
                          meta.at("control_dim").get<int>(),
                          meta.at("globally_optimized").get<bool>(),
                          meta.at("spec_digest").get<std::string>()};
    const auto& jn = meta.at("normalizer");
    p.normalizer.state = {json_vector(jn.at("state_offset")), json_vector(jn.at("state_scale"))};
    p.normalizer.sequence = {json_vector(jn.at("sequence_offset")), json_vector(jn.at("sequence_scale"))};
    p.box.lower = json_vector(meta.at("box").at("lower"));
    p.box.upper = json_vector(meta.at("box").at("upper"));
    p.box.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed behavior-clone metadata in '" + path + "': " + e.what());
  }
}

BehaviorCloneController::BehaviorCloneController(std::shared_ptr<const BehaviorClonePolicy> policy)
    : policy_(std::move(policy)) {
  if (!policy_) throw ConfigError("behavior-clone controller needs a policy");
}

Input BehaviorCloneController::act(const State& x, int, StepLog& log) {
  const ControlSequence u = policy_->predict(x);
  log.candidate_costs.clear();
  log.chosen_index = 0;
  log.chosen_cost = NAN;
  return u.input(0);
}

RolloutLog closed_loop_rollout(Controller& controller, const Plant& plant, const OcpSpec& spec, const State& x0,
                               int steps) {
  if (steps < 1) throw ConfigError("rollout needs at least one step");
  RolloutLog log;
  log.controller = controller.name();
  controller.reset();
  State x = x0;
  log.states.push_back(x);
  double cost = 0.0;
  for (int t = 0; t < steps; ++t) {
    StepLog st;
    st.state = x;
    const auto t0 = Clock::now();
    st.applied = controller.act(x, t, st);
    st.wall_time = seconds_since(t0);
    if (!spec.box.contains(st.applied)) throw Error("controller " + log.controller + " applied an infeasible input");
    cost += stage_cost(spec, x, st.applied);
    log.steps.push_back(std::move(st));
    x = plant(x, log.steps.back().applied);
    if (!x.allFinite()) {
      log.aborted = true;
      log.closed_loop_cost = INFINITY;
      return log;
    }
    log.states.push_back(x);
  }
  log.closed_loop_cost = cost + terminal_cost(spec, x);
  return log;
}

RolloutLog closed_loop_rollout(Controller& controller, const SystemModel& model, const OcpSpec& spec,
                               const State& x0, int steps) {
  model.check_state(x0);
  const Plant plant = [&model](const State& x, const Input& u) -> State {
    try {
      return model.step(x, u);
    } catch (const NonFiniteError&) {
      return State::Constant(x.size(), NAN);
    }
  };
  return closed_loop_rollout(controller, plant, spec, x0, steps);
}

void export_rollout_csv(const RolloutLog& log, const std::string& path, bool with_timing) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  const auto nx = log.states.empty() ? 0 : log.states.front().size();
  const auto nu = log.steps.empty() ? 0 : log.steps.front().applied.size();
  out << "step";
  for (Eigen::Index i = 0; i < nx; ++i) out << ",x" << i;
  for (Eigen::Index i = 0; i < nu; ++i) out << ",u" << i;
  out << ",chosen_index,chosen_cost,candidates,min_candidate_cost,max_candidate_cost,solver_iterations,"
         "reverse_steps,cost_rollouts,local_solves";
  out << (with_timing ? ",wall_time\n" : "\n");
  char buf[40];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (std::size_t t = 0; t < log.steps.size(); ++t) {
    const auto& s = log.steps[t];
    out << t;
    for (double v : s.state) out << ',' << num(v);
    for (double v : s.applied) out << ',' << num(v);
    double lo = INFINITY, hi = -INFINITY;
    for (double c : s.candidate_costs) lo = std::min(lo, c), hi = std::max(hi, c);
    if (s.candidate_costs.empty()) lo = hi = NAN;
    out << ',' << s.chosen_index << ',' << num(s.chosen_cost) << ',' << s.candidate_costs.size() << ',' << num(lo)
        << ',' << num(hi) << ',' << s.solver_iterations << ',' << s.reverse_steps << ',' << s.cost_rollouts << ','
        << s.local_solves;
    if (with_timing) out << ',' << num(s.wall_time);
    out << '\n';
  }
}

}  // namespace diffmpc
