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

#include "diffmpc/solver.hpp"

#include <chrono>
#include <cmath>
#include <deque>
#include <limits>

#include "diffmpc/parallel.hpp"

namespace diffmpc {

namespace {

Eigen::VectorXd clamp(const Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

struct CurvaturePair {
  Eigen::VectorXd s;
  Eigen::VectorXd y;
  double rho;
};

// Two-loop recursion: approximates -H g.
Eigen::VectorXd lbfgs_direction(const std::deque<CurvaturePair>& pairs, const Eigen::VectorXd& g) {
  Eigen::VectorXd q = g;
  std::vector<double> alpha(pairs.size());
  for (std::size_t k = pairs.size(); k-- > 0;) {
    alpha[k] = pairs[k].rho * pairs[k].s.dot(q);
    q -= alpha[k] * pairs[k].y;
  }
  const auto& last = pairs.back();
  q *= last.s.dot(last.y) / last.y.squaredNorm();
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const double beta = pairs[k].rho * pairs[k].y.dot(q);
    q += (alpha[k] - beta) * pairs[k].s;
  }
  return -q;
}

double safe_eval(const BoxObjective& f, const Eigen::VectorXd& x, Eigen::VectorXd* g) {
  try {
    const double v = f(x, g);
    if (!std::isfinite(v) || (g != nullptr && !g->allFinite())) return std::numeric_limits<double>::infinity();
    return v;
  } catch (const NonFiniteError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

void SolverConfig::validate() const {
  if (max_iterations < 1) throw ConfigError("solver max_iterations must be >= 1");
  if (!(stationarity_tol > 0.0)) throw ConfigError("solver tolerance must be positive");
  if (!(initial_step > 0.0)) throw ConfigError("solver initial step must be positive");
  if (!(armijo > 0.0 && armijo < 1.0)) throw ConfigError("Armijo constant must lie in (0, 1)");
  if (!(backtrack > 0.0 && backtrack < 1.0)) throw ConfigError("backtracking factor must lie in (0, 1)");
  if (memory < 0) throw ConfigError("quasi-Newton memory must be >= 0");
  if (max_backtracks < 1) throw ConfigError("max_backtracks must be >= 1");
}

ControlSequence project_box(const ControlSequence& u, const InputBox& box) {
  if (u.input_dim() != box.dim()) throw DimensionError("project_box: input width mismatch");
  ControlSequence out = u;
  for (int i = 0; i < u.horizon(); ++i) out.input(i) = u.input(i).cwiseMax(box.lower).cwiseMin(box.upper);
  return out;
}

double projected_gradient_norm(const ControlSequence& u, const Eigen::VectorXd& gradient, const InputBox& box) {
  ControlSequence stepped(u.flat() - gradient, u.input_dim());
  return (u.flat() - project_box(stepped, box).flat()).lpNorm<Eigen::Infinity>();
}

BoxMinimum minimize_box(const BoxObjective& objective, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                        const Eigen::VectorXd& start, const SolverConfig& cfg) {
  cfg.validate();
  BoxMinimum out;
  out.x = clamp(start, lower, upper);
  out.value = objective(out.x, &out.gradient);
  if (!std::isfinite(out.value) || !out.gradient.allFinite()) {
    throw NonFiniteError("objective is not finite at the starting point");
  }
  out.history.push_back(out.value);

  std::deque<CurvaturePair> pairs;
  Eigen::VectorXd x_new, g_new;
  while (true) {
    out.projected_gradient_norm = (out.x - clamp(out.x - out.gradient, lower, upper)).lpNorm<Eigen::Infinity>();
    if (out.projected_gradient_norm <= cfg.stationarity_tol) {
      out.converged = true;
      break;
    }
    if (out.iterations >= cfg.max_iterations) break;

    // Variables held at a bound by the gradient are frozen for this step.
    const Eigen::ArrayXd lo_active = ((out.x.array() <= lower.array()) && (out.gradient.array() > 0.0)).cast<double>();
    const Eigen::ArrayXd hi_active = ((out.x.array() >= upper.array()) && (out.gradient.array() < 0.0)).cast<double>();
    const Eigen::ArrayXd free = 1.0 - lo_active - hi_active;
    const Eigen::VectorXd g_free = (out.gradient.array() * free).matrix();

    bool accepted = false;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      Eigen::VectorXd d;
      if (!pairs.empty()) {
        d = (lbfgs_direction(pairs, g_free).array() * free).matrix();
        if (!(d.dot(out.gradient) < 0.0)) d.resize(0);
      }
      if (d.size() == 0) {
        pairs.clear();
        d = -g_free * (cfg.initial_step / g_free.lpNorm<Eigen::Infinity>());
      }

      double step = 1.0;
      for (int bt = 0; bt < cfg.max_backtracks; ++bt, step *= cfg.backtrack) {
        x_new = clamp(out.x + step * d, lower, upper);
        const double decrease = out.gradient.dot(x_new - out.x);
        if (!(decrease < 0.0)) continue;
        const double f_new = safe_eval(objective, x_new, &g_new);
        if (f_new <= out.value + cfg.armijo * decrease) {
          const Eigen::VectorXd s = x_new - out.x;
          const Eigen::VectorXd y = g_new - out.gradient;
          const double sy = s.dot(y);
          if (cfg.memory > 0 && sy > 1e-12 * s.norm() * y.norm()) {
            pairs.push_back({s, y, 1.0 / sy});
            if (static_cast<int>(pairs.size()) > cfg.memory) pairs.pop_front();
          }
          out.x = x_new;
          out.value = f_new;
          out.gradient = g_new;
          out.history.push_back(f_new);
          accepted = true;
          break;
        }
      }
      if (!accepted && pairs.empty()) break;  // steepest descent failed too
      if (!accepted) pairs.clear();
    }
    if (!accepted) break;
    ++out.iterations;
  }
  return out;
}

SolveResult solve_local(const OcpSpec& spec, const SystemModel& model, const State& x0, const ControlSequence& guess,
                        const SolverConfig& cfg) {
  if (guess.horizon() != spec.horizon || guess.input_dim() != model.input_dim()) {
    throw DimensionError("initial guess does not match the OCP horizon");
  }
  if (!guess.all_finite()) throw NonFiniteError("initial guess contains non-finite entries");
  const auto t0 = std::chrono::steady_clock::now();

  const int nu = model.input_dim();
  const Eigen::VectorXd lower = spec.box.lower.replicate(spec.horizon, 1);
  const Eigen::VectorXd upper = spec.box.upper.replicate(spec.horizon, 1);
  auto objective = [&](const Eigen::VectorXd& flat, Eigen::VectorXd* grad) {
    const ControlSequence u(flat, nu);
    if (grad == nullptr) return total_cost(spec, model, x0, u);
    auto cg = cost_gradient(spec, model, x0, u);
    *grad = std::move(cg.gradient);
    return cg.cost;
  };
  BoxMinimum m = minimize_box(objective, lower, upper, guess.flat(), cfg);

  SolveResult r;
  r.sequence = ControlSequence(std::move(m.x), nu);
  r.cost = m.value;
  r.iterations = m.iterations;
  r.converged = m.converged;
  r.projected_gradient_norm = m.projected_gradient_norm;
  r.cost_history = std::move(m.history);
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

MultistartResult solve_multistart(const OcpSpec& spec, const SystemModel& model, const State& x0,
                                  const std::vector<ControlSequence>& guesses, const SolverConfig& cfg, int threads) {
  if (guesses.empty()) throw ConfigError("solve_multistart needs at least one guess");
  MultistartResult out;
  out.results.resize(guesses.size());
  parallel_for(guesses.size(), threads, [&](std::size_t i) {
    try {
      out.results[i] = solve_local(spec, model, x0, guesses[i], cfg);
    } catch (const NonFiniteError&) {
      SolveResult& r = out.results[i];
      r.sequence = project_box(guesses[i], spec.box);
      r.cost = std::numeric_limits<double>::infinity();
      r.diverged = true;
    }
  });
  bool any = false;
  for (std::size_t i = 0; i < out.results.size(); ++i) {
    if (out.results[i].diverged) continue;
    if (!any || out.results[i].cost < out.results[out.best_index].cost) out.best_index = i;
    any = true;
  }
  if (!any) throw AllSolvesDiverged("every multistart solve diverged");
  return out;
}

ControlSequence shift_warm_start(const ControlSequence& previous) {
  ControlSequence out = previous;
  const int h = previous.horizon();
  for (int i = 0; i + 1 < h; ++i) out.input(i) = previous.input(i + 1);
  return out;
}

}  // namespace diffmpc
