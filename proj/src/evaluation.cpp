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

#include "diffmpc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/non_central_chi_squared.hpp>

#include "diffmpc/metrics.hpp"

namespace diffmpc {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  return out;
}

double wrap_angle(double a) { return std::remainder(a, 2.0 * std::numbers::pi); }

}  // namespace

void MultimodalityConfig::validate() const {
  if (samples < 2) throw ConfigError("multimodality needs at least two samples per state");
  if (!(tau > 0.0)) throw ConfigError("separation threshold must be positive");
}

std::vector<double> multimodality_percentage(const SequenceSampler& sampler,
                                             const std::vector<std::vector<State>>& probe_trajectories,
                                             const MultimodalityConfig& cfg) {
  cfg.validate();
  std::size_t longest = 0;
  for (const auto& tr : probe_trajectories) longest = std::max(longest, tr.size());
  std::vector<double> pct(longest, 0.0);
  for (std::size_t t = 0; t < longest; ++t) {
    int present = 0, multimodal = 0;
    for (std::size_t j = 0; j < probe_trajectories.size(); ++j) {
      if (t >= probe_trajectories[j].size()) continue;
      ++present;
      const auto samples = sampler(probe_trajectories[j][t], (static_cast<std::uint64_t>(j) << 32) | t, cfg.samples);
      multimodal += has_separated_pair(samples, cfg.tau) ? 1 : 0;
    }
    pct[t] = present ? 100.0 * multimodal / present : 0.0;
  }
  return pct;
}

SequenceSampler diffusion_sampler(std::shared_ptr<const DiffusionModel> model, double guidance_w, std::uint64_t seed) {
  return [model = std::move(model), guidance_w, seed](const State& x, std::uint64_t probe, int count) {
    std::vector<Rng> rngs;
    for (int m = 0; m < count; ++m) rngs.push_back(make_stream(seed, {probe, static_cast<std::uint64_t>(m)}));
    return sample_sequences(*model, x, guidance_w, rngs);
  };
}

SequenceSampler multistart_sampler(const OcpSpec& spec, const SystemModel& model, const SolverConfig& solver,
                                   std::uint64_t seed) {
  return [spec, model, solver, seed](const State& x, std::uint64_t probe, int count) {
    Rng rng = make_stream(seed, {probe});
    std::vector<ControlSequence> out;
    std::optional<SolveResult> best;
    for (int m = 0; m < count; ++m) {
      ControlSequence guess(spec.horizon, model.input_dim());
      for (Eigen::Index i = 0; i < guess.flat().size(); ++i) {
        const auto j = i % model.input_dim();
        guess.flat()[i] = uniform(rng, spec.box.lower[j], spec.box.upper[j]);
      }
      SolveResult r = solve_local(spec, model, x, guess, solver);
      if (r.diverged) continue;
      if (r.converged) out.push_back(r.sequence);
      if (!best || r.cost < best->cost) best = std::move(r);
    }
    if (out.empty() && best) out.push_back(std::move(best->sequence));
    return out;
  };
}

bool swing_up_success(SystemKind kind, const State& x, double tolerance) {
  switch (kind) {
    case SystemKind::CartPole:
      return std::abs(wrap_angle(x[2] - std::numbers::pi)) < tolerance;
    case SystemKind::Pendubot:
      return std::abs(wrap_angle(x[0] - std::numbers::pi)) < tolerance && std::abs(wrap_angle(x[1])) < tolerance;
    case SystemKind::DoubleCartPole:
      return std::abs(wrap_angle(x[2])) < tolerance && std::abs(wrap_angle(x[4])) < tolerance;
  }
  return false;
}

const ControllerSummary& ExperimentReport::row(const std::string& controller) const {
  for (const auto& r : rows)
    if (r.controller == controller) return r;
  throw Error("report has no row for controller '" + controller + "'");
}

ExperimentReport run_comparison(const SystemModel& model, const OcpSpec& spec,
                                const std::vector<NamedController>& controllers,
                                const std::vector<State>& initial_states, int steps, std::uint64_t seed,
                                const std::string& config_digest, std::vector<RolloutLog>* logs) {
  if (controllers.empty() || initial_states.empty()) throw ConfigError("comparison needs controllers and initial states");
  ExperimentReport report{config_digest, seed, {}};
  double max_cost = 0.0;
  for (const auto& nc : controllers) {
    ControllerSummary s;
    s.controller = nc.name;
    double time_sum = 0.0;
    std::size_t time_count = 0;
    for (std::size_t run = 0; run < initial_states.size(); ++run) {
      auto ctrl = nc.make(static_cast<int>(run));
      RolloutLog log = closed_loop_rollout(*ctrl, model, spec, initial_states[run], steps);
      s.costs.push_back(log.closed_loop_cost);
      s.success.push_back(!log.aborted && swing_up_success(model.kind(), log.states.back()));
      s.aborted += log.aborted ? 1 : 0;
      for (const auto& st : log.steps) {
        time_sum += st.wall_time;
        s.max_step_time = std::max(s.max_step_time, st.wall_time);
        ++time_count;
      }
      if (std::isfinite(log.closed_loop_cost)) max_cost = std::max(max_cost, log.closed_loop_cost);
      if (logs) logs->push_back(std::move(log));
    }
    s.median_cost = median(s.costs);
    s.q25_cost = quantile(s.costs, 0.25);
    s.q75_cost = quantile(s.costs, 0.75);
    s.mean_step_time = time_count ? time_sum / static_cast<double>(time_count) : 0.0;
    s.success_rate = static_cast<double>(std::count(s.success.begin(), s.success.end(), true)) /
                     static_cast<double>(s.success.size());
    report.rows.push_back(std::move(s));
  }
  for (auto& r : report.rows) r.normalized_median = max_cost > 0.0 ? r.median_cost / max_cost : 0.0;
  return report;
}

std::vector<State> sample_initial_states(const StateBox& box, int n, std::uint64_t seed) {
  std::vector<State> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = make_stream(seed, {static_cast<std::uint64_t>(i)});
    out.push_back(box.sample(rng));
  }
  return out;
}

void write_report_csv(const ExperimentReport& report, const std::string& path, bool with_timing) {
  auto out = open_csv(path);
  out << "controller,runs,median_cost,q25_cost,q75_cost,normalized_median,success_rate,aborted,seed,config_digest";
  out << (with_timing ? ",mean_step_time,max_step_time\n" : "\n");
  for (const auto& r : report.rows) {
    out << r.controller << ',' << r.costs.size() << ',' << fmt(r.median_cost) << ',' << fmt(r.q25_cost) << ','
        << fmt(r.q75_cost) << ',' << fmt(r.normalized_median) << ',' << fmt(r.success_rate) << ',' << r.aborted << ','
        << report.seed << ',' << report.config_digest;
    if (with_timing) out << ',' << fmt(r.mean_step_time) << ',' << fmt(r.max_step_time);
    out << '\n';
  }
}

std::vector<AblationRow> run_ablation(const std::string& parameter, const std::vector<double>& grid,
                                      const std::function<ExperimentReport(double)>& evaluate) {
  if (grid.empty()) throw ConfigError("ablation grid is empty");
  std::vector<AblationRow> rows;
  for (double v : grid) {
    const ExperimentReport rep = evaluate(v);
    for (const auto& r : rep.rows) rows.push_back({parameter, v, r, rep.config_digest, rep.seed});
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path, bool with_timing) {
  auto out = open_csv(path);
  out << "parameter,value,controller,runs,median_cost,q25_cost,q75_cost,success_rate,seed,config_digest";
  out << (with_timing ? ",mean_step_time,max_step_time\n" : "\n");
  for (const auto& a : rows) {
    const auto& r = a.summary;
    out << a.parameter << ',' << fmt(a.value) << ',' << r.controller << ',' << r.costs.size() << ','
        << fmt(r.median_cost) << ',' << fmt(r.q25_cost) << ',' << fmt(r.q75_cost) << ',' << fmt(r.success_rate) << ','
        << a.seed << ',' << a.config_digest;
    if (with_timing) out << ',' << fmt(r.mean_step_time) << ',' << fmt(r.max_step_time);
    out << '\n';
  }
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("slope needs at least two paired points");
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::VectorXd lx(n), ly(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(x[static_cast<std::size_t>(i)] > 0.0 && y[static_cast<std::size_t>(i)] > 0.0)) {
      throw DimensionError("log-log slope needs positive values");
    }
    lx[i] = std::log(x[static_cast<std::size_t>(i)]);
    ly[i] = std::log(y[static_cast<std::size_t>(i)]);
  }
  const double mx = lx.mean(), my = ly.mean();
  return ((lx.array() - mx) * (ly.array() - my)).sum() / (lx.array() - mx).square().sum();
}

double theorem2_bound(double p_b, double delta_tilde, int M) {
  if (M < 1) throw ConfigError("M must be >= 1");
  return std::pow(1.0 - p_b + delta_tilde, M);
}

BimodalToy BimodalToy::standard() {
  BimodalToy t;
  t.global_mode = Eigen::VectorXd::LinSpaced(t.horizon, 1.2, 0.4);
  t.local_mode = -Eigen::VectorXd::LinSpaced(t.horizon, 0.8, 1.4);
  return t;
}

Eigen::VectorXd BimodalToy::sample(Rng& rng) const {
  const bool global = uniform(rng, 0.0, 1.0) < global_mass;
  Eigen::VectorXd u = global ? global_mode : local_mode;
  for (Eigen::Index i = 0; i < u.size(); ++i) u[i] += spread * standard_normal(rng);
  return u;
}

double BimodalToy::ball_mass(double eps) const {
  if (eps <= 0.0) return 0.0;
  const double r2 = (eps / spread) * (eps / spread);
  const double dof = static_cast<double>(horizon);
  const double lambda = (local_mode - global_mode).squaredNorm() / (spread * spread);
  const double near = boost::math::cdf(boost::math::chi_squared(dof), r2);
  const double far = boost::math::cdf(boost::math::non_central_chi_squared(dof, lambda), r2);
  return global_mass * near + (1.0 - global_mass) * far;
}

double BimodalToy::radius_for_mass(double p_b) const {
  if (!(p_b > 0.0 && p_b < 1.0)) throw ConfigError("ball mass must lie in (0, 1)");
  double lo = 0.0, hi = 1.0;
  while (ball_mass(hi) < p_b) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (ball_mass(mid) < p_b ? lo : hi) = mid;
  }
  return hi;
}

Theorem2Result theorem2_check(const BimodalToy& toy, const std::function<Eigen::VectorXd(Rng&)>& draw, int M,
                              double eps, int trials, int mass_samples, std::uint64_t seed) {
  if (trials < 1 || mass_samples < 1) throw ConfigError("theorem check needs trials and mass samples");
  Theorem2Result r;
  r.M = M;
  r.trials = trials;
  r.eps = eps;
  r.p_b = toy.ball_mass(eps);
  Rng mass_rng = make_stream(seed, {1});
  int inside = 0;
  for (int i = 0; i < mass_samples; ++i) inside += (draw(mass_rng) - toy.global_mode).norm() <= eps ? 1 : 0;
  r.delta_tilde = std::max(0.0, r.p_b - static_cast<double>(inside) / mass_samples);
  r.bound = theorem2_bound(r.p_b, r.delta_tilde, M);
  r.inconclusive = r.delta_tilde >= r.p_b;
  Rng trial_rng = make_stream(seed, {2});
  int failures = 0;
  for (int t = 0; t < trials; ++t) {
    double best = INFINITY;
    for (int m = 0; m < M; ++m) best = std::min(best, (draw(trial_rng) - toy.global_mode).norm());
    failures += best > eps ? 1 : 0;
  }
  r.empirical_failure = static_cast<double>(failures) / trials;
  r.standard_error = std::sqrt(r.bound * (1.0 - r.bound) / trials);
  r.within_bound = r.empirical_failure <= r.bound + 3.0 * r.standard_error;
  return r;
}

double median_nearest_distance(const std::vector<State>& probes, const Dataset& ds) {
  if (probes.empty() || ds.records.empty()) throw DimensionError("coverage needs probes and a nonempty dataset");
  std::vector<double> d;
  d.reserve(probes.size());
  for (const auto& p : probes) {
    double best = INFINITY;
    for (const auto& r : ds.records) best = std::min(best, (r.state - p).squaredNorm());
    d.push_back(std::sqrt(best));
  }
  return median(d);
}

CoverageResult theorem1_coverage_check(const std::vector<Dataset>& datasets, const std::vector<State>& probes) {
  if (datasets.size() < 2) throw ConfigError("coverage check needs at least two budgets");
  CoverageResult c;
  for (const auto& ds : datasets) {
    c.budgets.push_back(ds.records.size());
    c.median_distance.push_back(median_nearest_distance(probes, ds));
  }
  c.strictly_decreasing = true;
  for (std::size_t i = 1; i < c.median_distance.size(); ++i)
    c.strictly_decreasing = c.strictly_decreasing && c.median_distance[i] < c.median_distance[i - 1];
  return c;
}

}  // namespace diffmpc
