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

// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers to run a subset.

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include "desk_cache.hpp"
#include "diffmpc/datagen.hpp"
#include "diffmpc/diffusion.hpp"
#include "diffmpc/evaluation.hpp"
#include "diffmpc/metrics.hpp"
#include "diffmpc/ocp.hpp"
#include "diffmpc/solver.hpp"

using namespace diffmpc;
using namespace diffmpc::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double number(const CsvRow& row, const std::string& key) { return std::stod(row.at(key)); }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(DIFFMPC_CACHE_DIR) / "acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void require_ok(const CliRun& r, const std::string& what) {
  if (r.code != 0) throw std::runtime_error(what + " exited " + std::to_string(r.code) + ": " + r.err);
}

// 1 ---------------------------------------------------------------------------
Verdict gradient_correctness() {
  double worst = 0.0;
  int instances = 0;
  for (SystemKind kind : {SystemKind::CartPole, SystemKind::Pendubot, SystemKind::DoubleCartPole}) {
    const SystemModel m(kind);
    const double bound = kind == SystemKind::Pendubot ? 5.0 : 100.0;
    const OcpSpec s = OcpSpec::benchmark(kind, bound);
    const StateBox chi = benchmark_initial_states(kind);
    for (int i = 0; i < 100; ++i, ++instances) {
      Rng rng = make_stream(1001, {static_cast<std::uint64_t>(kind), static_cast<std::uint64_t>(i)});
      const State x0 = chi.sample(rng);
      ControlSequence u(s.horizon, m.input_dim());
      for (auto& v : u.flat()) v = uniform(rng, -bound, bound);
      const Eigen::VectorXd g = cost_gradient(s, m, x0, u).gradient;
      Eigen::VectorXd fd(g.size());
      for (Eigen::Index k = 0; k < fd.size(); ++k) {
        const double h = 1e-5 * std::max(1.0, std::abs(u.flat()[k]));
        auto f = [&](double d) {
          ControlSequence v = u;
          v.flat()[k] += d;
          return total_cost(s, m, x0, v);
        };
        // fourth-order central stencil
        fd[k] = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12.0 * h);
      }
      worst = std::max(worst, (g - fd).norm() / fd.norm());
    }
  }
  return {worst < 1e-6, std::to_string(instances) + " instances, worst relative error " + fmt("%.3g", worst)};
}

// 2 ---------------------------------------------------------------------------
Verdict solver_soundness() {
  const SystemModel m(SystemKind::CartPole);
  const OcpSpec s = OcpSpec::benchmark(SystemKind::CartPole, 100);
  const StateBox chi = benchmark_initial_states(SystemKind::CartPole);
  const SolverConfig cfg;
  int converged = 0, violations = 0;
  for (int i = 0; i < 50; ++i) {
    Rng rng = make_stream(2002, {static_cast<std::uint64_t>(i)});
    const State x0 = chi.sample(rng);
    const ControlSequence guess = sample_initial_guess(100.0, s.horizon, 1, rng);
    const SolveResult r = solve_local(s, m, x0, guess, cfg);
    bool ok = s.box.contains(r.sequence);
    for (std::size_t k = 1; k < r.cost_history.size(); ++k) ok = ok && r.cost_history[k] <= r.cost_history[k - 1];
    if (r.converged) {
      ++converged;
      const auto g = cost_gradient(s, m, x0, r.sequence).gradient;
      ok = ok && projected_gradient_norm(r.sequence, g, s.box) <= 1e-4;
    }
    violations += ok ? 0 : 1;
  }
  return {violations == 0 && converged > 0,
          std::to_string(converged) + "/50 converged, " + std::to_string(violations) + " violations"};
}

// 3 ---------------------------------------------------------------------------
int clusters_from_rest(double theta0, std::uint64_t seed) {
  const SystemModel m(SystemKind::CartPole);
  const OcpSpec s = OcpSpec::benchmark(SystemKind::CartPole, 100);
  State x0 = State::Zero(4);
  x0[2] = theta0;
  std::vector<ControlSequence> guesses;
  Rng rng = make_stream(3003, {seed});
  for (int g = 0; g < 20; ++g) guesses.push_back(sample_initial_guess(100.0, s.horizon, 1, rng));
  const MultistartResult ms = solve_multistart(s, m, x0, guesses, SolverConfig{});
  std::vector<ControlSequence> sols;
  for (const auto& r : ms.results)
    if (!r.diverged) sols.push_back(r.sequence);
  return threshold_cluster_count(sols, default_mode_threshold(s.box, s.horizon));
}

Verdict ocp_bimodality() {
  int two = 0;
  std::ostringstream counts;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int c = clusters_from_rest(0.0, seed);
    two += c == 2 ? 1 : 0;
    counts << c << (seed + 1 < 20 ? "," : "");
  }
  int two_corner = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) two_corner += clusters_from_rest(1.8, seed) == 2 ? 1 : 0;
  return {two >= 18, "theta0=0: " + std::to_string(two) + "/20 seeds with exactly 2 clusters (counts " + counts.str() +
                         "); diagnostic theta0=1.8: " + std::to_string(two_corner) + "/20"};
}

// 4 ---------------------------------------------------------------------------
Verdict mode_recovery() {
  BimodalToy toy = BimodalToy::standard();
  toy.spread = 0.1;
  const int records = 4000;
  Eigen::MatrixXd states = Eigen::MatrixXd::Zero(1, records);
  Eigen::MatrixXd seqs(toy.horizon, records);
  Rng data_rng = make_stream(4004, {0});
  for (int i = 0; i < records; ++i) seqs.col(i) = toy.sample(data_rng);
  DiffusionTrainConfig cfg;
  cfg.epochs = 600;
  cfg.batch_size = 128;
  cfg.learning_rate = 1e-3;
  cfg.p_uncond = 0.0;
  cfg.seed = 4004;
  const TrainResult res = train_diffusion(states, seqs, InputBox::symmetric(1, 3.0), toy.horizon, cfg);
  // radius holding 99.9% of either true mode
  const double eps = toy.spread * std::sqrt(boost::math::quantile(boost::math::chi_squared(toy.horizon), 0.999));
  int global = 0, local = 0, within = 0;
  const int draws = 1000;
  for (int d = 0; d < draws; ++d) {
    Rng rng = make_stream(4004, {1, static_cast<std::uint64_t>(d)});
    const Eigen::VectorXd u = sample_sequence(res.model, State::Zero(1), 0.0, rng).flat();
    const double dg = (u - toy.global_mode).norm();
    const double dl = (u - toy.local_mode).norm();
    (dg < dl ? global : local) += 1;
    within += std::min(dg, dl) <= eps ? 1 : 0;
  }
  const double fg = double(global) / draws, fl = double(local) / draws, fw = double(within) / draws;
  return {fg >= 0.2 && fl >= 0.2 && fw >= 0.95,
          "mode frequencies " + fmt("%.3f", fg) + "/" + fmt("%.3f", fl) + ", within eps=" + fmt("%.3f", eps) + ": " +
              fmt("%.3f", fw)};
}

// 5 ---------------------------------------------------------------------------
Verdict multimodality_tracking(double& elapsed) {
  const DeskCache desk = desk_cache();
  const auto t0 = Clock::now();
  const fs::path out = scratch("multimodality");
  for (const char* f : {"model.bin"}) fs::copy_file(desk.dir / f, out / f);
  require_ok(run_cli({"multimodality", "--config", desk.config.string(), "--out", out.string()}), "multimodality");
  elapsed = desk.build_seconds + seconds_since(t0);
  const auto rows = read_csv(out / "multimodality.csv");
  double gap = 0.0, late_d = 0.0, late_m = 0.0, early_m = 0.0;
  const std::size_t n = rows.size(), late = std::min<std::size_t>(10, n);
  for (std::size_t t = 0; t < std::min<std::size_t>(20, n); ++t) {
    gap = std::max(gap, std::abs(number(rows[t], "diffusion") - number(rows[t], "multistart")));
    early_m += number(rows[t], "multistart") / std::min<std::size_t>(20, n);
  }
  for (std::size_t t = n - late; t < n; ++t) {
    late_d += number(rows[t], "diffusion") / late;
    late_m += number(rows[t], "multistart") / late;
  }
  return {gap <= 15.0 && late_d <= 10.0 && late_m <= 10.0,
          "max gap over first 20 steps " + fmt("%.1f", gap) + " pp; mean over last " + std::to_string(late) +
              " steps diffusion " + fmt("%.1f", late_d) + "%, multistart " + fmt("%.1f", late_m) +
              "%; multistart mean over first 20 " + fmt("%.1f", early_m) + "%"};
}

// 6 ---------------------------------------------------------------------------
Verdict cost_ordering(double& elapsed) {
  const DeskCache desk = desk_cache();
  const auto t0 = Clock::now();
  const fs::path out = scratch("compare");
  for (const char* f : {"model.bin", "nn.bin", "nn_star.bin"}) fs::copy_file(desk.dir / f, out / f);
  require_ok(run_cli({"compare", "--config", desk.config.string(), "--out", out.string()}), "compare");
  elapsed = desk.build_seconds + seconds_since(t0);
  std::map<std::string, CsvRow> by;
  for (const auto& r : read_csv(out / "compare.csv")) by[r.at("controller")] = r;
  const double d = number(by.at("diffusion"), "median_cost");
  const double ms = number(by.at("multistart"), "median_cost");
  const double nn = number(by.at("nn"), "median_cost");
  const double iqr_d = number(by.at("diffusion"), "q75_cost") - number(by.at("diffusion"), "q25_cost");
  const double iqr_nn = number(by.at("nn"), "q75_cost") - number(by.at("nn"), "q25_cost");
  const double iqr = std::max(iqr_d, iqr_nn);
  std::ostringstream os;
  os << "medians:";
  for (const auto& [name, row] : by) os << ' ' << name << '=' << fmt("%.1f", number(row, "median_cost"));
  os << "; diffusion/multistart " << fmt("%.3f", d / ms) << "; nn - diffusion " << fmt("%.1f", nn - d)
     << " vs IQR " << fmt("%.1f", iqr);
  return {d <= 1.1 * ms && d < nn && nn - d > iqr, os.str()};
}

// 7 and 8 share the toy/coverage driver -------------------------------------
Verdict theorem2(double& elapsed) {
  const auto t0 = Clock::now();
  const double b = theorem2_bound(0.3, 0.1, 10);
  const bool formula = std::abs(b - 0.1074) < 5e-5;
  const DeskCache desk = desk_cache();
  const fs::path out = scratch("theorem2");
  require_ok(run_cli({"check-theorems", "--config", desk.config.string(), "--out", out.string(), "--set",
                      "theorems.run_coverage=false", "--set", "theorems.trials=2000"}),
             "check-theorems");
  elapsed = seconds_since(t0);
  bool ok = formula;
  std::ostringstream os;
  os << "bound(0.3,0.1,10)=" << fmt("%.6f", b);
  for (const auto& r : read_csv(out / "theorem2.csv")) {
    const bool inconclusive = r.at("inconclusive") == "1";
    const bool within = r.at("within_bound") == "1";
    const double recomputed = theorem2_bound(number(r, "p_b"), number(r, "delta_tilde"), std::stoi(r.at("M")));
    ok = ok && std::abs(recomputed - number(r, "bound")) <= 1e-15;
    if (r.at("model") == "exact") ok = ok && !inconclusive && within;
    else ok = ok && (inconclusive || within);
    os << "; " << r.at("model") << " M=" << r.at("M") << " failure " << fmt("%.4f", number(r, "empirical_failure"))
       << " bound " << fmt("%.4f", number(r, "bound")) << (inconclusive ? " (inconclusive)" : "");
  }
  return {ok, os.str()};
}

Verdict theorem1(double& elapsed) {
  const auto t0 = Clock::now();
  const DeskCache desk = desk_cache();
  const fs::path out = scratch("theorem1");
  require_ok(run_cli({"check-theorems", "--config", desk.config.string(), "--out", out.string(), "--set",
                      "theorems.run_bound=false", "--set", "theorems.coverage_trajectories=5", "--set",
                      "theorems.coverage_steps=25", "--set", "theorems.coverage_perturbations=2", "--set",
                      "theorems.coverage_doublings=3", "--set", "theorems.coverage_probes=50"}),
             "check-theorems");
  elapsed = seconds_since(t0);
  std::map<std::string, std::vector<double>> curves;
  for (const auto& r : read_csv(out / "theorem1.csv")) curves[r.at("variant")].push_back(number(r, "median_distance"));
  const auto& ex = curves.at("explore");
  const auto& neg = curves.at("sigma0_single_start");
  bool decreasing = ex.size() == 4;
  for (std::size_t i = 1; i < ex.size(); ++i) decreasing = decreasing && ex[i] < ex[i - 1];
  const double neg_drop = (neg.front() - neg.back()) / neg.front();
  std::ostringstream os;
  os << "explore:";
  for (double v : ex) os << ' ' << fmt("%.4f", v);
  os << "; sigma=0 single start:";
  for (double v : neg) os << ' ' << fmt("%.4f", v);
  os << " (relative drop " << fmt("%.2g", neg_drop) << ")";
  return {decreasing && neg_drop < 0.01, os.str()};
}

// 9 ---------------------------------------------------------------------------
Verdict scaling(double& elapsed) {
  const DeskCache desk = desk_cache();
  const auto t0 = Clock::now();
  const fs::path out = scratch("scaling");
  fs::copy_file(desk.dir / "model.bin", out / "model.bin");
  fs::copy_file(desk.dir / "dataset.bin", out / "dataset.bin");
  require_ok(run_cli({"ablate", "--config", desk.config.string(), "--out", out.string(), "--kind", "M", "--grid",
                      "5,20,100", "--set", "control.initial_states=3", "--set", "control.steps=10"}),
             "ablate M");
  require_ok(run_cli({"ablate", "--config", desk.config.string(), "--out", out.string(), "--kind", "K", "--grid",
                      "5,15,25"}),
             "ablate K");
  elapsed = seconds_since(t0);
  const auto timing = nlohmann::json::parse(slurp(out / "ablate_M_timings.json"));
  std::vector<double> Ms = {5, 20, 100}, td, tm;
  for (double M : Ms) {
    const auto& j = timing.at(std::to_string(static_cast<int>(M)));
    td.push_back(j.at("diffusion").at("mean_step_time").get<double>());
    tm.push_back(j.at("multistart").at("mean_step_time").get<double>());
  }
  const double sd = loglog_slope(Ms, td), sm = loglog_slope(Ms, tm);
  std::map<int, double> cost;
  for (const auto& r : read_csv(out / "ablate_K.csv")) cost[static_cast<int>(number(r, "value"))] = number(r, "median_cost");
  const double r5 = cost.at(5) / cost.at(25), r15 = cost.at(15) / cost.at(25);
  std::ostringstream os;
  os << "slope multistart " << fmt("%.3f", sm) << ", diffusion " << fmt("%.3f", sd) << " (step times ms: ";
  for (std::size_t i = 0; i < Ms.size(); ++i)
    os << (i ? ", " : "") << "M=" << Ms[i] << " " << fmt("%.2f", 1e3 * td[i]) << "/" << fmt("%.1f", 1e3 * tm[i]);
  os << "); K cost ratios K5/K25 " << fmt("%.3f", r5) << ", K15/K25 " << fmt("%.3f", r15);
  return {sm >= 0.8 && sd <= 0.4 && r5 >= 1.2 && std::abs(r15 - 1.0) <= 0.1, os.str()};
}

// 10 --------------------------------------------------------------------------
const char* kTinyConfig = R"([run]
seed = 5
[system]
kind = cartpole
input_bound = 100
horizon = 16
[generate]
num_trajectories = 2
steps = 6
perturbations = 2
[solver]
max_iterations = 60
[diffusion]
K = 5
epochs = 4
width = 32
batch_size = 16
[behavior_clone]
epochs = 4
width = 8
star_restarts = 2
[control]
M = 3
multistart_M = 3
steps = 5
initial_states = 2
[multimodality]
samples = 4
probe_runs = 2
steps = 4
[theorems]
trials = 40
mass_samples = 400
toy_records = 64
toy_epochs = 2
coverage_trajectories = 1
coverage_steps = 3
coverage_perturbations = 1
coverage_doublings = 2
coverage_probes = 6
)";

Verdict determinism() {
  const fs::path root = scratch("determinism");
  const fs::path cfg = root / "tiny.cfg";
  std::ofstream(cfg) << kTinyConfig;
  const std::vector<std::vector<std::string>> commands = {
      {"generate"}, {"train-diffusion"}, {"train-bc"}, {"train-bc", "--globally-optimized"},
      {"rollout", "--controller", "diffusion", "--run", "1"}, {"rollout", "--controller", "multistart"},
      {"compare"}, {"ablate", "--kind", "K", "--grid", "3,5"}, {"ablate", "--kind", "M", "--grid", "1,2"},
      {"ablate", "--kind", "H", "--grid", "8,12"}, {"multimodality"}, {"check-theorems"}};
  for (const char* d : {"a", "b"})
    for (auto args : commands) {
      args.insert(args.end(), {"--config", cfg.string(), "--out", (root / d).string(), "--seed", "11"});
      require_ok(run_cli(args), args[0]);
    }
  int compared = 0, differing = 0;
  std::string first_diff;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    const auto ext = e.path().extension();
    if (ext != ".csv" && ext != ".dat") continue;
    ++compared;
    const fs::path other = root / "b" / e.path().filename();
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
      ++differing;
      if (first_diff.empty()) first_diff = e.path().filename().string();
    }
  }
  return {compared > 0 && differing == 0,
          std::to_string(compared) + " CSV/plot files compared over " + std::to_string(commands.size()) +
              " commands, " + std::to_string(differing) + " differ" + (first_diff.empty() ? "" : " (" + first_diff + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  if (selected.empty())
    for (int i = 1; i <= 10; ++i) selected.insert(i);

  struct Criterion {
    int id;
    std::string name;
    double limit;  // seconds, 0 when no limit is stated
    std::function<Verdict(double&)> run;
  };
  auto timed = [](std::function<Verdict()> f) {
    return [f](double& elapsed) {
      const auto t0 = Clock::now();
      Verdict v = f();
      elapsed = seconds_since(t0);
      return v;
    };
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", 60, timed(gradient_correctness)},
      {2, "solver soundness", 120, timed(solver_soundness)},
      {3, "OCP bimodality from downward rest", 300, timed(ocp_bimodality)},
      {4, "diffusion mode recovery", 600, timed(mode_recovery)},
      {5, "multimodality tracking", 1800, multimodality_tracking},
      {6, "closed-loop cost ordering", 1800, cost_ordering},
      {7, "optimality bound Monte Carlo", 300, theorem2},
      {8, "dataset coverage", 600, theorem1},
      {9, "scaling shapes", 2700, scaling},
      {10, "CLI determinism", 0, timed(determinism)},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.count(c.id)) continue;
    double elapsed = 0.0;
    Verdict v;
    try {
      v = c.run(elapsed);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const bool in_time = c.limit <= 0.0 || elapsed < c.limit;
    const bool pass = v.pass && in_time;
    failed += pass ? 0 : 1;
    std::printf("criterion %2d %s: %s | %s | %.1fs%s\n", c.id, pass ? "PASS" : "FAIL", c.name.c_str(),
                v.detail.c_str(), elapsed, in_time ? "" : " (over the time limit)");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
