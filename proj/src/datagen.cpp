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

#include "diffmpc/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "diffmpc/binary_io.hpp"
#include "diffmpc/parallel.hpp"
#include "json.hpp"

namespace diffmpc {

namespace {

constexpr char kDatasetMagic[8] = {'D', 'M', 'P', 'C', 'D', 'S', 'E', 'T'};
constexpr std::uint32_t kDatasetVersion = 1;

// Stream tags keep the random draws of different roles independent.
enum : std::uint64_t { kInitialStream = 1, kRecordStream = 2, kNominalStream = 3 };

State vec(std::initializer_list<double> v) {
  State s(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) s[i++] = x;
  return s;
}

std::string join(const Eigen::VectorXd& v) {
  std::ostringstream os;
  os.precision(17);
  for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

struct SolveOutcome {
  bool ok = false;
  SolveResult result;
};

SolveOutcome solve_record(const SystemModel& model, const OcpSpec& spec, const State& x, double amplitude,
                          int restarts, const SolverConfig& solver, Rng& rng) {
  std::vector<ControlSequence> guesses;
  guesses.reserve(static_cast<std::size_t>(restarts));
  for (int k = 0; k < restarts; ++k) guesses.push_back(sample_initial_guess(amplitude, spec.horizon, model.input_dim(), rng));
  SolveOutcome out;
  try {
    auto ms = solve_multistart(spec, model, x, guesses, solver, 1);
    out.result = std::move(ms.results[ms.best_index]);
    out.ok = true;
  } catch (const NonFiniteError&) {
    out.ok = false;
  }
  return out;
}

}  // namespace

State StateBox::sample(Rng& rng) const {
  State x(lower.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = lower[i] == upper[i] ? lower[i] : uniform(rng, lower[i], upper[i]);
  return x;
}

bool StateBox::contains(const State& x) const {
  return x.size() == lower.size() && (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all();
}

StateBox benchmark_initial_states(SystemKind kind) {
  constexpr double pi = std::numbers::pi;
  switch (kind) {
    case SystemKind::CartPole:
      return {vec({-3, 0, 1.8, 0}), vec({3, 0, 4.4, 0})};
    case SystemKind::Pendubot:
      return {vec({0, -pi / 4, 0, 0}), vec({0, pi / 4, 0, 0})};
    case SystemKind::DoubleCartPole:
      return {vec({-3, 0, pi, 0, 3.3, 0}), vec({3, 0, pi, 0, 3.3, 0})};
  }
  return {};
}

const State& GenConfig::sigma_at(int t) const {
  if (t >= 0 && static_cast<std::size_t>(t) < sigma_schedule.size()) return sigma_schedule[static_cast<std::size_t>(t)];
  return sigma;
}

void GenConfig::validate(int state_dim) const {
  if (num_trajectories < 1 || steps < 1 || perturbations < 1 || restarts < 1) {
    throw ConfigError("N_s, N_T, N_p and restarts must all be >= 1");
  }
  if (sigma.size() != state_dim) throw DimensionError("sigma must have one entry per state dimension");
  if ((sigma.array() < 0.0).any()) throw ConfigError("sigma must be nonnegative");
  for (const auto& s : sigma_schedule) {
    if (s.size() != state_dim || (s.array() < 0.0).any()) throw ConfigError("invalid sigma schedule entry");
  }
  if (initial_states.lower.size() != state_dim || initial_states.upper.size() != state_dim) {
    throw DimensionError("initial-state box has the wrong dimension");
  }
  if ((initial_states.lower.array() > initial_states.upper.array()).any()) {
    throw ConfigError("initial-state box requires lower <= upper");
  }
  if (guess_amplitude_initial < 0.0 || guess_amplitude_floor < 0.0) throw ConfigError("guess amplitudes must be >= 0");
}

std::string GenConfig::describe() const {
  std::ostringstream os;
  os.precision(17);
  os << "num_trajectories=" << num_trajectories << ";steps=" << steps << ";perturbations=" << perturbations
     << ";restarts=" << restarts << ";sigma=" << join(sigma) << ";schedule_len=" << sigma_schedule.size()
     << ";chi_lower=" << join(initial_states.lower) << ";chi_upper=" << join(initial_states.upper)
     << ";amp0=" << guess_amplitude_initial << ";amp_floor=" << guess_amplitude_floor
     << ";adapt=" << adapt_guess_amplitude
     << ";nominal=" << advance_from_nominal << ";drop_unconverged=" << drop_unconverged << ";seed=" << seed;
  return os.str();
}

ControlSequence sample_initial_guess(double amplitude, int horizon, int input_dim, Rng& rng) {
  ControlSequence u(horizon, input_dim);
  if (amplitude <= 0.0) return u;
  for (auto& v : u.flat()) v = uniform(rng, -amplitude, amplitude);
  return u;
}

State perturb_state(const State& x, const State& sigma, Rng& rng) {
  if (sigma.size() != x.size()) throw DimensionError("perturb_state: sigma dimension mismatch");
  State out = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double n = standard_normal(rng);
    out[i] += sigma[i] * n;
  }
  return out;
}

Dataset generate_dataset(const SystemModel& model, const OcpSpec& spec, const GenConfig& gen,
                         const SolverConfig& solver) {
  spec.validate(model);
  gen.validate(model.state_dim());
  solver.validate();

  Dataset ds;
  ds.header.system = model.kind();
  ds.header.spec_digest = spec.digest();
  ds.header.state_dim = model.state_dim();
  ds.header.horizon = spec.horizon;
  ds.header.input_dim = model.input_dim();
  ds.header.generator = gen.describe();

  const auto np = static_cast<std::size_t>(gen.perturbations);
  for (int j = 0; j < gen.num_trajectories; ++j) {
    const auto uj = static_cast<std::uint64_t>(j);
    Rng init_rng = make_stream(gen.seed, {kInitialStream, uj});
    State x = gen.initial_states.sample(init_rng);
    double amplitude = gen.guess_amplitude_initial;

    for (int t = 0; t < gen.steps; ++t) {
      const auto ut = static_cast<std::uint64_t>(t);
      std::vector<State> perturbed(np);
      std::vector<SolveOutcome> outcomes(np);
      parallel_for(np, gen.threads, [&](std::size_t i) {
        Rng rng = make_stream(gen.seed, {kRecordStream, uj, ut, i});
        perturbed[i] = perturb_state(x, gen.sigma_at(t), rng);
        outcomes[i] = solve_record(model, spec, perturbed[i], amplitude, gen.restarts, solver, rng);
      });
      ds.header.total_solves += np * static_cast<std::uint64_t>(gen.restarts);

      for (std::size_t i = 0; i < np; ++i) {
        const auto& o = outcomes[i];
        if (!o.ok || (gen.drop_unconverged && !o.result.converged)) {
          ++ds.header.dropped;
          continue;
        }
        DatasetRecord rec;
        rec.state = perturbed[i];
        rec.sequence = o.result.sequence;
        rec.cost = o.result.cost;
        rec.converged = o.result.converged;
        rec.trajectory_id = static_cast<std::uint32_t>(j);
        rec.step_index = static_cast<std::uint32_t>(t);
        rec.perturbation_index = static_cast<std::uint32_t>(i);
        ds.records.push_back(std::move(rec));
      }

      // Advance the nominal trajectory.
      State from;
      SolveOutcome applied;
      if (gen.advance_from_nominal) {
        Rng rng = make_stream(gen.seed, {kNominalStream, uj, ut});
        applied = solve_record(model, spec, x, amplitude, gen.restarts, solver, rng);
        ds.header.total_solves += static_cast<std::uint64_t>(gen.restarts);
        from = x;
      } else {
        applied = outcomes.back();
        from = perturbed.back();
      }
      if (!applied.ok) break;
      const Input u0 = applied.result.sequence.input(0);
      try {
        x = model.step(from, u0);
      } catch (const NonFiniteError&) {
        break;
      }
      if (gen.adapt_guess_amplitude) amplitude = std::max(u0.lpNorm<Eigen::Infinity>(), gen.guess_amplitude_floor);
    }
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) {
  const auto& h = ds.header;
  nlohmann::ordered_json meta;
  meta["system"] = to_string(h.system);
  meta["spec_digest"] = h.spec_digest;
  meta["state_dim"] = h.state_dim;
  meta["horizon"] = h.horizon;
  meta["input_dim"] = h.input_dim;
  meta["generator"] = h.generator;
  meta["dropped"] = h.dropped;
  meta["total_solves"] = h.total_solves;
  meta["record_count"] = ds.records.size();

  ByteWriter w;
  w.put_bytes(std::string_view(kDatasetMagic, 8));
  w.put_u32(kDatasetVersion);
  w.put_string(meta.dump());
  w.put_u64(ds.records.size());
  const auto seq_len = static_cast<Eigen::Index>(h.horizon) * h.input_dim;
  for (const auto& r : ds.records) {
    if (r.state.size() != h.state_dim || r.sequence.flat().size() != seq_len) {
      throw DimensionError("record shape does not match the dataset header");
    }
    for (double v : r.state) w.put_f64(v);
    for (double v : r.sequence.flat()) w.put_f64(v);
    w.put_f64(r.cost);
    w.put_u8(r.converged ? 1 : 0);
    w.put_u32(r.trajectory_id);
    w.put_u32(r.step_index);
    w.put_u32(r.perturbation_index);
  }
  write_checksummed(path, w.bytes());
}

Dataset read_dataset(const std::string& path) {
  const std::string bytes = read_checksummed(path);
  ByteReader r(bytes);
  if (r.get_bytes(8) != std::string_view(kDatasetMagic, 8)) throw FormatError("'" + path + "' is not a dataset file");
  const auto version = r.get_u32();
  if (version != kDatasetVersion) {
    throw FormatError("dataset version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kDatasetVersion) + ")");
  }
  Dataset ds;
  try {
    const auto meta = nlohmann::json::parse(r.get_string());
    ds.header.system = parse_system_kind(meta.at("system").get<std::string>());
    ds.header.spec_digest = meta.at("spec_digest").get<std::string>();
    ds.header.state_dim = meta.at("state_dim").get<int>();
    ds.header.horizon = meta.at("horizon").get<int>();
    ds.header.input_dim = meta.at("input_dim").get<int>();
    ds.header.generator = meta.at("generator").get<std::string>();
    ds.header.dropped = meta.at("dropped").get<std::uint64_t>();
    ds.header.total_solves = meta.at("total_solves").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed dataset header: ") + e.what());
  }
  const auto count = r.get_u64();
  const auto& h = ds.header;
  const std::size_t record_bytes = 8 * static_cast<std::size_t>(h.state_dim + h.horizon * h.input_dim + 1) + 1 + 12;
  if (h.state_dim <= 0 || h.input_dim <= 0 || h.horizon < 0 || r.remaining() != count * record_bytes) {
    throw FormatError("dataset payload size does not match its header");
  }
  ds.records.resize(count);
  for (auto& rec : ds.records) {
    rec.state.resize(h.state_dim);
    for (auto& v : rec.state) v = r.get_f64();
    Eigen::VectorXd flat(static_cast<Eigen::Index>(h.horizon) * h.input_dim);
    for (auto& v : flat) v = r.get_f64();
    rec.sequence = ControlSequence(std::move(flat), h.input_dim);
    rec.cost = r.get_f64();
    rec.converged = r.get_u8() != 0;
    rec.trajectory_id = r.get_u32();
    rec.step_index = r.get_u32();
    rec.perturbation_index = r.get_u32();
  }
  return ds;
}

void export_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "trajectory,step,perturbation,converged,cost";
  for (int i = 0; i < ds.header.state_dim; ++i) out << ",x" << i;
  for (int i = 0; i < ds.header.horizon * ds.header.input_dim; ++i) out << ",u" << i;
  out << '\n';
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  };
  for (const auto& r : ds.records) {
    out << r.trajectory_id << ',' << r.step_index << ',' << r.perturbation_index << ',' << (r.converged ? 1 : 0) << ','
        << num(r.cost);
    for (double v : r.state) out << ',' << num(v);
    for (double v : r.sequence.flat()) out << ',' << num(v);
    out << '\n';
  }
}

}  // namespace diffmpc
