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

#include "cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "diffmpc/binary_io.hpp"
#include "diffmpc/control.hpp"
#include "diffmpc/datagen.hpp"
#include "diffmpc/diffusion.hpp"
#include "diffmpc/evaluation.hpp"
#include "diffmpc/metrics.hpp"
#include "diffmpc/random.hpp"

namespace diffmpc::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& raw) {
  try {
    std::size_t used = 0;
    const double v = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + raw + "'");
  }
}

long long parse_integer(const std::string& key, const std::string& raw) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects an integer, got '" + raw + "'");
  }
}

}  // namespace

const std::vector<std::string>& Settings::known_keys() {
  static const std::vector<std::string> keys = {
      "run.seed", "run.threads",
      "system.kind", "system.input_bound", "system.dt", "system.horizon", "system.cart_mass", "system.mass1",
      "system.mass2", "system.length1", "system.length2", "system.gravity", "system.q", "system.r", "system.p",
      "generate.num_trajectories", "generate.steps", "generate.perturbations", "generate.restarts", "generate.sigma",
      "generate.initial_lower", "generate.initial_upper", "generate.guess_amplitude_initial",
      "generate.guess_amplitude_floor", "generate.adapt_guess_amplitude", "generate.advance_from_nominal",
      "generate.drop_unconverged",
      "generate.export_csv",
      "solver.max_iterations", "solver.stationarity_tol", "solver.initial_step", "solver.armijo", "solver.backtrack",
      "solver.memory", "solver.max_backtracks",
      "diffusion.batch_size", "diffusion.epochs", "diffusion.learning_rate", "diffusion.p_uncond", "diffusion.K",
      "diffusion.schedule", "diffusion.beta_min", "diffusion.beta_max", "diffusion.variance", "diffusion.depth",
      "diffusion.width", "diffusion.activation", "diffusion.step_embedding", "diffusion.condition_embedding",
      "diffusion.validation_fraction", "diffusion.guidance_w",
      "behavior_clone.depth", "behavior_clone.width", "behavior_clone.activation", "behavior_clone.batch_size",
      "behavior_clone.epochs", "behavior_clone.learning_rate", "behavior_clone.validation_fraction",
      "behavior_clone.star_restarts",
      "control.M", "control.multistart_M", "control.guess_amplitude", "control.steps", "control.initial_states",
      "control.controllers",
      "multimodality.samples", "multimodality.tau", "multimodality.probe_runs", "multimodality.steps",
      "multimodality.probe_controller",
      "ablate.kind", "ablate.grid",
      "theorems.trials", "theorems.p_b", "theorems.M_grid", "theorems.mass_samples", "theorems.toy_records",
      "theorems.toy_epochs", "theorems.toy_batch_size", "theorems.toy_learning_rate",
      "theorems.coverage_trajectories", "theorems.coverage_steps", "theorems.coverage_perturbations",
      "theorems.coverage_doublings", "theorems.coverage_probes", "theorems.run_bound", "theorems.run_coverage",
      "paths.dataset", "paths.diffusion_model", "paths.nn", "paths.nn_star"};
  return keys;
}

void Settings::set(const std::string& key, const std::string& value) {
  const auto& keys = known_keys();
  if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = trim(value);
}

Settings Settings::from_text(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  Settings s;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config entry '" + section + "' is outside any section");
    for (const auto& [key, value] : body) s.set(section + "." + key, value.data());
  }
  return s;
}

Settings Settings::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return from_text(os.str());
}

void Settings::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string Settings::text(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Settings::number(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : parse_double(key, it->second);
}

double Settings::required_number(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config key '" + key + "' is required");
  return parse_double(key, it->second);
}

int Settings::integer(const std::string& key, int fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const long long v = parse_integer(key, it->second);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw ConfigError("'" + key + "' is out of range");
  return static_cast<int>(v);
}

std::uint64_t Settings::unsigned_integer(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    if (!it->second.empty() && it->second[0] == '-') throw std::invalid_argument(it->second);
    const auto v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + it->second + "'");
  }
}

bool Settings::flag(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<double> Settings::numbers(const std::string& key, const std::vector<double>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  for (const auto& item : split(it->second, ',')) out.push_back(parse_double(key, item));
  if (out.empty()) throw ConfigError("'" + key + "' is an empty list");
  return out;
}

std::vector<std::string> Settings::words(const std::string& key, const std::vector<std::string>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  auto out = split(it->second, ',');
  if (out.empty()) throw ConfigError("'" + key + "' is an empty list");
  return out;
}

std::string Settings::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::string Settings::digest() const { return hex_digest(canonical()); }

namespace {

/// Missing inputs the user has to supply (exit 1).
class ResolutionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t sub = 0) {
  Rng rng = make_stream(seed, {tag, sub});
  return rng();
}

enum SeedTag : std::uint64_t {
  kDiffusionTrain = 11,
  kCloneTrain = 12,
  kStarDataset = 13,
  kController = 14,
  kInitialStates = 15,
  kSampler = 16,
  kTheorem = 17,
  kCoverage = 18,
  kAblationData = 19,
};

Eigen::VectorXd as_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Everything a subcommand derives from the settings.
struct Context {
  Settings settings;
  std::uint64_t seed = 0;
  std::string digest;
  fs::path out;
  int threads = 1;

  SystemModel model() const {
    PhysicalParams p;
    p.cart_mass = settings.number("system.cart_mass", p.cart_mass);
    p.mass1 = settings.number("system.mass1", p.mass1);
    p.mass2 = settings.number("system.mass2", p.mass2);
    p.length1 = settings.number("system.length1", p.length1);
    p.length2 = settings.number("system.length2", p.length2);
    p.gravity = settings.number("system.gravity", p.gravity);
    return SystemModel(kind(), p, settings.number("system.dt", 0.01));
  }

  SystemKind kind() const { return parse_system_kind(settings.text("system.kind", "cartpole")); }

  OcpSpec spec(int horizon_override = 0) const {
    OcpSpec s = OcpSpec::benchmark(kind(), settings.required_number("system.input_bound"));
    s.horizon = horizon_override > 0 ? horizon_override : settings.integer("system.horizon", s.horizon);
    s.q = as_vector(settings.numbers("system.q", to_std(s.q)));
    s.r = as_vector(settings.numbers("system.r", to_std(s.r)));
    s.p = as_vector(settings.numbers("system.p", to_std(s.p)));
    s.validate(model());
    return s;
  }

  SolverConfig solver() const {
    SolverConfig c;
    c.max_iterations = settings.integer("solver.max_iterations", c.max_iterations);
    c.stationarity_tol = settings.number("solver.stationarity_tol", c.stationarity_tol);
    c.initial_step = settings.number("solver.initial_step", c.initial_step);
    c.armijo = settings.number("solver.armijo", c.armijo);
    c.backtrack = settings.number("solver.backtrack", c.backtrack);
    c.memory = settings.integer("solver.memory", c.memory);
    c.max_backtracks = settings.integer("solver.max_backtracks", c.max_backtracks);
    return c;
  }

  StateBox initial_box() const {
    StateBox box = benchmark_initial_states(kind());
    box.lower = as_vector(settings.numbers("generate.initial_lower", to_std(box.lower)));
    box.upper = as_vector(settings.numbers("generate.initial_upper", to_std(box.upper)));
    const int n = model().state_dim();
    if (box.lower.size() != n || box.upper.size() != n) throw DimensionError("initial state box width mismatch");
    if ((box.lower.array() > box.upper.array()).any()) throw ConfigError("initial_lower exceeds initial_upper");
    return box;
  }

  GenConfig generation() const {
    const int n = model().state_dim();
    GenConfig g;
    g.num_trajectories = settings.integer("generate.num_trajectories", 20);
    g.steps = settings.integer("generate.steps", 50);
    g.perturbations = settings.integer("generate.perturbations", 4);
    g.restarts = settings.integer("generate.restarts", 1);
    const auto sigma = settings.numbers("generate.sigma", {0.15});
    if (sigma.size() == 1) {
      g.sigma = State::Constant(n, sigma[0]);
    } else {
      g.sigma = as_vector(sigma);
    }
    g.initial_states = initial_box();
    const double bound = settings.required_number("system.input_bound");
    g.guess_amplitude_initial = settings.number("generate.guess_amplitude_initial", bound);
    g.guess_amplitude_floor = settings.number("generate.guess_amplitude_floor", 0.0);
    g.adapt_guess_amplitude = settings.flag("generate.adapt_guess_amplitude", true);
    g.advance_from_nominal = settings.flag("generate.advance_from_nominal", false);
    g.drop_unconverged = settings.flag("generate.drop_unconverged", false);
    g.seed = seed;
    g.threads = threads;
    g.validate(n);
    return g;
  }

  DiffusionTrainConfig diffusion(int K_override = 0) const {
    DiffusionTrainConfig c;
    c.batch_size = settings.integer("diffusion.batch_size", c.batch_size);
    c.epochs = settings.integer("diffusion.epochs", c.epochs);
    c.learning_rate = settings.number("diffusion.learning_rate", c.learning_rate);
    c.p_uncond = settings.number("diffusion.p_uncond", c.p_uncond);
    c.K = K_override > 0 ? K_override : settings.integer("diffusion.K", c.K);
    c.schedule = parse_schedule_kind(settings.text("diffusion.schedule", to_string(c.schedule)));
    c.beta_min = settings.number("diffusion.beta_min", c.beta_min);
    c.beta_max = settings.number("diffusion.beta_max", c.beta_max);
    c.variance = parse_reverse_variance(settings.text("diffusion.variance", to_string(c.variance)));
    c.arch.depth = settings.integer("diffusion.depth", c.arch.depth);
    c.arch.width = settings.integer("diffusion.width", c.arch.width);
    c.arch.activation = parse_activation(settings.text("diffusion.activation", to_string(c.arch.activation)));
    c.arch.step_embedding = settings.integer("diffusion.step_embedding", c.arch.step_embedding);
    c.arch.condition_embedding = settings.integer("diffusion.condition_embedding", c.arch.condition_embedding);
    c.validation_fraction = settings.number("diffusion.validation_fraction", c.validation_fraction);
    c.seed = derive_seed(seed, kDiffusionTrain);
    c.validate();
    return c;
  }

  double guidance_w() const { return settings.number("diffusion.guidance_w", 0.0); }

  BehaviorCloneConfig behavior_clone() const {
    BehaviorCloneConfig c;
    c.depth = settings.integer("behavior_clone.depth", c.depth);
    c.width = settings.integer("behavior_clone.width", c.width);
    c.activation = parse_activation(settings.text("behavior_clone.activation", to_string(c.activation)));
    c.batch_size = settings.integer("behavior_clone.batch_size", c.batch_size);
    c.epochs = settings.integer("behavior_clone.epochs", c.epochs);
    c.learning_rate = settings.number("behavior_clone.learning_rate", c.learning_rate);
    c.validation_fraction = settings.number("behavior_clone.validation_fraction", c.validation_fraction);
    c.seed = derive_seed(seed, kCloneTrain);
    c.validate();
    return c;
  }

  ControllerConfig controller(int run, int M) const {
    ControllerConfig c;
    c.M = M;
    c.guidance_w = guidance_w();
    c.solver = solver();
    c.seed = derive_seed(seed, kController, static_cast<std::uint64_t>(run));
    c.guess_amplitude = settings.number("control.guess_amplitude", 0.0);
    c.threads = threads;
    c.validate();
    return c;
  }

  int steps() const { return settings.integer("control.steps", 50); }

  std::vector<State> initial_states() const {
    const int n = settings.integer("control.initial_states", 20);
    if (n < 1) throw ConfigError("control.initial_states must be positive");
    return sample_initial_states(initial_box(), n, derive_seed(seed, kInitialStates));
  }

  fs::path artifact(const std::string& key, const std::string& fallback) const {
    fs::path p = settings.text("paths." + key, fallback);
    return p.is_absolute() ? p : out / p;
  }
};

fs::path require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ResolutionError("missing " + what + ": '" + p.string() + "'");
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

void write_plot_data(const fs::path& path, const std::vector<double>& x, const std::vector<double>& y) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "# x y\n";
  char buf[64];
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g\n", x[i], y[i]);
    out << buf;
  }
}

struct Artifacts {
  std::shared_ptr<const DiffusionModel> diffusion;
  std::shared_ptr<const BehaviorClonePolicy> nn;
  std::shared_ptr<const BehaviorClonePolicy> nn_star;
};

/// Loads what `names` need, failing on the first missing file before any work starts.
Artifacts load_artifacts(const Context& ctx, const std::vector<std::string>& names) {
  Artifacts a;
  for (const auto& n : names) {
    if (n == "diffusion" && !a.diffusion) {
      const auto p = require_file(ctx.artifact("diffusion_model", "model.bin"), "diffusion checkpoint");
      a.diffusion = std::make_shared<const DiffusionModel>(load_diffusion_model(p.string()));
    } else if (n == "nn" && !a.nn) {
      const auto p = require_file(ctx.artifact("nn", "nn.bin"), "behavior-clone checkpoint");
      a.nn = std::make_shared<const BehaviorClonePolicy>(load_behavior_clone(p.string()));
    } else if (n == "nn_star" && !a.nn_star) {
      const auto p = require_file(ctx.artifact("nn_star", "nn_star.bin"), "behavior-clone checkpoint");
      a.nn_star = std::make_shared<const BehaviorClonePolicy>(load_behavior_clone(p.string()));
    } else if (n != "diffusion" && n != "nn" && n != "nn_star" && n != "local" && n != "multistart") {
      throw ConfigError("unknown controller '" + n + "'");
    }
  }
  const std::string digest = ctx.spec().digest();
  auto check = [&](const std::string& have, const std::string& what) {
    if (have != digest) throw ConfigError(what + " was trained for a different OCP");
  };
  if (a.diffusion) check(a.diffusion->spec_digest, "diffusion checkpoint");
  if (a.nn) check(a.nn->spec_digest, "behavior-clone checkpoint");
  if (a.nn_star) check(a.nn_star->spec_digest, "behavior-clone checkpoint");
  return a;
}

NamedController make_controller(const Context& ctx, const Artifacts& a, const std::string& name, const OcpSpec& spec,
                                 int M_diffusion, int M_multistart) {
  const SystemModel model = ctx.model();
  NamedController nc;
  nc.name = name;
  if (name == "diffusion") {
    nc.make = [=, &ctx](int run) -> std::unique_ptr<Controller> {
      return std::make_unique<DiffusionController>(a.diffusion, spec, model, ctx.controller(run, M_diffusion));
    };
  } else if (name == "local") {
    nc.make = [=, &ctx](int run) -> std::unique_ptr<Controller> {
      return std::make_unique<LocalMpcController>(spec, model, ctx.controller(run, 1));
    };
  } else if (name == "multistart") {
    nc.make = [=, &ctx](int run) -> std::unique_ptr<Controller> {
      return std::make_unique<MultistartMpcController>(spec, model, ctx.controller(run, M_multistart));
    };
  } else if (name == "nn") {
    nc.make = [=](int) -> std::unique_ptr<Controller> { return std::make_unique<BehaviorCloneController>(a.nn); };
  } else if (name == "nn_star") {
    nc.make = [=](int) -> std::unique_ptr<Controller> { return std::make_unique<BehaviorCloneController>(a.nn_star); };
  } else {
    throw ConfigError("unknown controller '" + name + "'");
  }
  return nc;
}

json timing_json(const ExperimentReport& rep) {
  json j = json::object();
  for (const auto& r : rep.rows) j[r.controller] = {{"mean_step_time", r.mean_step_time}, {"max_step_time", r.max_step_time}};
  return j;
}

// --- subcommands -------------------------------------------------------------

json cmd_generate(const Context& ctx) {
  const SystemModel model = ctx.model();
  const OcpSpec spec = ctx.spec();
  const GenConfig gen = ctx.generation();
  const Dataset ds = generate_dataset(model, spec, gen, ctx.solver());
  const fs::path path = ctx.artifact("dataset", "dataset.bin");
  write_dataset(ds, path.string());
  if (ctx.settings.flag("generate.export_csv", true)) export_dataset_csv(ds, (ctx.out / "dataset.csv").string());
  return {{"dataset", path.string()},
          {"records", ds.records.size()},
          {"dropped", ds.header.dropped},
          {"total_solves", ds.header.total_solves}};
}

json cmd_train_diffusion(const Context& ctx) {
  const fs::path data = require_file(ctx.artifact("dataset", "dataset.bin"), "dataset");
  const Dataset ds = read_dataset(data.string());
  const OcpSpec spec = ctx.spec();
  if (ds.header.spec_digest != spec.digest()) throw ConfigError("dataset was generated for a different OCP");
  TrainResult res = train_diffusion(ds, spec.box, ctx.diffusion());
  const fs::path path = ctx.artifact("diffusion_model", "model.bin");
  save_diffusion_model(res.model, path.string());
  write_train_log_csv(res.log, (ctx.out / "diffusion_train_log.csv").string());
  double best_validation = 0.0;
  for (const auto& row : res.log)
    if (row.epoch == res.best_epoch) best_validation = row.validation_loss;
  return {{"model", path.string()},
          {"best_epoch", res.best_epoch},
          {"final_train_loss", res.log.back().train_loss},
          {"best_validation_loss", best_validation}};
}

json cmd_train_bc(const Context& ctx, bool globally_optimized) {
  const OcpSpec spec = ctx.spec();
  Dataset ds;
  std::uint64_t solves = 0;
  if (globally_optimized) {
    GenConfig gen = budget_matched_config(ctx.generation(), ctx.settings.integer("behavior_clone.star_restarts", 4));
    gen.seed = derive_seed(ctx.seed, kStarDataset);
    ds = generate_dataset(ctx.model(), spec, gen, ctx.solver());
    write_dataset(ds, (ctx.out / "nn_star_dataset.bin").string());
  } else {
    const fs::path data = require_file(ctx.artifact("dataset", "dataset.bin"), "dataset");
    ds = read_dataset(data.string());
    if (ds.header.spec_digest != spec.digest()) throw ConfigError("dataset was generated for a different OCP");
  }
  solves = ds.header.total_solves;
  BehaviorCloneResult res = train_behavior_clone(ds, spec.box, ctx.behavior_clone(), globally_optimized);
  const std::string key = globally_optimized ? "nn_star" : "nn";
  const fs::path path = ctx.artifact(key, key + ".bin");
  save_behavior_clone(res.policy, path.string());
  write_train_log_csv(res.log, (ctx.out / (key + "_train_log.csv")).string());
  return {{"policy", path.string()},
          {"records", ds.records.size()},
          {"total_solves", solves},
          {"best_epoch", res.best_epoch},
          {"best_validation_mse", res.best_validation_mse}};
}

json cmd_rollout(const Context& ctx, const std::string& name, int run) {
  const auto states = ctx.initial_states();
  if (run < 0 || run >= static_cast<int>(states.size()))
    throw ConfigError("run index outside [0, control.initial_states)");
  const Artifacts a = load_artifacts(ctx, {name});
  const OcpSpec spec = ctx.spec();
  NamedController nc = make_controller(ctx, a, name, spec, ctx.settings.integer("control.M", 5),
                                       ctx.settings.integer("control.multistart_M", 20));
  auto ctrl = nc.make(run);
  const RolloutLog log = closed_loop_rollout(*ctrl, ctx.model(), spec, states[static_cast<std::size_t>(run)], ctx.steps());
  const std::string stem = "rollout_" + name + "_" + std::to_string(run);
  export_rollout_csv(log, (ctx.out / (stem + ".csv")).string());
  const int angle = ctx.kind() == SystemKind::Pendubot ? 0 : 2;
  std::vector<double> t, y;
  for (std::size_t i = 0; i < log.states.size(); ++i) {
    t.push_back(static_cast<double>(i));
    y.push_back(log.states[i][angle]);
  }
  write_plot_data(ctx.out / (stem + "_angle.dat"), t, y);
  write_json(ctx.out / (stem + "_timings.json"),
             {{"mean_step_time", log.mean_step_time()}, {"max_step_time", log.max_step_time()}});
  return {{"controller", name},
          {"run", run},
          {"closed_loop_cost", log.closed_loop_cost},
          {"aborted", log.aborted},
          {"success", !log.aborted && swing_up_success(ctx.kind(), log.states.back())}};
}

json cmd_compare(const Context& ctx) {
  const auto names = ctx.settings.words("control.controllers", {"diffusion", "multistart", "local", "nn", "nn_star"});
  const Artifacts a = load_artifacts(ctx, names);
  const OcpSpec spec = ctx.spec();
  std::vector<NamedController> ctrls;
  for (const auto& n : names)
    ctrls.push_back(make_controller(ctx, a, n, spec, ctx.settings.integer("control.M", 5),
                                    ctx.settings.integer("control.multistart_M", 20)));
  const auto states = ctx.initial_states();
  const ExperimentReport rep = run_comparison(ctx.model(), spec, ctrls, states, ctx.steps(), ctx.seed, ctx.digest);
  write_report_csv(rep, (ctx.out / "compare.csv").string());
  {
    std::ofstream out(ctx.out / "compare_runs.csv");
    out << "controller,run,cost,success,seed,config_digest\n";
    char buf[64];
    for (const auto& r : rep.rows)
      for (std::size_t i = 0; i < r.costs.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", r.costs[i]);
        out << r.controller << ',' << i << ',' << buf << ',' << (r.success[i] ? 1 : 0) << ',' << rep.seed << ','
            << rep.config_digest << '\n';
      }
  }
  write_json(ctx.out / "timings.json", timing_json(rep));
  json rows = json::object();
  for (const auto& r : rep.rows)
    rows[r.controller] = {{"median_cost", r.median_cost}, {"success_rate", r.success_rate}};
  return {{"runs", states.size()}, {"controllers", rows}};
}

std::vector<int> positive_grid(const std::vector<double>& grid, const std::string& what) {
  std::vector<int> out;
  for (double v : grid) {
    if (v < 1 || v != std::floor(v)) throw ConfigError(what + " grid values must be positive integers");
    out.push_back(static_cast<int>(v));
  }
  if (out.empty()) throw ConfigError(what + " grid is empty");
  return out;
}

json cmd_ablate(const Context& ctx, const std::string& kind, const std::vector<double>& grid) {
  if (kind != "M" && kind != "H" && kind != "K") throw ConfigError("ablation kind must be M, H or K");
  const std::vector<int> values = positive_grid(grid, kind);
  const auto states = ctx.initial_states();
  const int M = ctx.settings.integer("control.M", 5);
  json timings = json::object();
  Artifacts a;
  Dataset ds;
  if (kind == "M") {
    a = load_artifacts(ctx, {"diffusion"});
  } else if (kind == "K") {
    const fs::path data = require_file(ctx.artifact("dataset", "dataset.bin"), "dataset");
    ds = read_dataset(data.string());
    if (ds.header.spec_digest != ctx.spec().digest()) throw ConfigError("dataset was generated for a different OCP");
  }
  auto evaluate = [&](double value) {
    const int v = static_cast<int>(value);
    std::vector<NamedController> ctrls;
    OcpSpec spec = ctx.spec(kind == "H" ? v : 0);
    Artifacts local = a;
    if (kind == "M") {
      ctrls.push_back(make_controller(ctx, local, "diffusion", spec, v, v));
      ctrls.push_back(make_controller(ctx, local, "multistart", spec, v, v));
    } else {
      TrainResult res = [&] {
        if (kind == "K") return train_diffusion(ds, spec.box, ctx.diffusion(v));
        GenConfig gen = ctx.generation();
        gen.seed = derive_seed(ctx.seed, kAblationData, static_cast<std::uint64_t>(v));
        const Dataset d = generate_dataset(ctx.model(), spec, gen, ctx.solver());
        return train_diffusion(d, spec.box, ctx.diffusion());
      }();
      save_diffusion_model(res.model, (ctx.out / ("model_" + kind + std::to_string(v) + ".bin")).string());
      local.diffusion = std::make_shared<const DiffusionModel>(std::move(res.model));
      ctrls.push_back(make_controller(ctx, local, "diffusion", spec, M, M));
    }
    ExperimentReport rep = run_comparison(ctx.model(), spec, ctrls, states, ctx.steps(), ctx.seed, ctx.digest);
    timings[std::to_string(v)] = timing_json(rep);
    return rep;
  };
  const auto rows = run_ablation(kind, grid, evaluate);
  const std::string stem = "ablate_" + kind;
  write_ablation_csv(rows, (ctx.out / (stem + ".csv")).string());
  write_json(ctx.out / (stem + "_timings.json"), timings);
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> curves;
  for (const auto& r : rows) {
    curves[r.summary.controller].first.push_back(r.value);
    curves[r.summary.controller].second.push_back(r.summary.median_cost);
  }
  for (const auto& [name, xy] : curves) write_plot_data(ctx.out / (stem + "_" + name + ".dat"), xy.first, xy.second);
  return {{"kind", kind}, {"rows", rows.size()}, {"csv", (ctx.out / (stem + ".csv")).string()}};
}

json cmd_multimodality(const Context& ctx) {
  const Artifacts a = load_artifacts(ctx, {"diffusion"});
  const OcpSpec spec = ctx.spec();
  const SystemModel model = ctx.model();
  MultimodalityConfig mm;
  mm.samples = ctx.settings.integer("multimodality.samples", 20);
  mm.tau = ctx.settings.number("multimodality.tau", 0.0);
  if (mm.tau <= 0.0) mm.tau = default_mode_threshold(spec.box, spec.horizon);
  mm.validate();
  const int runs = ctx.settings.integer("multimodality.probe_runs", 10);
  const int steps = ctx.settings.integer("multimodality.steps", ctx.steps());
  if (runs < 1 || steps < 1) throw ConfigError("multimodality probe_runs and steps must be positive");
  const std::string probe = ctx.settings.text("multimodality.probe_controller", "diffusion");
  if (probe != "diffusion" && probe != "multistart") throw ConfigError("probe_controller must be diffusion or multistart");
  const NamedController nc = make_controller(ctx, a, probe, spec, ctx.settings.integer("control.M", 5),
                                             ctx.settings.integer("control.multistart_M", 20));
  const auto starts = sample_initial_states(ctx.initial_box(), runs, derive_seed(ctx.seed, kInitialStates));
  std::vector<std::vector<State>> probes;
  for (int r = 0; r < runs; ++r) {
    auto ctrl = nc.make(r);
    const RolloutLog log = closed_loop_rollout(*ctrl, model, spec, starts[static_cast<std::size_t>(r)], steps);
    probes.emplace_back(log.states.begin(), log.states.begin() + std::min<std::size_t>(log.states.size(), steps));
  }
  const auto pd = multimodality_percentage(diffusion_sampler(a.diffusion, ctx.guidance_w(), derive_seed(ctx.seed, kSampler, 0)),
                                           probes, mm);
  const auto pm = multimodality_percentage(multistart_sampler(spec, model, ctx.solver(), derive_seed(ctx.seed, kSampler, 1)),
                                           probes, mm);
  std::vector<double> t(pd.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  {
    std::ofstream out(ctx.out / "multimodality.csv");
    out << "step,diffusion,multistart,seed,config_digest\n";
    char buf[96];
    for (std::size_t i = 0; i < pd.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,", i, pd[i], pm[i]);
      out << buf << ctx.seed << ',' << ctx.digest << '\n';
    }
  }
  write_plot_data(ctx.out / "multimodality_diffusion.dat", t, pd);
  write_plot_data(ctx.out / "multimodality_multistart.dat", t, pm);
  double gap = 0.0;
  for (std::size_t i = 0; i < std::min<std::size_t>(20, pd.size()); ++i) gap = std::max(gap, std::abs(pd[i] - pm[i]));
  return {{"tau", mm.tau}, {"steps", pd.size()}, {"max_gap_first_20", gap}};
}

json check_bound(const Context& ctx);
json check_coverage(const Context& ctx);

json cmd_check_theorems(const Context& ctx) {
  json result = json::object();
  if (ctx.settings.flag("theorems.run_bound", true)) result["theorem2"] = check_bound(ctx);
  if (ctx.settings.flag("theorems.run_coverage", true)) result["theorem1"] = check_coverage(ctx);
  return result;
}

json check_bound(const Context& ctx) {
  const BimodalToy toy = BimodalToy::standard();
  const double p_b = ctx.settings.number("theorems.p_b", 0.3);
  if (!(p_b > 0.0 && p_b <= toy.global_mass)) throw ConfigError("theorems.p_b must lie in (0, global mode mass]");
  const double eps = toy.radius_for_mass(p_b);
  const int trials = ctx.settings.integer("theorems.trials", 1000);
  const int mass_samples = ctx.settings.integer("theorems.mass_samples", 20000);
  const auto Ms = positive_grid(ctx.settings.numbers("theorems.M_grid", {1, 5, 10}), "theorems.M");

  const int records = ctx.settings.integer("theorems.toy_records", 2000);
  if (records < 2) throw ConfigError("theorems.toy_records must be at least 2");
  DiffusionTrainConfig cfg = ctx.diffusion();
  cfg.epochs = ctx.settings.integer("theorems.toy_epochs", 150);
  cfg.batch_size = ctx.settings.integer("theorems.toy_batch_size", 128);
  cfg.learning_rate = ctx.settings.number("theorems.toy_learning_rate", 1e-3);
  cfg.p_uncond = 0.0;
  cfg.seed = derive_seed(ctx.seed, kTheorem, 1);
  cfg.validate();
  Eigen::MatrixXd states = Eigen::MatrixXd::Zero(1, records);
  Eigen::MatrixXd seqs(toy.horizon, records);
  Rng data_rng = make_stream(ctx.seed, {kTheorem, 0});
  for (int i = 0; i < records; ++i) seqs.col(i) = toy.sample(data_rng);
  const TrainResult trained = train_diffusion(states, seqs, InputBox::symmetric(1, 3.0), toy.horizon, cfg);
  const DiffusionModel& model = trained.model;

  struct Source {
    std::string name;
    std::function<Eigen::VectorXd(Rng&)> draw;
  };
  const std::vector<Source> sources = {
      {"exact", [&](Rng& rng) { return toy.sample(rng); }},
      {"trained", [&](Rng& rng) { return Eigen::VectorXd(sample_sequence(model, State::Zero(1), 0.0, rng).flat()); }}};

  std::ofstream t2(ctx.out / "theorem2.csv");
  t2 << "model,M,trials,eps,p_b,delta_tilde,bound,empirical_failure,standard_error,inconclusive,within_bound,seed,"
        "config_digest\n";
  json summary = json::array();
  char buf[256];
  for (const auto& src : sources)
    for (int M : Ms) {
      const Theorem2Result r = theorem2_check(toy, src.draw, M, eps, trials, mass_samples, derive_seed(ctx.seed, kTheorem, 2));
      std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,", src.name.c_str(), r.M,
                    r.trials, r.eps, r.p_b, r.delta_tilde, r.bound, r.empirical_failure, r.standard_error,
                    r.inconclusive ? 1 : 0, r.within_bound ? 1 : 0);
      t2 << buf << ctx.seed << ',' << ctx.digest << '\n';
      summary.push_back({{"model", src.name}, {"M", M}, {"within_bound", r.within_bound}, {"inconclusive", r.inconclusive}});
    }
  return {{"eps", eps}, {"rows", summary}};
}

json check_coverage(const Context& ctx) {
  char buf[256];

  // coverage: nested datasets of doubling budget, then the sigma = 0 single-start control
  const SystemModel sys = ctx.model();
  const OcpSpec spec = ctx.spec();
  const int base = ctx.settings.integer("theorems.coverage_trajectories", 2);
  const int doublings = ctx.settings.integer("theorems.coverage_doublings", 3);
  if (base < 1 || doublings < 1) throw ConfigError("coverage trajectories and doublings must be positive");
  GenConfig gen = ctx.generation();
  gen.steps = ctx.settings.integer("theorems.coverage_steps", 25);
  gen.perturbations = ctx.settings.integer("theorems.coverage_perturbations", 2);
  gen.seed = derive_seed(ctx.seed, kCoverage, 0);
  const auto probes = sample_initial_states(gen.initial_states, ctx.settings.integer("theorems.coverage_probes", 50),
                                            derive_seed(ctx.seed, kCoverage, 1));
  GenConfig neg = gen;
  neg.sigma.setZero();
  neg.sigma_schedule.clear();
  neg.restarts = 1;
  neg.guess_amplitude_initial = 0.0;
  neg.adapt_guess_amplitude = false;
  const State centre = 0.5 * (gen.initial_states.lower + gen.initial_states.upper);
  neg.initial_states = StateBox{centre, centre};
  std::ofstream t1(ctx.out / "theorem1.csv");
  t1 << "variant,budget,median_distance,strictly_decreasing,seed,config_digest\n";
  json coverage = json::object();
  const std::vector<std::pair<std::string, GenConfig>> variants = {{"explore", gen}, {"sigma0_single_start", neg}};
  for (const auto& [name, g] : variants) {
    std::vector<Dataset> sets;
    for (int i = 0; i <= doublings; ++i) {
      GenConfig gi = g;
      gi.num_trajectories = base << i;
      sets.push_back(generate_dataset(sys, spec, gi, ctx.solver()));
    }
    const CoverageResult c = theorem1_coverage_check(sets, probes);
    for (std::size_t i = 0; i < c.budgets.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%llu,%.17g,%d,", name.c_str(), static_cast<unsigned long long>(c.budgets[i]),
                    c.median_distance[i], c.strictly_decreasing ? 1 : 0);
      t1 << buf << ctx.seed << ',' << ctx.digest << '\n';
    }
    std::vector<double> x(c.budgets.begin(), c.budgets.end());
    write_plot_data(ctx.out / ("theorem1_" + name + ".dat"), x, c.median_distance);
    coverage[name] = {{"strictly_decreasing", c.strictly_decreasing}, {"median_distance", c.median_distance}};
  }
  return coverage;
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Diffusion-model sampling for near-global nonlinear MPC"};
  app.require_subcommand(1);
  std::string config_path, out_dir, controller = "diffusion", ablate_kind;
  std::vector<std::string> overrides;
  std::vector<double> grid;
  std::uint64_t seed = 0;
  int threads = 0, run = 0;
  bool globally_optimized = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Sectioned key-value config file")->required();
    sub->add_option("-s,--seed", seed, "Overrides run.seed");
    sub->add_option("-o,--out", out_dir, "Output directory (default runs/<digest>-<timestamp>)");
    sub->add_option("--set", overrides, "section.key=value override, repeatable");
    sub->add_option("--threads", threads, "Overrides run.threads");
  };
  auto* gen = app.add_subcommand("generate", "Generate an optimizer dataset");
  auto* td = app.add_subcommand("train-diffusion", "Train the conditional diffusion model");
  auto* tb = app.add_subcommand("train-bc", "Train the behavior-clone baseline");
  auto* ro = app.add_subcommand("rollout", "Closed-loop rollout of one controller");
  auto* cmp = app.add_subcommand("compare", "Cost and timing comparison of controllers");
  auto* abl = app.add_subcommand("ablate", "Sweep M, H or K");
  auto* mm = app.add_subcommand("multimodality", "Multimodality percentage along rollouts");
  auto* th = app.add_subcommand("check-theorems", "Monte Carlo checks of the optimality and coverage results");
  for (auto* s : {gen, td, tb, ro, cmp, abl, mm, th}) common(s);
  tb->add_flag("--globally-optimized", globally_optimized, "Budget-matched multistart dataset (NN*)");
  ro->add_option("--controller", controller, "diffusion, local, multistart, nn or nn_star");
  ro->add_option("--run", run, "Index into the seeded initial states");
  abl->add_option("--kind", ablate_kind, "M, H or K");
  abl->add_option("--grid", grid, "Comma-separated values")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  Context ctx;
  try {
    ctx.settings = Settings::from_file(config_path);
    for (const auto& o : overrides) ctx.settings.apply_override(o);
    if (sub->count("--seed")) ctx.settings.set("run.seed", std::to_string(seed));
    if (sub->count("--threads")) ctx.settings.set("run.threads", std::to_string(threads));
    if (command == "ablate") {
      if (!ablate_kind.empty()) ctx.settings.set("ablate.kind", ablate_kind);
      if (!grid.empty()) {
        std::ostringstream os;
        os.precision(17);
        for (std::size_t i = 0; i < grid.size(); ++i) os << (i ? "," : "") << grid[i];
        ctx.settings.set("ablate.grid", os.str());
      }
    }
    ctx.seed = ctx.settings.unsigned_integer("run.seed", 0);
    ctx.threads = ctx.settings.integer("run.threads", 1);
    if (ctx.threads < 1) throw ConfigError("run.threads must be positive");
    ctx.digest = ctx.settings.digest();
    ctx.spec();
    ctx.out = out_dir.empty() ? fs::path("runs") / (ctx.digest + "-" + timestamp()) : fs::path(out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  }

  try {
    fs::create_directories(ctx.out);
    {
      std::ofstream cfg(ctx.out / "config.resolved");
      cfg << ctx.settings.canonical();
    }
    json result;
    if (command == "generate") result = cmd_generate(ctx);
    else if (command == "train-diffusion") result = cmd_train_diffusion(ctx);
    else if (command == "train-bc") result = cmd_train_bc(ctx, globally_optimized);
    else if (command == "rollout") result = cmd_rollout(ctx, controller, run);
    else if (command == "compare") result = cmd_compare(ctx);
    else if (command == "ablate")
      result = cmd_ablate(ctx, ctx.settings.text("ablate.kind", "M"), ctx.settings.numbers("ablate.grid", {}));
    else if (command == "multimodality") result = cmd_multimodality(ctx);
    else result = cmd_check_theorems(ctx);
    result["command"] = command;
    result["seed"] = ctx.seed;
    result["config_digest"] = ctx.digest;
    result["out"] = ctx.out.string();
    result["status"] = "ok";
    std::cout << "SUMMARY " << result.dump() << std::endl;
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    std::cout << "SUMMARY " << json{{"command", command}, {"status", "failed"}, {"error", e.what()}}.dump() << std::endl;
    return 2;
  }
}

}  // namespace diffmpc::cli
