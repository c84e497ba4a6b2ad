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

#include "diffmpc/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "diffmpc/binary_io.hpp"
#include "json.hpp"

namespace diffmpc {

namespace {

using nlohmann::json;

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vector(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void check_step(const NoiseSchedule& s, int k) {
  if (k < 1 || k > s.K) throw DimensionError("diffusion step " + std::to_string(k) + " outside 1.." + std::to_string(s.K));
}

Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& m, const std::vector<std::size_t>& idx, std::size_t from,
                               std::size_t to) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(to - from));
  for (std::size_t c = from; c < to; ++c) out.col(static_cast<Eigen::Index>(c - from)) = m.col(static_cast<Eigen::Index>(idx[c]));
  return out;
}

}  // namespace

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown noise schedule '" + name + "'");
}

std::string to_string(ReverseVariance v) { return v == ReverseVariance::Beta ? "beta" : "beta_tilde"; }

ReverseVariance parse_reverse_variance(const std::string& name) {
  if (name == "beta") return ReverseVariance::Beta;
  if (name == "beta_tilde") return ReverseVariance::BetaTilde;
  throw ConfigError("unknown reverse variance '" + name + "'");
}

double NoiseSchedule::a(int k) const { return 1.0 / std::sqrt(1.0 - beta(k)); }

double NoiseSchedule::b(int k) const { return -beta(k) / (std::sqrt(1.0 - beta(k)) * std::sqrt(1.0 - alpha(k))); }

double NoiseSchedule::reverse_variance(int k, ReverseVariance v) const {
  if (v == ReverseVariance::Beta) return beta(k);
  return beta(k) * (1.0 - alpha_prev(k)) / (1.0 - alpha(k));
}

NoiseSchedule make_schedule(int K, ScheduleKind kind, double beta_min, double beta_max) {
  if (K < 1) throw ConfigError("the number of diffusion steps must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("schedule requires 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.K = K;
  s.kind = kind;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.betas.resize(K);
  if (kind == ScheduleKind::Linear) {
    for (int k = 0; k < K; ++k) s.betas[k] = K == 1 ? beta_min : beta_min + (beta_max - beta_min) * k / (K - 1.0);
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / K + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int k = 0; k < K; ++k) s.betas[k] = std::clamp(1.0 - f(k + 1.0) / f(k), beta_min, beta_max);
  }
  s.alphas.resize(K);
  double prod = 1.0;
  for (int k = 0; k < K; ++k) s.alphas[k] = prod *= 1.0 - s.betas[k];
  return s;
}

NoiseSchedule default_schedule(int K) {
  NoiseSchedule s = make_schedule(K);
  if (s.alpha(K) > 0.05) {
    throw ConfigError("default schedule leaves alpha_K = " + std::to_string(s.alpha(K)) + " > 0.05 at K = " +
                      std::to_string(K));
  }
  return s;
}

Eigen::MatrixXd forward_noising(const NoiseSchedule& s, const Eigen::MatrixXd& u0, int k, const Eigen::MatrixXd& noise) {
  check_step(s, k);
  if (u0.rows() != noise.rows() || u0.cols() != noise.cols()) throw DimensionError("forward_noising: shape mismatch");
  return std::sqrt(s.alpha(k)) * u0 + std::sqrt(1.0 - s.alpha(k)) * noise;
}

Eigen::MatrixXd forward_transition(const NoiseSchedule& s, const Eigen::MatrixXd& u_prev, int k,
                                   const Eigen::MatrixXd& noise) {
  check_step(s, k);
  return std::sqrt(1.0 - s.beta(k)) * u_prev + std::sqrt(s.beta(k)) * noise;
}

Eigen::MatrixXd AffineMap::apply(const Eigen::MatrixXd& x) const {
  if (x.rows() != offset.size()) throw DimensionError("normalizer dimension mismatch");
  return (x.colwise() - offset).array().colwise() / scale.array();
}

Eigen::MatrixXd AffineMap::invert(const Eigen::MatrixXd& z) const {
  if (z.rows() != offset.size()) throw DimensionError("normalizer dimension mismatch");
  return (z.array().colwise() * scale.array()).matrix().colwise() + offset;
}

Normalizer Normalizer::fit(const Eigen::MatrixXd& states, const InputBox& box, int horizon) {
  if (states.cols() == 0) throw DimensionError("cannot fit a normalizer to an empty dataset");
  box.validate();
  Normalizer n;
  n.state.offset = states.rowwise().mean();
  const Eigen::MatrixXd centered = states.colwise() - n.state.offset;
  n.state.scale = (centered.array().square().rowwise().sum() / std::max<double>(1.0, states.cols() - 1.0)).sqrt();
  // Pinned coordinates keep unit scale.
  for (Eigen::Index i = 0; i < n.state.scale.size(); ++i)
    if (!(n.state.scale[i] > 1e-12)) n.state.scale[i] = 1.0;
  const Eigen::VectorXd mid = 0.5 * (box.upper + box.lower);
  const Eigen::VectorXd half = 0.5 * (box.upper - box.lower);
  n.sequence.offset = mid.replicate(horizon, 1);
  n.sequence.scale = half.replicate(horizon, 1);
  return n;
}

void DenoiserArch::validate() const {
  if (depth < 1 || width < 1 || step_embedding < 2 || step_embedding % 2 != 0 || condition_embedding < 1) {
    throw ConfigError("invalid denoiser architecture");
  }
}

Eigen::MatrixXd sinusoidal_embedding(const std::vector<int>& steps, int width) {
  const int half = width / 2;
  Eigen::MatrixXd e(width, static_cast<Eigen::Index>(steps.size()));
  for (std::size_t c = 0; c < steps.size(); ++c) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
      e(2 * i, static_cast<Eigen::Index>(c)) = std::sin(steps[c] * freq);
      e(2 * i + 1, static_cast<Eigen::Index>(c)) = std::cos(steps[c] * freq);
    }
  }
  return e;
}

Denoiser::Denoiser(int state_dim, int sequence_dim, DenoiserArch arch)
    : state_dim_(state_dim),
      sequence_dim_(sequence_dim),
      arch_(arch),
      mlp_([&] {
        arch.validate();
        if (state_dim < 1 || sequence_dim < 1) throw DimensionError("denoiser dimensions must be >= 1");
        return MlpSpec::uniform(sequence_dim + arch.step_embedding + arch.condition_embedding, arch.depth, arch.width,
                                arch.activation, sequence_dim);
      }()),
      cond_weight_(Eigen::MatrixXd::Zero(arch.condition_embedding, state_dim)),
      cond_bias_(Eigen::MatrixXd::Zero(arch.condition_embedding, 1)),
      null_token_(Eigen::MatrixXd::Zero(arch.condition_embedding, 1)) {}

Denoiser Denoiser::initialized(int state_dim, int sequence_dim, DenoiserArch arch, Rng& rng) {
  Denoiser d(state_dim, sequence_dim, arch);
  d.mlp_ = Mlp::initialized(d.mlp_.spec(), rng);
  const double bound = std::sqrt(1.0 / state_dim);
  for (auto* m : {&d.cond_weight_, &d.cond_bias_})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = uniform(rng, -bound, bound);
  for (Eigen::Index i = 0; i < d.null_token_.size(); ++i) d.null_token_.data()[i] = standard_normal(rng);
  return d;
}

std::string Denoiser::digest() const {
  std::ostringstream os;
  os << "denoiser|" << state_dim_ << '|' << sequence_dim_ << '|' << arch_.depth << '|' << arch_.width << '|'
     << to_string(arch_.activation) << '|' << arch_.step_embedding << '|' << arch_.condition_embedding;
  return hex_digest(os.str());
}

Eigen::MatrixXd Denoiser::network_input(const Eigen::MatrixXd& noisy, const std::vector<int>& steps,
                                        const Eigen::MatrixXd& condition,
                                        const std::vector<char>& unconditioned) const {
  const auto B = noisy.cols();
  if (noisy.rows() != sequence_dim_ || static_cast<Eigen::Index>(steps.size()) != B ||
      condition.rows() != state_dim_ || condition.cols() != B || static_cast<Eigen::Index>(unconditioned.size()) != B) {
    throw DimensionError("denoiser input shapes are inconsistent");
  }
  const int se = arch_.step_embedding, ce = arch_.condition_embedding;
  Eigen::MatrixXd in(sequence_dim_ + se + ce, B);
  in.topRows(sequence_dim_) = noisy;
  in.middleRows(sequence_dim_, se) = sinusoidal_embedding(steps, se);
  Eigen::MatrixXd emb = cond_weight_ * condition;
  emb.colwise() += cond_bias_.col(0);
  for (Eigen::Index c = 0; c < B; ++c)
    if (unconditioned[static_cast<std::size_t>(c)]) emb.col(c) = null_token_.col(0);
  in.bottomRows(ce) = emb;
  return in;
}

Eigen::MatrixXd Denoiser::predict(const Eigen::MatrixXd& noisy, const std::vector<int>& steps,
                                  const Eigen::MatrixXd& condition, const std::vector<char>& unconditioned) const {
  return mlp_.forward(network_input(noisy, steps, condition, unconditioned));
}

Eigen::MatrixXd Denoiser::predict(const Eigen::MatrixXd& noisy, const std::vector<int>& steps,
                                  const Eigen::MatrixXd& condition, const std::vector<char>& unconditioned,
                                  Tape& tape) const {
  tape.condition = condition;
  tape.unconditioned = unconditioned;
  return mlp_.forward(network_input(noisy, steps, condition, unconditioned), tape.mlp);
}

void Denoiser::backward(const Tape& tape, const Eigen::MatrixXd& d_out, Tensors& grads) const {
  Tensors mlp_grads;
  const Eigen::MatrixXd d_in = mlp_.backward(tape.mlp, d_out, mlp_grads);
  Eigen::MatrixXd d_emb = d_in.bottomRows(arch_.condition_embedding);
  Eigen::MatrixXd d_null = Eigen::MatrixXd::Zero(arch_.condition_embedding, 1);
  for (Eigen::Index c = 0; c < d_emb.cols(); ++c) {
    if (tape.unconditioned[static_cast<std::size_t>(c)]) {
      d_null += d_emb.col(c);
      d_emb.col(c).setZero();
    }
  }
  grads = std::move(mlp_grads);
  grads.push_back(d_emb * tape.condition.transpose());
  grads.push_back(d_emb.rowwise().sum());
  grads.push_back(std::move(d_null));
}

Tensors Denoiser::params() const {
  Tensors all = mlp_.params();
  all.push_back(cond_weight_);
  all.push_back(cond_bias_);
  all.push_back(null_token_);
  return all;
}

void Denoiser::set_params(const Tensors& all) {
  const std::size_t n = mlp_.params().size();
  if (all.size() != n + 3) throw DimensionError("denoiser parameter block count mismatch");
  mlp_.set_params(Tensors(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n)));
  auto assign = [](Eigen::MatrixXd& dst, const Eigen::MatrixXd& src) {
    if (dst.rows() != src.rows() || dst.cols() != src.cols()) throw DimensionError("denoiser parameter shape mismatch");
    dst = src;
  };
  assign(cond_weight_, all[n]);
  assign(cond_bias_, all[n + 1]);
  assign(null_token_, all[n + 2]);
}

NoisingDraw draw_training_noise(const NoiseSchedule& s, const Eigen::MatrixXd& u0, double p_uncond, Rng& rng) {
  NoisingDraw d;
  const auto B = u0.cols();
  d.noise.resize(u0.rows(), B);
  d.noisy.resize(u0.rows(), B);
  d.steps.resize(static_cast<std::size_t>(B));
  d.unconditioned.resize(static_cast<std::size_t>(B));
  std::uniform_int_distribution<int> step(1, s.K);
  std::bernoulli_distribution drop(p_uncond);
  for (Eigen::Index c = 0; c < B; ++c) {
    const int k = step(rng);
    d.steps[static_cast<std::size_t>(c)] = k;
    d.unconditioned[static_cast<std::size_t>(c)] = drop(rng) ? 1 : 0;
    for (Eigen::Index i = 0; i < u0.rows(); ++i) d.noise(i, c) = standard_normal(rng);
    d.noisy.col(c) = std::sqrt(s.alpha(k)) * u0.col(c) + std::sqrt(1.0 - s.alpha(k)) * d.noise.col(c);
  }
  return d;
}

LossStats training_loss(const NoiseModel& model, const NoiseSchedule& s, const Eigen::MatrixXd& states,
                        const Eigen::MatrixXd& sequences, double p_uncond, Rng& rng) {
  const NoisingDraw d = draw_training_noise(s, sequences, p_uncond, rng);
  LossStats st;
  st.loss = squared_error_loss(model.predict(d.noisy, d.steps, states, d.unconditioned), d.noise, nullptr);
  st.unconditioned = static_cast<int>(std::count(d.unconditioned.begin(), d.unconditioned.end(), 1));
  if (!std::isfinite(st.loss)) throw NonFiniteError("diffusion training loss is not finite");
  return st;
}

LossStats training_loss(const Denoiser& model, const NoiseSchedule& s, const Eigen::MatrixXd& states,
                        const Eigen::MatrixXd& sequences, double p_uncond, Rng& rng, Tensors& grads) {
  const NoisingDraw d = draw_training_noise(s, sequences, p_uncond, rng);
  Denoiser::Tape tape;
  const Eigen::MatrixXd pred = model.predict(d.noisy, d.steps, states, d.unconditioned, tape);
  Eigen::MatrixXd d_pred;
  LossStats st;
  st.loss = squared_error_loss(pred, d.noise, &d_pred);
  st.unconditioned = static_cast<int>(std::count(d.unconditioned.begin(), d.unconditioned.end(), 1));
  if (!std::isfinite(st.loss)) throw NonFiniteError("diffusion training loss is not finite");
  model.backward(tape, d_pred, grads);
  return st;
}

void DiffusionTrainConfig::validate() const {
  if (batch_size < 1 || epochs < 1) throw ConfigError("batch size and epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw ConfigError("p_uncond must lie in [0, 1]");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation fraction must lie in (0, 1)");
  }
  if (K < 1) throw ConfigError("K must be >= 1");
  arch.validate();
}

void dataset_matrices(const Dataset& ds, Eigen::MatrixXd& states, Eigen::MatrixXd& sequences) {
  const auto n = static_cast<Eigen::Index>(ds.records.size());
  states.resize(ds.header.state_dim, n);
  sequences.resize(static_cast<Eigen::Index>(ds.header.horizon) * ds.header.input_dim, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    states.col(c) = ds.records[static_cast<std::size_t>(c)].state;
    sequences.col(c) = ds.records[static_cast<std::size_t>(c)].sequence.flat();
  }
}

TrainResult train_diffusion(const Eigen::MatrixXd& states, const Eigen::MatrixXd& sequences, const InputBox& box,
                            int horizon, const DiffusionTrainConfig& cfg, const std::string& spec_digest) {
  cfg.validate();
  box.validate();
  const auto N = static_cast<std::size_t>(states.cols());
  if (N == 0) throw DimensionError("cannot train on an empty dataset");
  if (sequences.cols() != states.cols() || sequences.rows() != horizon * box.dim()) {
    throw DimensionError("training sequences do not match the horizon and input box");
  }

  DiffusionModel model{Denoiser(static_cast<int>(states.rows()), static_cast<int>(sequences.rows()), cfg.arch),
                       cfg.K == 25 && cfg.schedule == ScheduleKind::Linear && cfg.beta_min == 0.02 &&
                               cfg.beta_max == 0.35
                           ? default_schedule(25)
                           : make_schedule(cfg.K, cfg.schedule, cfg.beta_min, cfg.beta_max),
                       cfg.variance,
                       Normalizer::fit(states, box, horizon),
                       box,
                       horizon,
                       box.dim(),
                       spec_digest};
  const Eigen::MatrixXd xs = model.normalizer.state.apply(states);
  const Eigen::MatrixXd us = model.normalizer.sequence.apply(sequences);

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = make_stream(cfg.seed, {1});
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_val =
      N < 2 ? 0 : std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(cfg.validation_fraction * N)), 1, N - 1);
  const std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  const std::vector<std::size_t>& val_idx = n_val ? val : train;
  const Eigen::MatrixXd val_x = gather_columns(xs, val_idx, 0, val_idx.size());
  const Eigen::MatrixXd val_u = gather_columns(us, val_idx, 0, val_idx.size());

  Rng init_rng = make_stream(cfg.seed, {2});
  model.denoiser = Denoiser::initialized(model.denoiser.state_dim(), model.denoiser.sequence_dim(), cfg.arch, init_rng);
  Tensors params = model.denoiser.params();
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  Adam adam(adam_cfg, params);

  std::vector<TrainLogRow> log;
  int best_epoch = 0;
  Tensors best = params;
  double best_val = INFINITY;
  Tensors grads;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng = make_stream(cfg.seed, {3, static_cast<std::uint64_t>(epoch)});
    std::shuffle(train.begin(), train.end(), shuffle_rng);
    Rng noise_rng = make_stream(cfg.seed, {4, static_cast<std::uint64_t>(epoch)});
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t from = 0; from < train.size(); from += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t to = std::min(train.size(), from + static_cast<std::size_t>(cfg.batch_size));
      const LossStats st = training_loss(model.denoiser, model.schedule, gather_columns(xs, train, from, to),
                                         gather_columns(us, train, from, to), cfg.p_uncond, noise_rng, grads);
      adam.step(params, grads);
      model.denoiser.set_params(params);
      sum += st.loss;
      ++batches;
    }
    Rng val_rng = make_stream(cfg.seed, {5});
    const double val_loss = training_loss(model.denoiser, model.schedule, val_x, val_u, cfg.p_uncond, val_rng).loss;
    const double train_loss = sum / static_cast<double>(batches);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss) || !all_finite(params)) {
      throw NonFiniteError("diffusion training diverged at epoch " + std::to_string(epoch));
    }
    log.push_back({epoch, train_loss, val_loss});
    if (val_loss < best_val) {
      best_val = val_loss;
      best = params;
      best_epoch = epoch;
    }
  }
  model.denoiser.set_params(best);
  return TrainResult{std::move(model), std::move(log), best_epoch};
}

TrainResult train_diffusion(const Dataset& ds, const InputBox& box, const DiffusionTrainConfig& cfg) {
  Eigen::MatrixXd states, sequences;
  dataset_matrices(ds, states, sequences);
  return train_diffusion(states, sequences, box, ds.header.horizon, cfg, ds.header.spec_digest);
}

void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "epoch,train_loss,validation_loss\n";
  char buf[96];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", r.epoch, r.train_loss, r.validation_loss);
    out << buf;
  }
}

Eigen::MatrixXd guided_noise(const NoiseModel& model, const Eigen::MatrixXd& noisy, int k,
                             const Eigen::MatrixXd& condition, double guidance_w) {
  const auto B = static_cast<std::size_t>(noisy.cols());
  const std::vector<int> steps(B, k);
  const Eigen::MatrixXd cond = model.predict(noisy, steps, condition, std::vector<char>(B, 0));
  if (guidance_w == 0.0) return cond;
  const Eigen::MatrixXd uncond = model.predict(noisy, steps, condition, std::vector<char>(B, 1));
  return (1.0 + guidance_w) * cond - guidance_w * uncond;
}

Eigen::MatrixXd reverse_step(const NoiseModel& model, const NoiseSchedule& s, ReverseVariance variance,
                             const Eigen::MatrixXd& noisy, int k, const Eigen::VectorXd& condition, double guidance_w,
                             std::vector<Rng>& rngs, double variance_override) {
  check_step(s, k);
  if (static_cast<Eigen::Index>(rngs.size()) != noisy.cols()) {
    throw DimensionError("reverse_step needs one random stream per column");
  }
  const Eigen::MatrixXd cond = condition.replicate(1, noisy.cols());
  const Eigen::MatrixXd eps = guided_noise(model, noisy, k, cond, guidance_w);
  Eigen::MatrixXd out = s.a(k) * noisy + s.b(k) * eps;
  if (k > 1) {
    const double sd = std::sqrt(variance_override >= 0.0 ? variance_override : s.reverse_variance(k, variance));
    for (Eigen::Index c = 0; c < out.cols(); ++c)
      for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, c) += sd * standard_normal(rngs[static_cast<std::size_t>(c)]);
  }
  return out;
}

std::vector<ControlSequence> sample_sequences(const DiffusionModel& model, const State& x, double guidance_w,
                                              std::vector<Rng>& rngs, SamplingCounters* counters) {
  if (x.size() != model.state_dim()) throw DimensionError("sample_sequences: state dimension mismatch");
  const auto M = static_cast<Eigen::Index>(rngs.size());
  const Eigen::Index d = model.denoiser.sequence_dim();
  const Eigen::VectorXd cond = model.normalizer.state.apply(x);
  Eigen::MatrixXd u(d, M);
  for (Eigen::Index c = 0; c < M; ++c)
    for (Eigen::Index i = 0; i < d; ++i) u(i, c) = standard_normal(rngs[static_cast<std::size_t>(c)]);
  for (int k = model.schedule.K; k >= 1; --k) {
    u = reverse_step(model.denoiser, model.schedule, model.variance, u, k, cond, guidance_w, rngs);
    if (counters) {
      counters->reverse_steps += static_cast<std::uint64_t>(M);
      counters->network_evaluations += guidance_w == 0.0 ? 1 : 2;
    }
  }
  const Eigen::MatrixXd phys = model.normalizer.sequence.invert(u);
  std::vector<ControlSequence> out;
  out.reserve(static_cast<std::size_t>(M));
  for (Eigen::Index c = 0; c < M; ++c) {
    Eigen::VectorXd flat = phys.col(c);
    for (Eigen::Index i = 0; i < d; ++i) {
      const Eigen::Index j = i % model.input_dim;
      // A non-finite entry would survive clamping; map it to the box centre.
      if (!std::isfinite(flat[i])) flat[i] = 0.5 * (model.box.lower[j] + model.box.upper[j]);
      flat[i] = std::clamp(flat[i], model.box.lower[j], model.box.upper[j]);
    }
    out.emplace_back(std::move(flat), model.input_dim);
  }
  return out;
}

ControlSequence sample_sequence(const DiffusionModel& model, const State& x, double guidance_w, Rng& rng) {
  std::vector<Rng> rngs{rng};
  auto out = sample_sequences(model, x, guidance_w, rngs);
  rng = rngs[0];
  return std::move(out[0]);
}

void save_diffusion_model(const DiffusionModel& model, const std::string& path) {
  const auto& a = model.denoiser.arch();
  nlohmann::ordered_json meta;
  meta["state_dim"] = model.state_dim();
  meta["horizon"] = model.horizon;
  meta["input_dim"] = model.input_dim;
  meta["spec_digest"] = model.spec_digest;
  meta["arch"] = {{"depth", a.depth},
                  {"width", a.width},
                  {"activation", to_string(a.activation)},
                  {"step_embedding", a.step_embedding},
                  {"condition_embedding", a.condition_embedding}};
  meta["schedule"] = {{"K", model.schedule.K},
                      {"kind", to_string(model.schedule.kind)},
                      {"beta_min", model.schedule.beta_min},
                      {"beta_max", model.schedule.beta_max}};
  meta["variance"] = to_string(model.variance);
  meta["normalizer"] = {{"state_offset", vector_json(model.normalizer.state.offset)},
                        {"state_scale", vector_json(model.normalizer.state.scale)},
                        {"sequence_offset", vector_json(model.normalizer.sequence.offset)},
                        {"sequence_scale", vector_json(model.normalizer.sequence.scale)}};
  meta["box"] = {{"lower", vector_json(model.box.lower)}, {"upper", vector_json(model.box.upper)}};
  save_checkpoint({"denoiser", model.denoiser.digest(), meta.dump(), model.denoiser.params()}, path);
}

DiffusionModel load_diffusion_model(const std::string& path) {
  const Checkpoint c = load_checkpoint(path, "denoiser");
  try {
    const json meta = json::parse(c.meta);
    DenoiserArch a;
    const auto& ja = meta.at("arch");
    a.depth = ja.at("depth").get<int>();
    a.width = ja.at("width").get<int>();
    a.activation = parse_activation(ja.at("activation").get<std::string>());
    a.step_embedding = ja.at("step_embedding").get<int>();
    a.condition_embedding = ja.at("condition_embedding").get<int>();
    const int horizon = meta.at("horizon").get<int>();
    const int input_dim = meta.at("input_dim").get<int>();
    Denoiser den(meta.at("state_dim").get<int>(), horizon * input_dim, a);
    if (den.digest() != c.digest) throw FormatError("architecture digest mismatch in '" + path + "'");
    den.set_params(c.tensors);
    const auto& js = meta.at("schedule");
    DiffusionModel m{std::move(den),
                     make_schedule(js.at("K").get<int>(), parse_schedule_kind(js.at("kind").get<std::string>()),
                                   js.at("beta_min").get<double>(), js.at("beta_max").get<double>()),
                     parse_reverse_variance(meta.at("variance").get<std::string>()),
                     {},
                     {},
                     horizon,
                     input_dim,
                     meta.at("spec_digest").get<std::string>()};
    const auto& jn = meta.at("normalizer");
    m.normalizer.state = {json_vector(jn.at("state_offset")), json_vector(jn.at("state_scale"))};
    m.normalizer.sequence = {json_vector(jn.at("sequence_offset")), json_vector(jn.at("sequence_scale"))};
    m.box.lower = json_vector(meta.at("box").at("lower"));
    m.box.upper = json_vector(meta.at("box").at("upper"));
    m.box.validate();
    return m;
  } catch (const json::exception& e) {
    throw FormatError("malformed denoiser metadata in '" + path + "': " + e.what());
  }
}

}  // namespace diffmpc
