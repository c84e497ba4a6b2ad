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

#include "diffmpc/datagen.hpp"
#include "diffmpc/neural.hpp"
#include "diffmpc/random.hpp"
#include "diffmpc/types.hpp"

namespace diffmpc {

enum class ScheduleKind { Linear, Cosine };
enum class ReverseVariance { Beta, BetaTilde };

std::string to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ReverseVariance v);
ReverseVariance parse_reverse_variance(const std::string& name);

/// Diffusion steps are numbered k = 1..K; vectors are stored 0-based.
struct NoiseSchedule {
  int K = 0;
  ScheduleKind kind = ScheduleKind::Linear;
  double beta_min = 0.0;
  double beta_max = 0.0;
  Eigen::VectorXd betas;
  Eigen::VectorXd alphas;  // cumulative products of (1 - beta)

  double beta(int k) const { return betas[k - 1]; }
  double alpha(int k) const { return alphas[k - 1]; }
  double alpha_prev(int k) const { return k == 1 ? 1.0 : alphas[k - 2]; }
  double a(int k) const;  // 1 / sqrt(1 - beta_k)
  double b(int k) const;  // -beta_k / (sqrt(1 - beta_k) sqrt(1 - alpha_k))
  double reverse_variance(int k, ReverseVariance v) const;
};

/// Linear betas from beta_min to beta_max, or the cosine schedule with betas
/// clipped to [beta_min, beta_max].
NoiseSchedule make_schedule(int K, ScheduleKind kind = ScheduleKind::Linear, double beta_min = 0.02,
                            double beta_max = 0.35);

/// Default linear schedule; additionally requires alpha_K <= 0.05.
NoiseSchedule default_schedule(int K = 25);

/// u^k = sqrt(alpha_k) u0 + sqrt(1 - alpha_k) noise, columnwise.
Eigen::MatrixXd forward_noising(const NoiseSchedule& s, const Eigen::MatrixXd& u0, int k, const Eigen::MatrixXd& noise);

/// One forward transition u^{k-1} -> u^k with fresh noise.
Eigen::MatrixXd forward_transition(const NoiseSchedule& s, const Eigen::MatrixXd& u_prev, int k,
                                   const Eigen::MatrixXd& noise);

/// x -> (x - offset) / scale per entry.
struct AffineMap {
  Eigen::VectorXd offset;
  Eigen::VectorXd scale;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd invert(const Eigen::MatrixXd& z) const;
  friend bool operator==(const AffineMap&, const AffineMap&) = default;
};

/// States use the dataset mean and standard deviation; sequences map the input box onto [-1, 1].
struct Normalizer {
  AffineMap state;
  AffineMap sequence;

  static Normalizer fit(const Eigen::MatrixXd& states, const InputBox& box, int horizon);
  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

/// Anything that predicts the noise in u^k. `unconditioned[i] != 0` replaces
/// the condition of column i by the null token.
class NoiseModel {
 public:
  virtual ~NoiseModel() = default;
  virtual Eigen::MatrixXd predict(const Eigen::MatrixXd& noisy, const std::vector<int>& steps,
                                  const Eigen::MatrixXd& condition, const std::vector<char>& unconditioned) const = 0;
};

struct DenoiserArch {
  int depth = 3;
  int width = 256;
  Activation activation = Activation::SiLU;
  int step_embedding = 32;
  int condition_embedding = 32;

  void validate() const;
};

Eigen::MatrixXd sinusoidal_embedding(const std::vector<int>& steps, int width);

/// MLP over [u^k | step embedding | W_c x + b_c or null token].
class Denoiser : public NoiseModel {
 public:
  Denoiser(int state_dim, int sequence_dim, DenoiserArch arch);  // zero parameters
  static Denoiser initialized(int state_dim, int sequence_dim, DenoiserArch arch, Rng& rng);

  int state_dim() const { return state_dim_; }
  int sequence_dim() const { return sequence_dim_; }
  const DenoiserArch& arch() const { return arch_; }
  std::string digest() const;

  Eigen::MatrixXd predict(const Eigen::MatrixXd& noisy, const std::vector<int>& steps,
                          const Eigen::MatrixXd& condition, const std::vector<char>& unconditioned) const override;

  struct Tape {
    MlpTape mlp;
    Eigen::MatrixXd condition;
    std::vector<char> unconditioned;
  };
  Eigen::MatrixXd predict(const Eigen::MatrixXd& noisy, const std::vector<int>& steps,
                          const Eigen::MatrixXd& condition, const std::vector<char>& unconditioned, Tape& tape) const;

  /// Gradients for all parameters in the order of params(): MLP blocks, then
  /// W_c, b_c and the null token.
  void backward(const Tape& tape, const Eigen::MatrixXd& d_out, Tensors& grads) const;

  Tensors params() const;
  void set_params(const Tensors& all);
  const Eigen::MatrixXd& null_token() const { return null_token_; }

 private:
  Eigen::MatrixXd network_input(const Eigen::MatrixXd& noisy, const std::vector<int>& steps,
                                const Eigen::MatrixXd& condition, const std::vector<char>& unconditioned) const;

  int state_dim_;
  int sequence_dim_;
  DenoiserArch arch_;
  Mlp mlp_;
  Eigen::MatrixXd cond_weight_;
  Eigen::MatrixXd cond_bias_;
  Eigen::MatrixXd null_token_;
};

/// Random variables of one training batch.
struct NoisingDraw {
  Eigen::MatrixXd noisy;
  Eigen::MatrixXd noise;
  std::vector<int> steps;
  std::vector<char> unconditioned;
};

NoisingDraw draw_training_noise(const NoiseSchedule& s, const Eigen::MatrixXd& u0, double p_uncond, Rng& rng);

struct LossStats {
  double loss = 0.0;
  int unconditioned = 0;
};

/// Mean over the batch of ||noise - prediction||^2 with classifier-free
/// condition dropout. Inputs are normalized; samples are columns.
LossStats training_loss(const NoiseModel& model, const NoiseSchedule& s, const Eigen::MatrixXd& states,
                        const Eigen::MatrixXd& sequences, double p_uncond, Rng& rng);

/// Same, with gradients for all denoiser parameters.
LossStats training_loss(const Denoiser& model, const NoiseSchedule& s, const Eigen::MatrixXd& states,
                        const Eigen::MatrixXd& sequences, double p_uncond, Rng& rng, Tensors& grads);

struct DiffusionTrainConfig {
  int batch_size = 256;
  int epochs = 100;
  double learning_rate = 3e-3;
  double p_uncond = 0.25;
  int K = 25;
  ScheduleKind schedule = ScheduleKind::Linear;
  double beta_min = 0.02;
  double beta_max = 0.35;
  ReverseVariance variance = ReverseVariance::Beta;
  DenoiserArch arch;
  double validation_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Trained conditional model with everything needed to sample in physical units.
struct DiffusionModel {
  Denoiser denoiser;
  NoiseSchedule schedule;
  ReverseVariance variance = ReverseVariance::Beta;
  Normalizer normalizer;
  InputBox box;
  int horizon = 0;
  int input_dim = 0;
  std::string spec_digest;

  int state_dim() const { return denoiser.state_dim(); }
};

struct TrainLogRow {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainResult {
  DiffusionModel model;  // parameters from the best validation epoch
  std::vector<TrainLogRow> log;
  int best_epoch = 0;
};

/// Trains on raw (state, sequence) pairs. Throws NonFiniteError on divergence.
TrainResult train_diffusion(const Eigen::MatrixXd& states, const Eigen::MatrixXd& sequences, const InputBox& box,
                            int horizon, const DiffusionTrainConfig& cfg, const std::string& spec_digest = {});
TrainResult train_diffusion(const Dataset& ds, const InputBox& box, const DiffusionTrainConfig& cfg);

void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::string& path);

/// Columns of a dataset as matrices (states n_x x N, sequences H n_u x N).
void dataset_matrices(const Dataset& ds, Eigen::MatrixXd& states, Eigen::MatrixXd& sequences);

/// Classifier-free combination (1 + w) eps_cond - w eps_uncond.
Eigen::MatrixXd guided_noise(const NoiseModel& model, const Eigen::MatrixXd& noisy, int k,
                             const Eigen::MatrixXd& condition, double guidance_w);

/// One reverse transition for a batch of columns sharing step k and the
/// (normalized) condition. Column i draws its noise from rngs[i]. A negative
/// `variance_override` uses the schedule's reverse variance.
Eigen::MatrixXd reverse_step(const NoiseModel& model, const NoiseSchedule& s, ReverseVariance variance,
                             const Eigen::MatrixXd& noisy, int k, const Eigen::VectorXd& condition, double guidance_w,
                             std::vector<Rng>& rngs, double variance_override = -1.0);

/// Counters for budget accounting.
struct SamplingCounters {
  std::uint64_t reverse_steps = 0;  // per candidate
  std::uint64_t network_evaluations = 0;
};

/// M samples, one per rng stream: full reverse chain from N(0, I), then
/// denormalize and clamp into the box.
std::vector<ControlSequence> sample_sequences(const DiffusionModel& model, const State& x, double guidance_w,
                                              std::vector<Rng>& rngs, SamplingCounters* counters = nullptr);

ControlSequence sample_sequence(const DiffusionModel& model, const State& x, double guidance_w, Rng& rng);

void save_diffusion_model(const DiffusionModel& model, const std::string& path);
DiffusionModel load_diffusion_model(const std::string& path);

}  // namespace diffmpc
