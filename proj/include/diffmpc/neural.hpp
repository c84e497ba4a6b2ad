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

#include "diffmpc/random.hpp"
#include "diffmpc/types.hpp"

namespace diffmpc {

enum class Activation { Tanh, SiLU, ReLU };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

/// Parameter blocks as a flat list of matrices. Biases are single-column matrices.
using Tensors = std::vector<Eigen::MatrixXd>;

Tensors zeros_like(const Tensors& t);
std::size_t parameter_count(const Tensors& t);
bool all_finite(const Tensors& t);

struct MlpSpec {
  int input_dim = 1;
  std::vector<int> hidden;             // widths of the hidden layers
  std::vector<Activation> activations;  // one per hidden layer
  int output_dim = 1;                   // identity output

  static MlpSpec uniform(int input_dim, int depth, int width, Activation act, int output_dim);
  void validate() const;
  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }
  std::string digest() const;
};

/// Intermediates recorded by a forward pass; samples are columns.
struct MlpTape {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre;   // affine outputs per layer
  std::vector<Eigen::MatrixXd> post;  // activations per hidden layer
};

/// Dense feed-forward network. Parameter layout is [W0, b0, W1, b1, ...].
class Mlp {
 public:
  explicit Mlp(MlpSpec spec);  // zero parameters

  /// Weights and biases uniform in +-sqrt(1 / fan_in).
  static Mlp initialized(MlpSpec spec, Rng& rng);

  const MlpSpec& spec() const { return spec_; }
  Tensors& params() { return params_; }
  const Tensors& params() const { return params_; }
  void set_params(Tensors params);

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, MlpTape& tape) const;

  /// Overwrites `grads` with d(loss)/d(params) and returns d(loss)/d(input),
  /// given d(loss)/d(output) for the taped batch.
  Eigen::MatrixXd backward(const MlpTape& tape, const Eigen::MatrixXd& d_out, Tensors& grads) const;

 private:
  void check_input(const Eigen::MatrixXd& x) const;

  MlpSpec spec_;
  Tensors params_;
};

/// Mean over columns of the squared error norm; optionally writes the gradient.
double squared_error_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, Eigen::MatrixXd* d_pred);

struct AdamConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

class Adam {
 public:
  Adam(AdamConfig cfg, const Tensors& like);

  /// Bias-corrected Adam update; throws NonFiniteError on a non-finite gradient.
  void step(Tensors& params, const Tensors& grads);

  const AdamConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  std::int64_t steps() const { return t_; }
  const Tensors& first_moment() const { return m_; }
  const Tensors& second_moment() const { return v_; }

 private:
  AdamConfig cfg_;
  Tensors m_;
  Tensors v_;
  std::int64_t t_ = 0;
};

struct Checkpoint {
  std::string kind;    // e.g. "denoiser", "behavior_clone"
  std::string digest;  // architecture digest checked on load
  std::string meta;    // JSON text with everything else needed to rebuild the model
  Tensors tensors;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

/// Throws FormatError on corruption, version or kind mismatch, and when
/// `expected_digest` is nonempty and differs from the stored one.
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind,
                           const std::string& expected_digest = {});

}  // namespace diffmpc
