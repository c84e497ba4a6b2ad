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

#include "diffmpc/neural.hpp"

#include <cmath>
#include <sstream>

#include "diffmpc/binary_io.hpp"

namespace diffmpc {

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'M', 'P', 'C', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void activate(Activation a, const Eigen::MatrixXd& z, Eigen::MatrixXd& out) {
  switch (a) {
    case Activation::Tanh:
      out = z.array().tanh();
      break;
    case Activation::SiLU:
      out = z.array() / (1.0 + (-z.array()).exp());
      break;
    case Activation::ReLU:
      out = z.array().max(0.0);
      break;
  }
}

// d(out)/d(z) elementwise, multiplied into `grad`.
void activation_backward(Activation a, const Eigen::MatrixXd& z, const Eigen::MatrixXd& out, Eigen::MatrixXd& grad) {
  switch (a) {
    case Activation::Tanh:
      grad.array() *= 1.0 - out.array().square();
      break;
    case Activation::SiLU: {
      const Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
      grad.array() *= s * (1.0 + z.array() * (1.0 - s));
      break;
    }
    case Activation::ReLU:
      grad.array() *= (z.array() > 0.0).cast<double>();
      break;
  }
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh:
      return "tanh";
    case Activation::SiLU:
      return "silu";
    case Activation::ReLU:
      return "relu";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "silu") return Activation::SiLU;
  if (name == "relu") return Activation::ReLU;
  throw ConfigError("unknown activation '" + name + "'");
}

Tensors zeros_like(const Tensors& t) {
  Tensors z;
  z.reserve(t.size());
  for (const auto& m : t) z.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
  return z;
}

std::size_t parameter_count(const Tensors& t) {
  std::size_t n = 0;
  for (const auto& m : t) n += static_cast<std::size_t>(m.size());
  return n;
}

bool all_finite(const Tensors& t) {
  for (const auto& m : t)
    if (!m.allFinite()) return false;
  return true;
}

MlpSpec MlpSpec::uniform(int input_dim, int depth, int width, Activation act, int output_dim) {
  MlpSpec s;
  s.input_dim = input_dim;
  s.hidden.assign(static_cast<std::size_t>(depth), width);
  s.activations.assign(static_cast<std::size_t>(depth), act);
  s.output_dim = output_dim;
  return s;
}

void MlpSpec::validate() const {
  if (hidden.empty()) throw ConfigError("an MLP needs at least one hidden layer");
  if (activations.size() != hidden.size()) throw ConfigError("one activation per hidden layer is required");
  if (input_dim < 1 || output_dim < 1) throw ConfigError("MLP input and output widths must be >= 1");
  for (int w : hidden)
    if (w < 1) throw ConfigError("hidden widths must be >= 1");
}

std::string MlpSpec::digest() const {
  std::ostringstream os;
  os << "mlp|" << input_dim;
  for (std::size_t i = 0; i < hidden.size(); ++i) os << '|' << hidden[i] << ':' << to_string(activations[i]);
  os << '|' << output_dim;
  return hex_digest(os.str());
}

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  int fan_in = spec_.input_dim;
  for (int l = 0; l < spec_.layer_count(); ++l) {
    const int fan_out = l + 1 < spec_.layer_count() ? spec_.hidden[static_cast<std::size_t>(l)] : spec_.output_dim;
    params_.push_back(Eigen::MatrixXd::Zero(fan_out, fan_in));
    params_.push_back(Eigen::MatrixXd::Zero(fan_out, 1));
    fan_in = fan_out;
  }
}

Mlp Mlp::initialized(MlpSpec spec, Rng& rng) {
  Mlp net(std::move(spec));
  for (std::size_t l = 0; l < net.params_.size(); l += 2) {
    const double bound = std::sqrt(1.0 / static_cast<double>(net.params_[l].cols()));
    for (std::size_t k : {l, l + 1}) {
      auto& m = net.params_[k];
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -bound, bound);
    }
  }
  return net;
}

void Mlp::set_params(Tensors params) {
  if (params.size() != params_.size()) throw DimensionError("parameter block count does not match the MLP");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != params_[i].rows() || params[i].cols() != params_[i].cols()) {
      throw DimensionError("parameter block " + std::to_string(i) + " has the wrong shape");
    }
  }
  params_ = std::move(params);
}

void Mlp::check_input(const Eigen::MatrixXd& x) const {
  if (x.rows() != spec_.input_dim) {
    throw DimensionError("MLP expects input width " + std::to_string(spec_.input_dim) + ", got " +
                         std::to_string(x.rows()));
  }
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
  check_input(x);
  Eigen::MatrixXd h = x, z;
  for (int l = 0; l < spec_.layer_count(); ++l) {
    const auto& W = params_[2 * static_cast<std::size_t>(l)];
    const auto& b = params_[2 * static_cast<std::size_t>(l) + 1];
    z.noalias() = W * h;
    z.colwise() += b.col(0);
    if (l + 1 == spec_.layer_count()) return z;
    activate(spec_.activations[static_cast<std::size_t>(l)], z, h);
  }
  return z;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, MlpTape& tape) const {
  check_input(x);
  const auto L = static_cast<std::size_t>(spec_.layer_count());
  tape.input = x;
  tape.pre.resize(L);
  tape.post.resize(L - 1);
  for (std::size_t l = 0; l < L; ++l) {
    const Eigen::MatrixXd& h = l == 0 ? tape.input : tape.post[l - 1];
    tape.pre[l].noalias() = params_[2 * l] * h;
    tape.pre[l].colwise() += params_[2 * l + 1].col(0);
    if (l + 1 < L) activate(spec_.activations[l], tape.pre[l], tape.post[l]);
  }
  return tape.pre.back();
}

Eigen::MatrixXd Mlp::backward(const MlpTape& tape, const Eigen::MatrixXd& d_out, Tensors& grads) const {
  const auto L = static_cast<std::size_t>(spec_.layer_count());
  if (tape.pre.size() != L || d_out.rows() != spec_.output_dim || d_out.cols() != tape.input.cols()) {
    throw DimensionError("backward: output gradient does not match the taped forward pass");
  }
  if (grads.size() != params_.size()) grads = zeros_like(params_);
  Eigen::MatrixXd delta = d_out;
  for (std::size_t l = L; l-- > 0;) {
    const Eigen::MatrixXd& h = l == 0 ? tape.input : tape.post[l - 1];
    grads[2 * l].noalias() = delta * h.transpose();
    grads[2 * l + 1] = delta.rowwise().sum();
    Eigen::MatrixXd below = params_[2 * l].transpose() * delta;
    if (l > 0) activation_backward(spec_.activations[l - 1], tape.pre[l - 1], tape.post[l - 1], below);
    delta = std::move(below);
  }
  return delta;
}

double squared_error_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, Eigen::MatrixXd* d_pred) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || pred.cols() == 0) {
    throw DimensionError("squared_error_loss: shape mismatch or empty batch");
  }
  const double n = static_cast<double>(pred.cols());
  const Eigen::MatrixXd diff = pred - target;
  if (d_pred) *d_pred = (2.0 / n) * diff;
  return diff.squaredNorm() / n;
}

void AdamConfig::validate() const {
  if (!(learning_rate > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
      !(epsilon > 0.0)) {
    throw ConfigError("invalid Adam settings");
  }
}

Adam::Adam(AdamConfig cfg, const Tensors& like) : cfg_(cfg), m_(zeros_like(like)), v_(zeros_like(like)) {
  cfg_.validate();
}

void Adam::step(Tensors& params, const Tensors& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw DimensionError("Adam: block count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].rows() != m_[i].rows() || grads[i].cols() != m_[i].cols() || params[i].rows() != m_[i].rows() ||
        params[i].cols() != m_[i].cols()) {
      throw DimensionError("Adam: block " + std::to_string(i) + " shape mismatch");
    }
    if (!grads[i].allFinite()) throw NonFiniteError("Adam: non-finite gradient in block " + std::to_string(i));
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseAbs2();
    params[i].array() -=
        cfg_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.epsilon);
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  if (!all_finite(ckpt.tensors)) throw NonFiniteError("refusing to save non-finite parameters");
  ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 8));
  w.put_u32(kCheckpointVersion);
  w.put_string(ckpt.kind);
  w.put_string(ckpt.digest);
  w.put_string(ckpt.meta);
  w.put_u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& m : ckpt.tensors) {
    w.put_u32(static_cast<std::uint32_t>(m.rows()));
    w.put_u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.put_f64(m.data()[i]);
  }
  write_checksummed(path, w.bytes());
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind,
                           const std::string& expected_digest) {
  const std::string bytes = read_checksummed(path);
  ByteReader r(bytes);
  if (r.get_bytes(8) != std::string_view(kCheckpointMagic, 8)) {
    throw FormatError("'" + path + "' is not a checkpoint file");
  }
  const auto version = r.get_u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  Checkpoint c;
  c.kind = r.get_string();
  c.digest = r.get_string();
  c.meta = r.get_string();
  if (!expected_kind.empty() && c.kind != expected_kind) {
    throw FormatError("'" + path + "' holds a " + c.kind + " checkpoint, expected " + expected_kind);
  }
  if (!expected_digest.empty() && c.digest != expected_digest) {
    throw FormatError("architecture digest mismatch in '" + path + "': stored " + c.digest + ", expected " +
                      expected_digest);
  }
  const auto count = r.get_u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto rows = r.get_u32();
    const auto cols = r.get_u32();
    if (static_cast<std::uint64_t>(rows) * cols * 8 > r.remaining()) throw FormatError("truncated checkpoint");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.get_f64();
    c.tensors.push_back(std::move(m));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint");
  return c;
}

}  // namespace diffmpc
