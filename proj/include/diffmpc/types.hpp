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
#include <stdexcept>
#include <string>

namespace diffmpc {

using State = Eigen::VectorXd;
using Input = Eigen::VectorXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree (state/input/sequence dimensions, layer widths).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A rollout, cost or loss produced NaN/Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or corrupted artifact file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// H inputs of width n_u, stored flat: step i occupies [i*n_u, (i+1)*n_u).
class ControlSequence {
 public:
  ControlSequence() = default;
  ControlSequence(int horizon, int input_dim)
      : values_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(horizon) * input_dim)),
        input_dim_(input_dim) {}
  ControlSequence(Eigen::VectorXd flat, int input_dim) : values_(std::move(flat)), input_dim_(input_dim) {
    if (input_dim_ <= 0 || values_.size() % input_dim_ != 0) {
      throw DimensionError("control sequence length is not a multiple of the input dimension");
    }
  }

  int horizon() const { return input_dim_ == 0 ? 0 : static_cast<int>(values_.size() / input_dim_); }
  int input_dim() const { return input_dim_; }

  auto input(int i) { return values_.segment(static_cast<Eigen::Index>(i) * input_dim_, input_dim_); }
  auto input(int i) const { return values_.segment(static_cast<Eigen::Index>(i) * input_dim_, input_dim_); }

  Eigen::VectorXd& flat() { return values_; }
  const Eigen::VectorXd& flat() const { return values_; }

  bool all_finite() const { return values_.allFinite(); }

  friend bool operator==(const ControlSequence& a, const ControlSequence& b) {
    return a.input_dim_ == b.input_dim_ && a.values_.size() == b.values_.size() && a.values_ == b.values_;
  }

 private:
  Eigen::VectorXd values_;
  int input_dim_ = 0;
};

/// Componentwise input bounds, lower < upper.
struct InputBox {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static InputBox symmetric(int input_dim, double bound) {
    return {Eigen::VectorXd::Constant(input_dim, -bound), Eigen::VectorXd::Constant(input_dim, bound)};
  }

  int dim() const { return static_cast<int>(lower.size()); }
  void validate() const;
  bool contains(const ControlSequence& u) const;
  bool contains(const Input& u) const;
};

/// Euclidean distance between two equally shaped sequences.
double sequence_distance(const ControlSequence& a, const ControlSequence& b);

}  // namespace diffmpc
