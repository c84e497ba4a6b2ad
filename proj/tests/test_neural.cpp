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

#include <cmath>
#include <filesystem>

#include "diffmpc/binary_io.hpp"
#include "diffmpc/neural.hpp"
#include "doctest.h"

using namespace diffmpc;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("diffmpc_test_neural_" + name)).string();
}

Eigen::MatrixXd random_matrix(Rng& rng, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

// Scalar probe L = <C, net(X)> so that dL/d(out) = C.
double probe(const Mlp& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& c) {
  return (net.forward(x).array() * c.array()).sum();
}

double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-12);
}

}  // namespace

TEST_CASE("forward with zero parameters is zero") {
  Mlp net(MlpSpec::uniform(3, 2, 5, Activation::Tanh, 2));
  Rng rng = make_stream(1, {});
  CHECK(net.forward(random_matrix(rng, 3, 7)).isZero(0.0));
  CHECK_THROWS_AS(net.forward(Eigen::MatrixXd::Zero(4, 1)), DimensionError);
}

TEST_CASE("forward matches an explicit dense-product oracle") {
  Rng rng = make_stream(2, {});
  for (auto act : {Activation::Tanh, Activation::SiLU, Activation::ReLU}) {
    const Mlp net = Mlp::initialized(MlpSpec::uniform(3, 1, 4, act, 2), rng);
    const Eigen::MatrixXd x = random_matrix(rng, 3, 5);
    const auto& p = net.params();
    const Eigen::MatrixXd y = net.forward(x);
    for (int s = 0; s < 5; ++s) {
      double h[4];
      for (int i = 0; i < 4; ++i) {
        double z = p[1](i, 0);
        for (int j = 0; j < 3; ++j) z += p[0](i, j) * x(j, s);
        h[i] = act == Activation::Tanh ? std::tanh(z) : act == Activation::SiLU ? z / (1 + std::exp(-z)) : std::max(z, 0.0);
      }
      for (int o = 0; o < 2; ++o) {
        double v = p[3](o, 0);
        for (int i = 0; i < 4; ++i) v += p[2](o, i) * h[i];
        CHECK(std::abs(y(o, s) - v) < 1e-14);
      }
    }
  }
}

TEST_CASE("tanh hidden activations stay in (-1, 1)") {
  Rng rng = make_stream(3, {});
  const Mlp net = Mlp::initialized(MlpSpec::uniform(2, 2, 8, Activation::Tanh, 1), rng);
  MlpTape tape;
  net.forward(3.0 * random_matrix(rng, 2, 50), tape);
  for (const auto& h : tape.post) CHECK(h.cwiseAbs().maxCoeff() < 1.0);
}

TEST_CASE("backward matches central finite differences on random nets") {
  for (auto act : {Activation::Tanh, Activation::SiLU, Activation::ReLU}) {
    CAPTURE(to_string(act));
    for (int trial = 0; trial < 20; ++trial) {
      Rng rng = make_stream(4, {static_cast<std::uint64_t>(act), static_cast<std::uint64_t>(trial)});
      const int in = 1 + trial % 4, out = 1 + trial % 3, depth = 1 + trial % 3;
      Mlp net = Mlp::initialized(MlpSpec::uniform(in, depth, 3 + trial % 5, act, out), rng);
      const Eigen::MatrixXd x = random_matrix(rng, in, 3);
      const Eigen::MatrixXd c = random_matrix(rng, out, 3);
      MlpTape tape;
      net.forward(x, tape);
      Tensors grads;
      const Eigen::MatrixXd dx = net.backward(tape, c, grads);

      const double h = 1e-6;
      for (std::size_t b = 0; b < net.params().size(); ++b) {
        Eigen::MatrixXd fd(grads[b].rows(), grads[b].cols());
        for (Eigen::Index i = 0; i < fd.size(); ++i) {
          double& w = net.params()[b].data()[i];
          const double w0 = w;
          w = w0 + h;
          const double up = probe(net, x, c);
          w = w0 - h;
          const double dn = probe(net, x, c);
          w = w0;
          fd.data()[i] = (up - dn) / (2 * h);
        }
        CHECK(relative_error(grads[b], fd) < 1e-6);
      }
      Eigen::MatrixXd fdx(in, 3);
      for (Eigen::Index i = 0; i < fdx.size(); ++i) {
        Eigen::MatrixXd xp = x, xm = x;
        xp.data()[i] += h;
        xm.data()[i] -= h;
        fdx.data()[i] = (probe(net, xp, c) - probe(net, xm, c)) / (2 * h);
      }
      CHECK(relative_error(dx, fdx) < 1e-6);
    }
  }
}

TEST_CASE("backward linearity and zero output gradient") {
  Rng rng = make_stream(5, {});
  const Mlp net = Mlp::initialized(MlpSpec::uniform(3, 2, 6, Activation::SiLU, 2), rng);
  const Eigen::MatrixXd x = random_matrix(rng, 3, 4);
  MlpTape tape;
  net.forward(x, tape);
  Tensors g;
  const Eigen::MatrixXd dx0 = net.backward(tape, Eigen::MatrixXd::Zero(2, 4), g);
  CHECK(dx0.isZero(0.0));
  for (const auto& m : g) CHECK(m.isZero(0.0));

  const Eigen::MatrixXd c = random_matrix(rng, 2, 4);
  Tensors batch;
  net.backward(tape, c, batch);
  Tensors sum = zeros_like(batch);
  for (int s = 0; s < 4; ++s) {
    MlpTape t1;
    net.forward(x.col(s), t1);
    Tensors gs;
    net.backward(t1, c.col(s), gs);
    for (std::size_t b = 0; b < sum.size(); ++b) sum[b] += gs[b];
  }
  for (std::size_t b = 0; b < sum.size(); ++b) CHECK((sum[b] - batch[b]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("squared error loss") {
  Eigen::MatrixXd p(2, 2), t(2, 2), d;
  p << 1, 2, 3, 4;
  t << 0, 2, 3, 2;
  CHECK(squared_error_loss(p, t, &d) == doctest::Approx((1.0 + 4.0) / 2.0));
  CHECK(d(0, 0) == 1.0);
  CHECK(d(1, 1) == 2.0);
}

TEST_CASE("Adam matches a hand-computed trace") {
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Tensors p{Eigen::MatrixXd::Constant(1, 2, 1.0)};
  Adam adam(cfg, p);

  Tensors zero{Eigen::MatrixXd::Zero(1, 2)};
  adam.step(p, zero);
  CHECK(adam.steps() == 1);
  CHECK(p[0] == Eigen::MatrixXd::Constant(1, 2, 1.0));

  Adam fresh(cfg, p);
  Tensors g{Eigen::MatrixXd(1, 2)};
  g[0] << 0.5, -2.0;
  Tensors q = p;
  fresh.step(q, g);
  // Step 1: m_hat = g and v_hat = g^2, so the update is -lr * g / (|g| + eps).
  for (int i = 0; i < 2; ++i) {
    const double gi = g[0](0, i);
    CHECK(std::abs(q[0](0, i) - (1.0 - 0.1 * gi / (std::abs(gi) + 1e-8))) < 1e-12);
  }
  // Step 2 with the same gradient, written out by hand.
  const Tensors q1 = q;
  fresh.step(q, g);
  for (int i = 0; i < 2; ++i) {
    const double gi = g[0](0, i);
    const double m = 0.9 * (0.1 * gi) + 0.1 * gi;
    const double v = 0.999 * (0.001 * gi * gi) + 0.001 * gi * gi;
    const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
    CHECK(std::abs(q[0](0, i) - (q1[0](0, i) - 0.1 * mh / (std::sqrt(vh) + 1e-8))) < 1e-12);
  }

  Tensors bad{Eigen::MatrixXd::Constant(1, 2, NAN)};
  CHECK_THROWS_AS(fresh.step(q, bad), NonFiniteError);
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(Adam(cfg, p), ConfigError);
}

TEST_CASE("one hidden layer learns y = 2x + 1") {
  Rng rng = make_stream(6, {});
  Mlp net = Mlp::initialized(MlpSpec::uniform(1, 1, 16, Activation::Tanh, 1), rng);
  Eigen::MatrixXd x(1, 64), y(1, 64);
  for (int i = 0; i < 64; ++i) x(0, i) = -1.0 + 2.0 * i / 63.0;
  y = (2.0 * x.array() + 1.0).matrix();
  AdamConfig cfg;
  cfg.learning_rate = 1e-2;
  Adam adam(cfg, net.params());
  double loss = 0.0;
  MlpTape tape;
  Tensors grads;
  Eigen::MatrixXd d;
  for (int step = 0; step < 2000; ++step) {
    loss = squared_error_loss(net.forward(x, tape), y, &d);
    net.backward(tape, d, grads);
    adam.step(net.params(), grads);
  }
  loss = squared_error_loss(net.forward(x), y, nullptr);
  MESSAGE("final MSE " << loss);
  CHECK(loss < 1e-4);
}

TEST_CASE("checkpoint round trip and integrity") {
  Rng rng = make_stream(7, {});
  const MlpSpec spec = MlpSpec::uniform(4, 3, 50, Activation::Tanh, 6);
  const Mlp net = Mlp::initialized(spec, rng);
  Checkpoint c{"behavior_clone", spec.digest(), R"({"note":1})", net.params()};
  const auto path = temp_path("ckpt.bin");
  save_checkpoint(c, path);
  const Checkpoint back = load_checkpoint(path, "behavior_clone", spec.digest());
  CHECK(back == c);
  Mlp restored(spec);
  restored.set_params(back.tensors);
  const Eigen::MatrixXd x = random_matrix(rng, 4, 9);
  CHECK(restored.forward(x) == net.forward(x));

  const MlpSpec other = MlpSpec::uniform(4, 3, 40, Activation::Tanh, 6);
  CHECK(other.digest() != spec.digest());
  CHECK_THROWS_WITH_AS(load_checkpoint(path, "behavior_clone", other.digest()), doctest::Contains("digest"),
                       FormatError);
  CHECK_THROWS_AS(load_checkpoint(path, "denoiser"), FormatError);

  const std::string bytes = read_file(path);
  const auto partial = temp_path("partial.bin");
  write_file(partial, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(partial, "behavior_clone"), FormatError);
  CHECK_THROWS_AS(restored.set_params(Tensors{}), DimensionError);

  c.tensors[0](0, 0) = NAN;
  CHECK_THROWS_AS(save_checkpoint(c, temp_path("nan.bin")), NonFiniteError);
}
