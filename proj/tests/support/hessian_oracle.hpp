#pragma once

// Small losses with an independently known Hessian trace.

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "mpq/autodiff.hpp"
#include "mpq/sensitivity.hpp"
#include "oracles.hpp"

namespace mpq::testing {

// 0.5 * w^T A w for symmetric A; the trace of its Hessian is Tr(A).
struct QuadraticOracle {
  Tensor a;   // [n, n]
  Tensor w0;  // [n, 1]

  static QuadraticOracle make(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> diag(1.0, 3.0), off(-0.5, 0.5);
    QuadraticOracle q{Tensor(Shape{n, n}), random_tensor({n, 1}, rng)};
    for (std::size_t i = 0; i < n; ++i) {
      q.a.at(i, i) = diag(rng);
      for (std::size_t j = 0; j < i; ++j) q.a.at(i, j) = q.a.at(j, i) = off(rng);
    }
    return q;
  }

  double trace() const {
    double t = 0;
    for (std::size_t i = 0; i < a.dim(0); ++i) t += a.at(i, i);
    return t;
  }

  GraphBuilder builder() const {
    return [this](ad::Tape& tape) {
      const ad::Var w = tape.variable(w0);
      const ad::Var aw = ad::matmul(tape.constant(a), w);
      return std::pair{ad::scale(ad::sum(ad::mul(w, aw)), 0.5), w};
    };
  }
};

// in -> hidden (relu) -> out MLP with cross-entropy, over one flat parameter
// vector sliced with gather.
struct FlatMlp {
  std::size_t in = 2, hidden = 3, out = 5;
  Tensor x;        // [n, in]
  Tensor targets;  // [n, out] one-hot
  Tensor theta0;   // [size()]

  std::size_t size() const { return hidden * in + hidden + out * hidden + out; }

  static FlatMlp make(std::size_t n, std::uint64_t seed) {
    FlatMlp m;
    std::mt19937_64 rng(seed);
    m.x = random_tensor({n, m.in}, rng);
    m.targets = Tensor(Shape{n, m.out});
    for (std::size_t i = 0; i < n; ++i) m.targets.at(i, i % m.out) = 1.0;
    m.theta0 = random_tensor({m.size()}, rng, -1.0, 1.0);
    return m;
  }

  ad::Var loss(ad::Tape& tape, const ad::Var& theta) const {
    std::size_t offset = 0;
    auto slice = [&](Shape shape) {
      std::size_t count = 1;
      for (std::size_t d : shape) count *= d;
      auto idx = std::make_shared<std::vector<std::size_t>>(count);
      std::iota(idx->begin(), idx->end(), offset);
      offset += count;
      return ad::gather(theta, idx, std::move(shape));
    };
    const ad::Var w1 = slice({hidden, in}), b1 = slice({hidden});
    const ad::Var w2 = slice({out, hidden}), b2 = slice({out});
    const ad::Var h = ad::relu(ad::add_bias(ad::matmul(tape.constant(x), w1, false, true), b1));
    return ad::softmax_crossentropy(ad::add_bias(ad::matmul(h, w2, false, true), b2), targets);
  }

  Tensor gradient(const Tensor& theta) const {
    ad::Tape tape;
    const ad::Var t = tape.variable(theta);
    return ad::backward(loss(tape, t))[t];
  }

  // Full Hessian by central differences of the analytic gradient, row-major.
  std::vector<double> hessian(double step = 1e-5) const {
    const std::size_t n = size();
    std::vector<double> h(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor plus = theta0, minus = theta0;
      plus[i] += step;
      minus[i] -= step;
      const Tensor gp = gradient(plus), gm = gradient(minus);
      for (std::size_t j = 0; j < n; ++j) h[j * n + i] = (gp[j] - gm[j]) / (2 * step);
    }
    return h;
  }

  double exact_trace() const {
    const std::vector<double> h = hessian();
    double tr = 0;
    for (std::size_t i = 0; i < size(); ++i) tr += h[i * size() + i];
    return tr;
  }

  // Standard deviation of a Rademacher estimate: sqrt(2 sum_{i!=j} H_ij^2 / probes).
  double estimator_sd(std::size_t probes) const {
    const std::vector<double> h = hessian();
    double off = 0;
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = 0; j < size(); ++j)
        if (i != j) off += h[i * size() + j] * h[i * size() + j];
    return std::sqrt(2 * off / double(probes));
  }

  GraphBuilder builder() const {
    return [this](ad::Tape& tape) {
      const ad::Var t = tape.variable(theta0);
      return std::pair{loss(tape, t), t};
    };
  }
};

}  // namespace mpq::testing
