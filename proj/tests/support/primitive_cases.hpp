#pragma once

// Catalogue of differentiable primitives wrapped as scalar losses, shared by
// the autodiff unit tests and the acceptance gradient criterion.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace mpq::testing {

struct PrimitiveCase {
  std::string name;
  std::vector<Shape> input_shapes;
  LossBuilder loss;
  double lo = -2.0;
  double hi = 2.0;
};

// loss = sum(y * w) with fixed pseudo-random weights w, so every output
// element contributes with a distinct coefficient.
inline ad::Var weighted_sum(ad::Tape& tape, const ad::Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(y.shape(), rng, -1.0, 1.0))));
}

inline Tensor one_hot_rows(std::size_t n, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor t(Shape{n, c});
  for (std::size_t i = 0; i < n; ++i) t.at(i, rng() % c) = 1.0;
  return t;
}

inline Tensor soft_rows(std::size_t n, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor t = random_tensor(Shape{n, c}, rng, 0.1, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += t.at(i, j);
    for (std::size_t j = 0; j < c; ++j) t.at(i, j) /= s;
  }
  return t;
}

inline std::vector<PrimitiveCase> primitive_cases() {
  using namespace ad;
  using V = const std::vector<Var>&;
  std::vector<PrimitiveCase> cases;
  cases.push_back({"add", {{3, 4}, {3, 4}},
                   [](Tape& t, V v) { return weighted_sum(t, add(v[0], v[1]), 1); }});
  cases.push_back({"sub", {{3, 4}, {3, 4}},
                   [](Tape& t, V v) { return weighted_sum(t, sub(v[0], v[1]), 2); }});
  cases.push_back({"mul", {{3, 4}, {3, 4}},
                   [](Tape& t, V v) { return weighted_sum(t, mul(v[0], v[1]), 3); }});
  cases.push_back({"scale", {{5}}, [](Tape& t, V v) { return weighted_sum(t, scale(v[0], -1.7), 4); }});
  cases.push_back({"matmul", {{3, 4}, {4, 2}},
                   [](Tape& t, V v) { return weighted_sum(t, matmul(v[0], v[1]), 5); }});
  cases.push_back({"matmul_nt", {{3, 4}, {2, 4}},
                   [](Tape& t, V v) { return weighted_sum(t, matmul(v[0], v[1], false, true), 6); }});
  cases.push_back({"matmul_tn", {{4, 3}, {4, 2}},
                   [](Tape& t, V v) { return weighted_sum(t, matmul(v[0], v[1], true, false), 7); }});
  cases.push_back({"matmul_tt", {{4, 3}, {2, 4}},
                   [](Tape& t, V v) { return weighted_sum(t, matmul(v[0], v[1], true, true), 8); }});
  cases.push_back({"relu", {{4, 5}}, [](Tape& t, V v) { return weighted_sum(t, relu(v[0]), 9); }});
  cases.push_back({"clamp", {{4, 5}},
                   [](Tape& t, V v) { return weighted_sum(t, clamp(v[0], -0.7, 1.1), 10); }});
  cases.push_back({"exp", {{6}}, [](Tape& t, V v) { return weighted_sum(t, exp(v[0]), 11); }});
  cases.push_back({"sqrt", {{6}}, [](Tape& t, V v) { return weighted_sum(t, sqrt(v[0]), 12); },
                   0.5, 2.0});
  cases.push_back({"reciprocal", {{6}},
                   [](Tape& t, V v) { return weighted_sum(t, reciprocal(v[0]), 13); }, 0.5, 2.0});
  cases.push_back({"reshape", {{2, 3, 2}},
                   [](Tape& t, V v) { return weighted_sum(t, reshape(v[0], {3, 4}), 14); }});
  cases.push_back({"row_sum", {{3, 5}}, [](Tape& t, V v) { return weighted_sum(t, row_sum(v[0]), 15); }});
  cases.push_back({"row_broadcast", {{3, 1}},
                   [](Tape& t, V v) { return weighted_sum(t, row_broadcast(v[0], 4), 16); }});
  cases.push_back({"channel_broadcast", {{3}},
                   [](Tape& t, V v) { return weighted_sum(t, channel_broadcast(v[0], {2, 3, 2, 2}), 17); }});
  cases.push_back({"channel_sum", {{2, 3, 2, 2}},
                   [](Tape& t, V v) { return weighted_sum(t, channel_sum(v[0]), 18); }});
  cases.push_back({"add_bias", {{4, 3}, {3}},
                   [](Tape& t, V v) { return weighted_sum(t, add_bias(v[0], v[1]), 19); }});
  cases.push_back({"log_softmax", {{3, 5}},
                   [](Tape& t, V v) { return weighted_sum(t, log_softmax(v[0]), 20); }});
  cases.push_back({"softmax", {{3, 5}}, [](Tape& t, V v) { return weighted_sum(t, softmax(v[0]), 21); }});
  cases.push_back({"conv2d", {{2, 3, 6, 6}, {4, 3, 3, 3}},
                   [](Tape& t, V v) { return weighted_sum(t, conv2d(v[0], v[1], {2, 1}), 22); }});
  cases.push_back({"conv2d_nopad", {{1, 2, 5, 5}, {3, 2, 2, 2}},
                   [](Tape& t, V v) { return weighted_sum(t, conv2d(v[0], v[1], {1, 0}), 23); }});
  cases.push_back({"conv2d_input_grad", {{2, 4, 3, 3}, {4, 3, 3, 3}},
                   [](Tape& t, V v) {
                     return weighted_sum(t, conv2d_input_grad(v[0], v[1], {2, 3, 6, 6}, {2, 1}), 24);
                   }});
  cases.push_back({"conv2d_kernel_grad", {{2, 3, 6, 6}, {2, 4, 3, 3}},
                   [](Tape& t, V v) {
                     return weighted_sum(t, conv2d_kernel_grad(v[0], v[1], {4, 3, 3, 3}, {2, 1}), 25);
                   }});
  cases.push_back({"max_pool2d", {{1, 2, 6, 6}},
                   [](Tape& t, V v) { return weighted_sum(t, max_pool2d(v[0], 2, 2), 26); }});
  cases.push_back({"avg_pool2d", {{1, 2, 6, 6}},
                   [](Tape& t, V v) { return weighted_sum(t, avg_pool2d(v[0], 3, 1), 27); }});
  cases.push_back({"avg_pool2d_adjoint", {{1, 2, 3, 3}},
                   [](Tape& t, V v) { return weighted_sum(t, avg_pool2d_adjoint(v[0], {1, 2, 6, 6}, 2, 2), 28); }});
  cases.push_back({"straight_through", {{4}, {4}}, [](Tape& t, V v) {
                     Tensor q = v[0].value();
                     for (std::size_t i = 0; i < q.numel(); ++i) q[i] += v[1].value()[i];
                     return weighted_sum(t, straight_through(v[0], v[1], q), 29);
                   }});
  cases.push_back({"softmax_crossentropy", {{4, 5}},
                   [](Tape&, V v) { return softmax_crossentropy(v[0], soft_rows(4, 5, 30)); }});
  cases.push_back({"euclidean_loss", {{3, 4}, {3, 4}},
                   [](Tape&, V v) { return euclidean_loss(v[0], v[1]); }});
  cases.push_back({"batchnorm_inference", {{2, 3, 2, 2}}, [](Tape& t, V v) {
                     const Tensor g = Tensor::from({3}, {1.5, -0.5, 2.0});
                     const Tensor b = Tensor::from({3}, {0.1, 0.2, -0.3});
                     const Tensor m = Tensor::from({3}, {0.3, -0.1, 0.0});
                     const Tensor s = Tensor::from({3}, {0.5, 2.0, 1.0});
                     return weighted_sum(t, batchnorm_inference(v[0], g, b, m, s), 31);
                   }});
  return cases;
}

}  // namespace mpq::testing
