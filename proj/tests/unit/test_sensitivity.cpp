#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "../support/hessian_oracle.hpp"
#include "../support/oracles.hpp"
#include "../support/sensitivity_oracle.hpp"
#include "mpq/calibration.hpp"
#include "mpq/errors.hpp"
#include "mpq/sensitivity.hpp"

namespace {

using namespace mpq;

const Shape kShape = {1, 6, 6};

NetworkDef toy_mlp(std::uint64_t seed) { return make_mlp(kShape, 3, seed, {8, 6}); }
LabeledDataset toy_data(std::uint64_t seed) { return make_blobs(seed, 5, 3, kShape); }

// flatten-dense(1 unit, 2 inputs)-head, W = [0.3, 1.0], no bias.
NetworkDef one_layer() {
  NetworkDef net;
  net.name = "one_layer";
  net.input_shape = {1, 1, 2};
  net.num_classes = 1;
  net.layers = {{LayerKind::flatten}, {LayerKind::dense, 1}, {LayerKind::softmax_head}};
  net.params[1] = {Tensor::from({1, 2}, {0.3, 1.0}), Tensor::from({1}, {0.0}), {}, {}};
  return net;
}

LabeledDataset single_sample(double x0, double x1) {
  LabeledDataset d;
  d.images = Tensor::from({1, 1, 1, 2}, {x0, x1});
  d.labels = {0};
  d.num_classes = 1;
  return d;
}

OmegaVector make_omega(std::vector<std::pair<double, double>> aw) {
  OmegaVector o;
  for (std::size_t i = 0; i < aw.size(); ++i) {
    o.activation[i] = aw[i].first;
    o.weight[i] = aw[i].second;
  }
  return o;
}

// --- Omega and expectation -----------------------------------------------

TEST(Omega, Fp32ConfigGivesZerosAndTheFloor) {
  const NetworkDef net = toy_mlp(1);
  const OmegaVector o = omega(net, toy_data(1), fp32_config(net));
  for (const auto& [l, v] : o.weight) EXPECT_EQ(v, 0.0) << l;
  for (const auto& [l, v] : o.activation) EXPECT_EQ(v, 0.0) << l;
  EXPECT_NEAR(expectation(o), kOmegaFloor * kOmegaFloor, 1e-72);
  for (std::size_t l : net.quantizable_layers()) {
    EXPECT_NEAR(sensitivity_proposed(net, toy_data(1), l, Target::weight, 32).value, 1e-60, 1e-72);
    EXPECT_EQ(sensitivity_l2(net, toy_data(1), l, Target::weight, 32).value, 0.0);
    EXPECT_EQ(sensitivity_kld(net, toy_data(1), l, Target::weight, 32).value, 0.0);
    EXPECT_EQ(sensitivity_hessian(net, toy_data(1), l, Target::weight, 32).value, 0.0);
  }
}

TEST(Omega, OneLayerClosedForm) {
  // 4-bit, clip 1: Q(0.3) = 2/7, Q(1) = 1, so yhat - y = (2/7 - 0.3) * x0.
  const NetworkDef net = one_layer();
  const double e = 2.0 / 7.0 - 0.3;
  for (const auto& [x0, x1] : {std::pair{2.0, 0.0}, std::pair{-1.5, 0.5}, std::pair{3.0, -4.0}}) {
    const LabeledDataset d = single_sample(x0, x1);
    const QuantConfig c = single_layer_config(net, 1, Target::weight, 4, nullptr);
    const OmegaVector o = omega(net, d, c);
    EXPECT_NEAR(o.weight.at(1), std::hypot(x0, x1), 1e-12);
    EXPECT_NEAR(o.activation.at(1), 1.0, 1e-12);
    EXPECT_NEAR(sensitivity_l2(net, d, 1, Target::weight, 4).value, std::fabs(e * x0), 1e-12);
    EXPECT_NEAR(sensitivity_proposed(net, d, 1, Target::weight, 4).value, std::hypot(x0, x1), 1e-12);
  }
}

TEST(Omega, WeightErrorGradientMatchesFiniteDifferences) {
  const NetworkDef net = make_mlp({1, 3, 3}, 3, 4, {5});
  std::mt19937_64 rng(11);
  QuantConfig c = fp32_config(net);
  for (std::size_t l : net.quantizable_layers()) {
    double clip = 0;
    for (double v : net.params.at(l).weight.data()) clip = std::max(clip, std::fabs(v));
    c.layers[l].weight = QuantSpec::uniform(4, clip);
  }
  for (int trial = 0; trial < 4; ++trial) {
    const Tensor x = mpq::testing::random_tensor({1, 1, 3, 3}, rng, 0, 1);
    for (std::size_t l : net.quantizable_layers()) {
      const auto r = mpq::testing::check_weight_error_gradient(net, x, c, l);
      EXPECT_EQ(r.failed, 0u) << "layer " << l << " trial " << trial << " excess " << r.worst_excess;
      EXPECT_GT(r.checked, 0u);
    }
  }
}

TEST(Omega, DeterministicAcrossRuns) {
  const NetworkDef net = toy_mlp(2);
  const QuantConfig c = single_layer_config(net, 3, Target::weight, 4, nullptr);
  const OmegaVector a = omega(net, toy_data(2), c), b = omega(net, toy_data(2), c);
  EXPECT_EQ(a.weight, b.weight);
  EXPECT_EQ(a.activation, b.activation);
}

TEST(Omega, NonFiniteGradientRaisesMetricError) {
  NetworkDef net = toy_mlp(3);
  net.params.at(3).weight[0] = std::numeric_limits<double>::quiet_NaN();
  const QuantConfig c = single_layer_config(net, 1, Target::weight, 4, nullptr);
  EXPECT_THROW(omega(net, toy_data(3), c), MetricError);
}

TEST(Expectation, HandComputedGeometricMeans) {
  EXPECT_NEAR(expectation(make_omega({{2, 8}})), 16.0, 1e-12);
  EXPECT_NEAR(expectation(make_omega({{1, 1}, {1, 1}, {1, 1}})), 1.0, 1e-12);
  EXPECT_NEAR(expectation(make_omega({{1, 4}, {2, 8}})), 8.0, 1e-12);
}

TEST(Expectation, ZeroFactorIsFloored) {
  EXPECT_NEAR(expectation(make_omega({{0, 5}})), 5e-30, 1e-42);
  EXPECT_GT(expectation(make_omega({{0, 5}, {1, 1}})), 0.0);
}

TEST(Expectation, InvariantToLayerOrder) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  std::vector<std::pair<double, double>> aw(5);
  for (auto& p : aw) p = {u(rng), u(rng)};
  const double base = expectation(make_omega(aw));
  std::shuffle(aw.begin(), aw.end(), rng);
  EXPECT_NEAR(expectation(make_omega(aw)), base, 1e-12 * base);
}

// --- Layer-level behavior --------------------------------------------------

TEST(Proposed, DeadPathScoresAtTheFloor) {
  NetworkDef net = toy_mlp(4);
  for (auto& v : net.params.at(5).weight.data()) v = 0.0;  // nothing reaches the logits
  for (auto& v : net.params.at(5).bias.data()) v = 0.0;
  const double s = sensitivity_proposed(net, toy_data(4), 1, Target::weight, 4).value;
  EXPECT_LE(s, 1e-59);
}

TEST(Proposed, ScalingOneLayerOfAHomogeneousNetScalesEveryScoreAlike) {
  // Bias-free relu nets are positively homogeneous in each layer's weights:
  // scaling layer s by c scales y and every yhat_j by c, so rankings cannot
  // change with s.
  for (std::uint64_t seed : {0, 1, 2}) {
    const NetworkDef base = toy_mlp(seed);
    const auto ref = rank_layers(base, toy_data(seed), MetricKind::proposed, Target::weight, 4);
    const auto ref_l2 = rank_layers(base, toy_data(seed), MetricKind::l2, Target::weight, 4);
    for (std::size_t s : base.quantizable_layers()) {
      NetworkDef net = base;
      for (auto& v : net.params.at(s).weight.data()) v *= 100.0;
      const auto r = rank_layers(net, toy_data(seed), MetricKind::proposed, Target::weight, 4);
      const auto r2 = rank_layers(net, toy_data(seed), MetricKind::l2, Target::weight, 4);
      for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_EQ(r[i].layer, ref[i].layer) << "seed " << seed << " scaled " << s;
        EXPECT_NEAR(r2[i].score, 100.0 * ref_l2[i].score, 1e-8 * r2[i].score);
        EXPECT_NEAR(r[i].score / ref[i].score, r[0].score / ref[0].score, 1e-8 * r[i].score / ref[i].score);
      }
    }
  }
}

TEST(Proposed, RejectsUnknownLayerAndMissingClips) {
  const NetworkDef net = toy_mlp(1);
  EXPECT_THROW(sensitivity_proposed(net, toy_data(1), 2, Target::weight, 4), ValidationError);
  EXPECT_THROW(sensitivity_proposed(net, toy_data(1), 1, Target::activation, 4), ValidationError);
  const CalibrationProfile clips = calibrate(net, toy_data(1));
  SensitivityOptions opt;
  opt.clips = &clips;
  EXPECT_GT(sensitivity_proposed(net, toy_data(1), 1, Target::activation, 4, opt).value, 0.0);
}

TEST(L2, MatchesDirectOutputDistance) {
  const NetworkDef net = toy_mlp(5);
  const LabeledDataset d = toy_data(5);
  for (std::size_t l : net.quantizable_layers()) {
    const QuantConfig c = single_layer_config(net, l, Target::weight, 3, nullptr);
    double mean = 0;
    for (std::size_t i = 0; i < d.size(); ++i) mean += mpq::testing::output_distance(net, d.batch(i, i + 1), c);
    mean /= double(d.size());
    EXPECT_NEAR(sensitivity_l2(net, d, l, Target::weight, 3).value, mean, 1e-12) << l;
  }
}

// --- KL ---------------------------------------------------------------------

TEST(Kl, KnownValue) {
  const std::vector<double> p = {0.9, 0.1}, q = {0.5, 0.5};
  EXPECT_NEAR(kl_divergence(p, q), 0.9 * std::log(1.8) + 0.1 * std::log(0.2), 1e-9);
  EXPECT_NEAR(kl_divergence(p, q), 0.368, 5e-4);
  EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-12);
}

TEST(Kl, NonNegativeOnRandomDistributions) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(5), q(5);
    for (auto& v : p) v = u(rng);
    for (auto& v : q) v = u(rng);
    const double sp = std::accumulate(p.begin(), p.end(), 0.0), sq = std::accumulate(q.begin(), q.end(), 0.0);
    for (auto& v : p) v /= sp;
    for (auto& v : q) v /= sq;
    EXPECT_GE(kl_divergence(p, q), -1e-12);
  }
}

TEST(Kl, IdenticalOutputsScoreZero) {
  const NetworkDef net = toy_mlp(6);
  EXPECT_EQ(sensitivity_kld(net, toy_data(6), 3, Target::weight, 32).value, 0.0);
  EXPECT_GT(sensitivity_kld(net, toy_data(6), 3, Target::weight, 2).value, 0.0);
}

// --- Hutchinson --------------------------------------------------------------

TEST(Hutchinson, DiagonalQuadraticIsExactPerProbe) {
  // L = sum a_i w_i^2: every Rademacher probe gives 2 sum a_i.
  const Tensor a = Tensor::from({4}, {0.5, 1.5, 2.0, 3.0});
  const GraphBuilder f = [&](ad::Tape& tape) {
    const ad::Var w = tape.variable(Tensor::from({4}, {1.0, -2.0, 0.5, 3.0}));
    const ad::Var aw = ad::mul(tape.constant(a), ad::mul(w, w));
    return std::pair{ad::sum(aw), w};
  };
  const TraceEstimate t = hutchinson_trace(f, 16, 4);
  ASSERT_EQ(t.samples.size(), 16u);
  EXPECT_EQ(t.dimension, 4u);
  for (double s : t.samples) EXPECT_NEAR(s, 14.0, 1e-12);
}

TEST(Hutchinson, DenseQuadraticWithinFivePercentAt1000Probes) {
  const auto q = mpq::testing::QuadraticOracle::make(10, 2);
  const TraceEstimate t = hutchinson_trace(q.builder(), 1000, 7);
  EXPECT_NEAR(t.trace, q.trace(), 0.05 * q.trace());
}

TEST(Hutchinson, UnbiasedOverIndependentRuns) {
  const auto q = mpq::testing::QuadraticOracle::make(10, 2);
  double mean = 0;
  for (std::uint64_t run = 0; run < 200; ++run) mean += hutchinson_trace(q.builder(), 20, run).trace;
  mean /= 200;
  EXPECT_NEAR(mean, q.trace(), 0.01 * q.trace());
}

TEST(Hutchinson, BruteForceMlpTrace) {
  const auto m = mpq::testing::FlatMlp::make(64, 1);
  ASSERT_LE(m.size(), 50u);
  const double exact = m.exact_trace();
  // The 5% band is at least three standard deviations of the estimator.
  ASSERT_LE(m.estimator_sd(1000), 0.05 * std::fabs(exact) / 3);
  const TraceEstimate t = hutchinson_trace(m.builder(), 1000, 1);
  EXPECT_EQ(t.dimension, m.size());
  EXPECT_NEAR(t.trace, exact, 0.05 * std::fabs(exact)) << "exact " << exact;
}

TEST(Hutchinson, DeterministicAndRejectsZeroProbes) {
  const auto q = mpq::testing::QuadraticOracle::make(6, 1);
  EXPECT_EQ(hutchinson_trace(q.builder(), 10, 3).samples, hutchinson_trace(q.builder(), 10, 3).samples);
  EXPECT_NE(hutchinson_trace(q.builder(), 10, 3).samples, hutchinson_trace(q.builder(), 10, 4).samples);
  EXPECT_THROW(hutchinson_trace(q.builder(), 0, 3), ValidationError);
}

TEST(HessianMetric, FiniteAndSeedDeterministic) {
  const NetworkDef net = toy_mlp(7);
  SensitivityOptions opt;
  opt.probes = 20;
  opt.seed = 5;
  for (std::size_t l : net.quantizable_layers()) {
    const double a = sensitivity_hessian(net, toy_data(7), l, Target::weight, 4, opt).value;
    const double b = sensitivity_hessian(net, toy_data(7), l, Target::weight, 4, opt).value;
    EXPECT_TRUE(std::isfinite(a)) << l;
    EXPECT_EQ(a, b) << l;
  }
  const CalibrationProfile clips = calibrate(net, toy_data(7));
  opt.clips = &clips;
  EXPECT_TRUE(std::isfinite(sensitivity_hessian(net, toy_data(7), 3, Target::activation, 4, opt).value));
}

// --- Ranking -----------------------------------------------------------------

TEST(Ranking, DescendingWithTiesByLayerIndex) {
  const auto r = rank_scores({{5, 1.0}, {1, 2.0}, {3, 1.0}, {7, 3.0}});
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0].layer, 7u);
  EXPECT_EQ(r[1].layer, 1u);
  EXPECT_EQ(r[2].layer, 3u);
  EXPECT_EQ(r[3].layer, 5u);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i].rank, i + 1);
  const auto same = rank_scores({{3, 0.5}, {1, 0.5}, {0, 0.5}});
  EXPECT_EQ(same[0].layer, 0u);
  EXPECT_EQ(same[2].layer, 3u);
}

TEST(Ranking, InvariantToSampleOrder) {
  const NetworkDef net = toy_mlp(8);
  const LabeledDataset d = toy_data(8);
  std::vector<std::size_t> perm(d.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(2);
  std::shuffle(perm.begin(), perm.end(), rng);
  const LabeledDataset shuffled = d.subset(perm);
  for (MetricKind m : {MetricKind::proposed, MetricKind::l2, MetricKind::kld}) {
    const auto a = rank_layers(net, d, m, Target::weight, 4), b = rank_layers(net, shuffled, m, Target::weight, 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].layer, b[i].layer) << to_string(m);
      EXPECT_NEAR(a[i].score, b[i].score, 1e-10 * a[i].score) << to_string(m);
    }
  }
}

TEST(Ranking, CsvHeaderAndRows) {
  const std::string csv = sensitivity_csv({{MetricKind::l2, Target::weight, 3, 4, 0.25, 1}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "metric,target,layer,bits,score,rank");
  EXPECT_NE(csv.find("l2,weight,3,4,"), std::string::npos);
}

TEST(Parsing, NamesRoundTripAndUnknownsThrow) {
  for (MetricKind m : {MetricKind::proposed, MetricKind::l2, MetricKind::kld, MetricKind::hessian})
    EXPECT_EQ(parse_metric(to_string(m)), m);
  for (Target t : {Target::weight, Target::activation}) EXPECT_EQ(parse_target(to_string(t)), t);
  EXPECT_THROW(parse_metric("fisher"), ValidationError);
  EXPECT_THROW(parse_target("bias"), ValidationError);
  EXPECT_THROW(parse_norm("linf"), ValidationError);
}

}  // namespace
