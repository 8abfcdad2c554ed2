#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mpq/autodiff.hpp"
#include "mpq/dataset.hpp"
#include "mpq/network.hpp"
#include "mpq/quantizer.hpp"

namespace mpq {

enum class Target { weight, activation };
enum class MetricKind { proposed, l2, kld, hessian };
enum class NormKind { l2, l2_mean, l1 };

const char* to_string(Target t);
const char* to_string(MetricKind m);
const char* to_string(NormKind n);
Target parse_target(const std::string& s);
MetricKind parse_metric(const std::string& s);
NormKind parse_norm(const std::string& s);

// Per quantizable layer: mean gradient norm w.r.t. its quantized activation
// and weight.
struct OmegaVector {
  std::map<std::size_t, double> activation;
  std::map<std::size_t, double> weight;
  QuantConfig config;
};

// Per sample: L = ||y(x) - yhat(x)||_2 with yhat under `config`, gradients
// taken w.r.t. every traced Q(W_i) and Q(A_i). Throws MetricError on a
// non-finite gradient.
OmegaVector omega(const NetworkDef& net, const LabeledDataset& data, const QuantConfig& config,
                  NormKind norm = NormKind::l2);

inline constexpr double kOmegaFloor = 1e-30;

// (prod_i Omega_A_i * Omega_W_i)^(1/L) in log space, factors floored.
double expectation(const OmegaVector& omega, double floor = kOmegaFloor);

// KL(p || q) of two probability vectors with 1e-12 inside the log.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct SensitivityOptions {
  // Activation clips; required for activation targets.
  const CalibrationProfile* clips = nullptr;
  std::size_t probes = 100;  // hessian
  std::uint64_t seed = 0;    // hessian probes
  NormKind norm = NormKind::l2;
};

// Only layer j's target at k bits, everything else FP32.
QuantConfig single_layer_config(const NetworkDef& net, std::size_t layer, Target target, int bits,
                                const CalibrationProfile* clips);

struct SensitivityScore {
  MetricKind metric = MetricKind::proposed;
  std::size_t layer = 0;
  Target target = Target::weight;
  int bits = 0;
  double value = 0.0;
};

SensitivityScore sensitivity_proposed(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                      Target target, int bits, const SensitivityOptions& opt = {});
SensitivityScore sensitivity_l2(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                Target target, int bits, const SensitivityOptions& opt = {});
SensitivityScore sensitivity_kld(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                 Target target, int bits, const SensitivityOptions& opt = {});
// Mean Hessian trace of the task loss (CE vs labels) w.r.t. the target,
// by Hutchinson with Rademacher probes, times ||Q_k(.) - .||^2.
SensitivityScore sensitivity_hessian(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                     Target target, int bits, const SensitivityOptions& opt = {});
SensitivityScore sensitivity(MetricKind metric, const NetworkDef& net, const LabeledDataset& data,
                             std::size_t layer, Target target, int bits, const SensitivityOptions& opt = {});

// Builds a graph on the tape and returns (scalar loss, variable).
using GraphBuilder = std::function<std::pair<ad::Var, ad::Var>(ad::Tape&)>;

struct TraceEstimate {
  double trace = 0.0;         // mean of v^T H v over probes
  std::vector<double> samples;
  std::size_t dimension = 0;  // numel of the variable
};

// Hutchinson estimate of Tr(d^2 loss / d var^2). Probe p uses a Rademacher
// vector seeded by (seed, p). Throws ValidationError for probes < 1.
TraceEstimate hutchinson_trace(const GraphBuilder& build, std::size_t probes, std::uint64_t seed);

struct RankedLayer {
  std::size_t layer = 0;
  double score = 0.0;
  std::size_t rank = 0;  // 1-based
};

// Descending score, ties by ascending layer index.
std::vector<RankedLayer> rank_scores(const std::map<std::size_t, double>& scores);
std::vector<RankedLayer> rank_layers(const NetworkDef& net, const LabeledDataset& data, MetricKind metric,
                                     Target target, int bits, const SensitivityOptions& opt = {});

struct SensitivityRow {
  MetricKind metric;
  Target target;
  std::size_t layer;
  int bits;
  double score;
  std::size_t rank;
};

std::string sensitivity_csv(const std::vector<SensitivityRow>& rows);
std::string sensitivity_json(const std::vector<SensitivityRow>& rows, const std::string& dataset);

}  // namespace mpq
