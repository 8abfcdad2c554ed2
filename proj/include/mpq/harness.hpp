#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/network.hpp"
#include "mpq/quantizer.hpp"
#include "mpq/sensitivity.hpp"

namespace mpq {

// weights: A32W{32,k}, start with every weight at k bits.
// activations: A{32,k}W32, start with every activation at k bits.
enum class Protocol { weights, activations };

const char* to_string(Protocol p);
Protocol parse_protocol(const std::string& s);
std::string protocol_tag(Protocol p, int bits);
Target protocol_target(Protocol p);

struct SwitchingCurve {
  Protocol protocol = Protocol::weights;
  int bits = 4;
  std::string metric;
  std::string provenance;
  std::vector<std::size_t> order;  // layer restored to FP32 at each step
  std::vector<double> loss;        // loss[s] after s switches; size L+1
};

// Quantized config for the protocol with the layers in `switched` at FP32.
QuantConfig switching_config(const NetworkDef& net, Protocol protocol, int bits,
                             const CalibrationProfile& clips, const std::set<std::size_t>& switched);

// Throws ValidationError unless `ranking` is a permutation of the
// quantizable layers.
SwitchingCurve run_switching(const NetworkDef& net, const LabeledDataset& eval,
                             const std::vector<std::size_t>& ranking, Protocol protocol, int bits,
                             const CalibrationProfile& clips, const std::string& metric = "");

// Greedy: at each step restore the layer whose switch lowers the task loss
// most (ties to the lower index).
SwitchingCurve greedy_oracle(const NetworkDef& net, const LabeledDataset& eval, Protocol protocol, int bits,
                             const CalibrationProfile& clips);

std::vector<std::size_t> random_ordering(const NetworkDef& net, std::uint64_t seed);
std::vector<std::size_t> ranking_order(const std::vector<RankedLayer>& ranked);

// Trapezoid over switch counts 0..L.
double auc(const SwitchingCurve& curve);
// Each area divided by the area of `reference`, which must be present and
// nonzero.
std::map<std::string, double> relative_auc(const std::map<std::string, SwitchingCurve>& curves,
                                           const std::string& reference = "proposed");

// Spearman rank correlation with average ranks for ties; 0 when either side
// is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

std::string curve_csv(const SwitchingCurve& curve);

}  // namespace mpq
