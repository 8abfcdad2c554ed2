#include "mpq/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mpq/errors.hpp"
#include "mpq/io.hpp"

namespace mpq {

const char* to_string(Protocol p) { return p == Protocol::weights ? "weights" : "activations"; }

Protocol parse_protocol(const std::string& s) {
  if (s == "weights" || s == "weight") return Protocol::weights;
  if (s == "activations" || s == "activation") return Protocol::activations;
  throw ValidationError("unknown protocol '" + s + "' (expected weights or activations)");
}

std::string protocol_tag(Protocol p, int bits) {
  const std::string b = "{32," + std::to_string(bits) + "}";
  return p == Protocol::weights ? "A32W" + b : "A" + b + "W32";
}

Target protocol_target(Protocol p) { return p == Protocol::weights ? Target::weight : Target::activation; }

QuantConfig switching_config(const NetworkDef& net, Protocol protocol, int bits,
                             const CalibrationProfile& clips, const std::set<std::size_t>& switched) {
  QuantConfig c = fp32_config(net);
  for (auto& [i, lq] : c.layers) {
    if (switched.count(i)) continue;
    c.layers[i] = single_layer_config(net, i, protocol_target(protocol), bits, &clips).layers.at(i);
  }
  return c;
}

namespace {

void check_ranking(const NetworkDef& net, const std::vector<std::size_t>& ranking) {
  std::vector<std::size_t> a = net.quantizable_layers(), b = ranking;
  std::sort(b.begin(), b.end());
  if (a != b) throw ValidationError("ranking does not cover the network's parameterized layers exactly once");
}

}  // namespace

SwitchingCurve run_switching(const NetworkDef& net, const LabeledDataset& eval,
                             const std::vector<std::size_t>& ranking, Protocol protocol, int bits,
                             const CalibrationProfile& clips, const std::string& metric) {
  check_ranking(net, ranking);
  SwitchingCurve curve;
  curve.protocol = protocol;
  curve.bits = bits;
  curve.metric = metric;
  curve.provenance = to_string(eval.provenance);
  curve.order = ranking;
  std::set<std::size_t> switched;
  QuantConfig c = switching_config(net, protocol, bits, clips, switched);
  curve.loss.push_back(evaluate(net, eval, &c).mean_loss);
  for (std::size_t layer : ranking) {
    switched.insert(layer);
    c = switching_config(net, protocol, bits, clips, switched);
    curve.loss.push_back(evaluate(net, eval, &c).mean_loss);
  }
  return curve;
}

SwitchingCurve greedy_oracle(const NetworkDef& net, const LabeledDataset& eval, Protocol protocol, int bits,
                             const CalibrationProfile& clips) {
  SwitchingCurve curve;
  curve.protocol = protocol;
  curve.bits = bits;
  curve.metric = "oracle";
  curve.provenance = to_string(eval.provenance);
  std::set<std::size_t> switched;
  QuantConfig c = switching_config(net, protocol, bits, clips, switched);
  curve.loss.push_back(evaluate(net, eval, &c).mean_loss);
  const auto layers = net.quantizable_layers();
  while (switched.size() < layers.size()) {
    std::size_t best = 0;
    double best_loss = INFINITY;
    for (std::size_t i : layers) {
      if (switched.count(i)) continue;
      auto trial = switched;
      trial.insert(i);
      c = switching_config(net, protocol, bits, clips, trial);
      const double l = evaluate(net, eval, &c).mean_loss;
      if (l < best_loss) best_loss = l, best = i;
    }
    switched.insert(best);
    curve.order.push_back(best);
    curve.loss.push_back(best_loss);
  }
  return curve;
}

std::vector<std::size_t> random_ordering(const NetworkDef& net, std::uint64_t seed) {
  std::vector<std::size_t> order = net.quantizable_layers();
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::size_t> ranking_order(const std::vector<RankedLayer>& ranked) {
  std::vector<std::size_t> out;
  for (const auto& r : ranked) out.push_back(r.layer);
  return out;
}

double auc(const SwitchingCurve& curve) {
  double a = 0.0;
  for (std::size_t s = 1; s < curve.loss.size(); ++s) a += 0.5 * (curve.loss[s - 1] + curve.loss[s]);
  return a;
}

std::map<std::string, double> relative_auc(const std::map<std::string, SwitchingCurve>& curves,
                                           const std::string& reference) {
  auto it = curves.find(reference);
  if (it == curves.end()) throw ValidationError("relative_auc: no curve for '" + reference + "'");
  const double ref = auc(it->second);
  if (!(ref > 0) || !std::isfinite(ref)) {
    throw MetricError("relative_auc: reference area must be positive, got " + io::format_double(ref));
  }
  std::map<std::string, double> out;
  for (const auto& [name, c] : curves) out[name] = name == reference ? 1.0 : auc(c) / ref;
  return out;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("spearman: length mismatch");
  if (a.size() < 2) return 0.0;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::string curve_csv(const SwitchingCurve& curve) {
  std::string s = "switched,layer,task_loss\n";
  for (std::size_t i = 0; i < curve.loss.size(); ++i) {
    s += std::to_string(i) + "," + (i == 0 || i > curve.order.size() ? std::string("") : std::to_string(curve.order[i - 1])) + "," +
         io::format_double(curve.loss[i]) + "\n";
  }
  return s;
}

}  // namespace mpq
