#include "mpq/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "json.hpp"
#include "mpq/errors.hpp"
#include "mpq/io.hpp"
#include "mpq/kernels/kernels.hpp"

namespace mpq {

const char* to_string(Target t) { return t == Target::weight ? "weight" : "activation"; }

const char* to_string(MetricKind m) {
  switch (m) {
    case MetricKind::proposed: return "proposed";
    case MetricKind::l2: return "l2";
    case MetricKind::kld: return "kld";
    case MetricKind::hessian: return "hessian";
  }
  return "?";
}

const char* to_string(NormKind n) {
  switch (n) {
    case NormKind::l2: return "l2";
    case NormKind::l2_mean: return "l2_mean";
    case NormKind::l1: return "l1";
  }
  return "?";
}

Target parse_target(const std::string& s) {
  if (s == "weight" || s == "weights") return Target::weight;
  if (s == "activation" || s == "activations") return Target::activation;
  throw ValidationError("unknown target '" + s + "' (expected weight or activation)");
}

MetricKind parse_metric(const std::string& s) {
  for (MetricKind m : {MetricKind::proposed, MetricKind::l2, MetricKind::kld, MetricKind::hessian})
    if (s == to_string(m)) return m;
  throw ValidationError("unknown metric '" + s + "' (expected proposed, l2, kld or hessian)");
}

NormKind parse_norm(const std::string& s) {
  for (NormKind n : {NormKind::l2, NormKind::l2_mean, NormKind::l1})
    if (s == to_string(n)) return n;
  throw ValidationError("unknown norm '" + s + "' (expected l2, l2_mean or l1)");
}

namespace {

double norm_of(const Tensor& g, NormKind kind) {
  switch (kind) {
    case NormKind::l2: return std::sqrt(kernels::sum_squares(g.data()));
    case NormKind::l2_mean:
      return g.numel() == 0 ? 0.0 : std::sqrt(kernels::sum_squares(g.data()) / double(g.numel()));
    case NormKind::l1: {
      double s = 0;
      for (double v : g.data()) s += std::abs(v);
      return s;
    }
  }
  return 0.0;
}

void require_data(const LabeledDataset& data, const char* what) {
  if (data.empty()) throw ValidationError(std::string(what) + ": dataset is empty");
}

Tensor softmax_row(std::span<const double> row) {
  Tensor p(Shape{row.size()});
  const double mx = *std::max_element(row.begin(), row.end());
  double s = 0;
  for (std::size_t c = 0; c < row.size(); ++c) s += p[c] = std::exp(row[c] - mx);
  for (auto& v : p.data()) v /= s;
  return p;
}

double weight_clip(const Tensor& w) {
  const double m = kernels::max_abs(w.data());
  return m > 0 ? m : 1.0;
}

Tensor labels_one_hot(const LabeledDataset& data, std::size_t C) {
  Tensor t(Shape{data.size(), C});
  for (std::size_t i = 0; i < data.size(); ++i) t.at(i, data.labels[i]) = 1.0;
  return t;
}

}  // namespace

OmegaVector omega(const NetworkDef& net, const LabeledDataset& data, const QuantConfig& config,
                  NormKind norm) {
  require_data(data, "omega");
  check_config(net, config);
  OmegaVector out;
  out.config = config;
  const auto layers = net.quantizable_layers();
  for (std::size_t i : layers) out.activation[i] = out.weight[i] = 0.0;

  for (std::size_t s = 0; s < data.size(); ++s) {
    const Tensor x = data.batch(s, s + 1);
    const Tensor y = forward(net, x).logits;
    ad::Tape tape;
    const TracedForward f = forward_traced(net, tape, tape.constant(x), &config);
    const ad::Var loss = ad::euclidean_loss(f.logits, tape.constant(y));
    const ad::Gradients g = ad::backward(loss);
    for (std::size_t i : layers) {
      const LayerTrace& lt = f.layers.at(i);
      const double nw = norm_of(g[lt.weight_err], norm);
      const double na = norm_of(g[lt.act_err], norm);
      if (!std::isfinite(nw) || !std::isfinite(na)) {
        throw MetricError("non-finite gradient at layer " + std::to_string(i) + " (" +
                          (std::isfinite(nw) ? "activation" : "weight") + "), sample " +
                          std::to_string(s));
      }
      out.weight[i] += nw;
      out.activation[i] += na;
    }
  }
  const double n = double(data.size());
  for (std::size_t i : layers) {
    out.weight[i] /= n;
    out.activation[i] /= n;
  }
  return out;
}

double expectation(const OmegaVector& omega, double floor) {
  if (omega.weight.empty() || omega.weight.size() != omega.activation.size()) {
    throw ValidationError("expectation: omega needs one (activation, weight) pair per layer");
  }
  double log_sum = 0.0;
  for (const auto& [i, w] : omega.weight) {
    log_sum += std::log(std::max(w, floor)) + std::log(std::max(omega.activation.at(i), floor));
  }
  return std::exp(log_sum / double(omega.weight.size()));
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("kl_divergence: length mismatch");
  constexpr double eps = 1e-12;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += p[i] * std::log((p[i] + eps) / (q[i] + eps));
  }
  // Epsilon smoothing can leave rounding-level negatives.
  return std::max(s, 0.0);
}

QuantConfig single_layer_config(const NetworkDef& net, std::size_t layer, Target target, int bits,
                                const CalibrationProfile* clips) {
  QuantConfig c = fp32_config(net);
  if (!c.layers.count(layer)) {
    throw ValidationError("layer " + std::to_string(layer) + " is not a parameterized layer");
  }
  if (bits == QuantSpec::kFp32Bits) return c;
  if (target == Target::weight) {
    c.layers[layer].weight = QuantSpec::uniform(bits, weight_clip(net.params.at(layer).weight));
  } else {
    if (!clips) throw ValidationError("activation sensitivity needs a calibration profile");
    auto it = clips->activation_max.find(layer);
    if (it == clips->activation_max.end()) {
      throw ValidationError("calibration profile has no entry for layer " + std::to_string(layer));
    }
    c.layers[layer].activation = QuantSpec::uniform(bits, it->second > 0 ? it->second : 1.0);
  }
  return c;
}

SensitivityScore sensitivity_proposed(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                      Target target, int bits, const SensitivityOptions& opt) {
  const QuantConfig c = single_layer_config(net, layer, target, bits, opt.clips);
  return {MetricKind::proposed, layer, target, bits, expectation(omega(net, data, c, opt.norm))};
}

SensitivityScore sensitivity_l2(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                Target target, int bits, const SensitivityOptions& opt) {
  require_data(data, "sensitivity_l2");
  const QuantConfig c = single_layer_config(net, layer, target, bits, opt.clips);
  const Tensor y = predict_logits(net, data.images);
  const Tensor yq = predict_logits(net, data.images, &c);
  const std::size_t C = net.num_classes;
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double r = 0.0;
    for (std::size_t k = 0; k < C; ++k) r += (y.at(i, k) - yq.at(i, k)) * (y.at(i, k) - yq.at(i, k));
    s += std::sqrt(r);
  }
  return {MetricKind::l2, layer, target, bits, s / double(data.size())};
}

SensitivityScore sensitivity_kld(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                 Target target, int bits, const SensitivityOptions& opt) {
  require_data(data, "sensitivity_kld");
  const QuantConfig c = single_layer_config(net, layer, target, bits, opt.clips);
  const Tensor y = predict_logits(net, data.images);
  const Tensor yq = predict_logits(net, data.images, &c);
  const std::size_t C = net.num_classes;
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor p = softmax_row(y.data().subspan(i * C, C));
    const Tensor q = softmax_row(yq.data().subspan(i * C, C));
    s += kl_divergence(p.data(), q.data());
  }
  return {MetricKind::kld, layer, target, bits, s / double(data.size())};
}

TraceEstimate hutchinson_trace(const GraphBuilder& build, std::size_t probes, std::uint64_t seed) {
  if (probes < 1) throw ValidationError("hutchinson_trace: probes must be >= 1");
  TraceEstimate est;
  double total = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    ad::Tape tape;
    const auto [loss, var] = build(tape);
    est.dimension = var.value().numel();
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(p), std::uint32_t(p >> 32)};
    std::mt19937_64 rng(seq);
    Tensor r(var.shape());
    for (auto& v : r.data()) v = (rng() & 1) ? 1.0 : -1.0;
    const ad::Gradients g = ad::backward(loss, true);
    double sample = 0.0;
    if (g.reachable(var)) {
      const ad::Var gv = g.var(var);
      const ad::Var s = ad::sum(ad::mul(gv, tape.constant(r)));
      if (s.requires_grad()) sample = kernels::dot(r.data(), ad::backward(s)[var].data());
    }
    est.samples.push_back(sample);
    total += sample;
  }
  est.trace = total / double(probes);
  return est;
}

SensitivityScore sensitivity_hessian(const NetworkDef& net, const LabeledDataset& data, std::size_t layer,
                                     Target target, int bits, const SensitivityOptions& opt) {
  require_data(data, "sensitivity_hessian");
  if (opt.probes < 1) throw ValidationError("sensitivity_hessian: probes must be >= 1");
  const QuantConfig c = single_layer_config(net, layer, target, bits, opt.clips);
  const SensitivityScore zero{MetricKind::hessian, layer, target, bits, 0.0};
  if (c.all_fp32()) return zero;

  const Tensor targets = labels_one_hot(data, net.num_classes);
  const QuantConfig identity = fp32_config(net);
  double perturbation = 0.0;
  double per_element = 0.0;
  if (target == Target::weight) {
    const Tensor& w = net.params.at(layer).weight;
    const Tensor q = quantize(w, c.at(layer).weight);
    for (std::size_t k = 0; k < w.numel(); ++k) perturbation += (q[k] - w[k]) * (q[k] - w[k]);
    const TraceEstimate t = hutchinson_trace(
        [&](ad::Tape& tape) {
          const TracedForward f = forward_traced(net, tape, tape.constant(data.images), nullptr,
                                                 ParamMode::trainable);
          return std::pair{ad::softmax_crossentropy(f.logits, targets), f.layers.at(layer).weight};
        },
        opt.probes, opt.seed);
    per_element = t.trace / double(w.numel());
  } else {
    const std::size_t point = net.activation_points().at(layer);
    const Tensor a = forward(net, data.images).activations[point];
    const Tensor q = quantize(a, c.at(layer).activation);
    for (std::size_t k = 0; k < a.numel(); ++k) perturbation += (q[k] - a[k]) * (q[k] - a[k]);
    perturbation /= double(data.size());
    // The mean loss weights each sample's block by 1/N, so Tr/numel_x is the
    // per-sample mean trace per element.
    const TraceEstimate t = hutchinson_trace(
        [&](ad::Tape& tape) {
          const TracedForward f = forward_traced(net, tape, tape.constant(data.images), &identity);
          return std::pair{ad::softmax_crossentropy(f.logits, targets), f.layers.at(layer).act_err};
        },
        opt.probes, opt.seed);
    per_element = t.trace / (double(a.numel()) / double(data.size()));
  }
  return {MetricKind::hessian, layer, target, bits, per_element * perturbation};
}

SensitivityScore sensitivity(MetricKind metric, const NetworkDef& net, const LabeledDataset& data,
                             std::size_t layer, Target target, int bits, const SensitivityOptions& opt) {
  switch (metric) {
    case MetricKind::proposed: return sensitivity_proposed(net, data, layer, target, bits, opt);
    case MetricKind::l2: return sensitivity_l2(net, data, layer, target, bits, opt);
    case MetricKind::kld: return sensitivity_kld(net, data, layer, target, bits, opt);
    case MetricKind::hessian: return sensitivity_hessian(net, data, layer, target, bits, opt);
  }
  throw ValidationError("unknown metric");
}

std::vector<RankedLayer> rank_scores(const std::map<std::size_t, double>& scores) {
  std::vector<RankedLayer> out;
  for (const auto& [layer, s] : scores) out.push_back({layer, s, 0});
  std::stable_sort(out.begin(), out.end(), [](const RankedLayer& a, const RankedLayer& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.layer < b.layer;
  });
  for (std::size_t r = 0; r < out.size(); ++r) out[r].rank = r + 1;
  return out;
}

std::vector<RankedLayer> rank_layers(const NetworkDef& net, const LabeledDataset& data, MetricKind metric,
                                     Target target, int bits, const SensitivityOptions& opt) {
  std::map<std::size_t, double> scores;
  for (std::size_t i : net.quantizable_layers()) {
    scores[i] = sensitivity(metric, net, data, i, target, bits, opt).value;
  }
  return rank_scores(scores);
}

std::string sensitivity_csv(const std::vector<SensitivityRow>& rows) {
  std::string s = "metric,target,layer,bits,score,rank\n";
  for (const auto& r : rows) {
    s += std::string(to_string(r.metric)) + "," + to_string(r.target) + "," + std::to_string(r.layer) +
         "," + std::to_string(r.bits) + "," + io::format_double(r.score) + "," + std::to_string(r.rank) + "\n";
  }
  return s;
}

std::string sensitivity_json(const std::vector<SensitivityRow>& rows, const std::string& dataset) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"metric", to_string(r.metric)},
                   {"target", to_string(r.target)},
                   {"layer", r.layer},
                   {"bits", r.bits},
                   {"score", r.score},
                   {"rank", r.rank}});
  }
  return nlohmann::json{{"format_version", 1}, {"dataset", dataset}, {"scores", arr}}.dump(2) + "\n";
}

}  // namespace mpq
