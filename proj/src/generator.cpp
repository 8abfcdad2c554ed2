#include "mpq/generator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "mpq/errors.hpp"
#include "mpq/io.hpp"

namespace mpq {

void GenConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    throw ValidationError("generator learning_rate must be positive");
  }
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ValidationError("generator lambda must be >= 0");
  if (iterations < 1) throw ValidationError("generator iterations must be >= 1");
  if (samples_per_class < 1) throw ValidationError("generator samples_per_class must be >= 1");
}

std::string GenConfig::to_json() const {
  nlohmann::json j = {{"learning_rate", learning_rate},
                      {"lambda", lambda},
                      {"maximize_logit", maximize_logit},
                      {"iterations", iterations},
                      {"samples_per_class", samples_per_class},
                      {"seed", seed},
                      {"preprocessing", mpq::to_string(preprocessing)},
                      {"init", "uniform-int[0,255]"},
                      {"adam", {{"beta1", beta1}, {"beta2", beta2}, {"epsilon", epsilon}}}};
  return j.dump();
}

namespace {

// Per-row cross-entropy of logits against one-hot labels.
std::vector<double> row_ce(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = logits.dim(0), C = logits.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.data().subspan(i * C, C);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0;
    for (double v : row) s += std::exp(v - mx);
    out[i] = mx + std::log(s) - row[labels[i]];
  }
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), C = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.data().subspan(i * C, C);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += out.at(i, c) = std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) out.at(i, c) /= s;
  }
  return out;
}

}  // namespace

GeneratedBatch generate(const NetworkDef& net, const GoldenSet& golden, const GenConfig& cfg) {
  cfg.validate();
  net.validate();
  const std::size_t C = net.num_classes;
  if (golden.vectors.rank() != 2 || golden.num_classes() != C || golden.vectors.dim(1) != C) {
    throw ValidationError("golden set has " + std::to_string(golden.vectors.rank() ? golden.num_classes() : 0) +
                          " classes, network has " + std::to_string(C));
  }
  const std::size_t n = C * cfg.samples_per_class;
  LabeledDataset data = make_noise(cfg.seed, n, net.input_shape, cfg.preprocessing, C);
  data.provenance = Provenance::generated;
  data.flags.clear();

  Tensor targets(Shape{n, C});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < C; ++c) targets.at(i, c) = golden.vectors.at(data.labels[i], c);
  Tensor target_mask(Shape{n, C});
  for (std::size_t i = 0; i < n; ++i) target_mask.at(i, data.labels[i]) = 1.0;

  const double lo = cfg.preprocessing.lower(), hi = cfg.preprocessing.upper();
  const double sign = cfg.maximize_logit ? -1.0 : 1.0;
  Tensor& x = data.images;
  Tensor m(x.shape()), v(x.shape());
  GeneratedBatch out;

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    ad::Tape tape;
    const ad::Var xv = tape.variable(x);
    const TracedForward f = forward_traced(net, tape, xv, nullptr);
    const std::vector<double> ce = row_ce(f.logits.value(), data.labels);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(ce[i])) {
        std::ostringstream os;
        os << "generation diverged: class " << data.labels[i] << " (sample " << i
           << ") has loss " << ce[i] << " at iteration " << it - 1;
        throw GenerationError(os.str());
      }
    }
    out.mean_ce.push_back(mean(ce));
    // Sum of per-sample terms, so each input's update is independent.
    const ad::Var ce_sum = ad::scale(ad::softmax_crossentropy(f.logits, targets), double(n));
    const ad::Var act = ad::sum(ad::mul(f.logits, tape.constant(target_mask)));
    const ad::Var loss = ad::add(ce_sum, ad::scale(act, sign * cfg.lambda));
    const Tensor g = ad::backward(loss)[xv];

    const double c1 = 1.0 - std::pow(cfg.beta1, double(it));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(it));
    auto xd = x.data();
    auto gd = g.data();
    auto md = m.data();
    auto vd = v.data();
    for (std::size_t k = 0; k < xd.size(); ++k) {
      md[k] = cfg.beta1 * md[k] + (1 - cfg.beta1) * gd[k];
      vd[k] = cfg.beta2 * vd[k] + (1 - cfg.beta2) * gd[k] * gd[k];
      const double step = cfg.learning_rate * (md[k] / c1) / (std::sqrt(vd[k] / c2) + cfg.epsilon);
      xd[k] = std::clamp(xd[k] - step, lo, hi);
    }
  }
  const Tensor logits = predict_logits(net, x);
  const std::vector<double> ce = row_ce(logits, data.labels);
  out.mean_ce.push_back(mean(ce));
  out.confidences = softmax_rows(logits);
  out.data = std::move(data);
  return out;
}

std::vector<ConfidenceRow> confidence_report(const LabeledDataset& batch, const NetworkDef& net) {
  if (batch.empty()) throw ValidationError("confidence_report: batch is empty");
  if (net.num_classes < 2) throw ValidationError("confidence_report: needs at least 2 classes");
  const Tensor probs = softmax_rows(predict_logits(net, batch.images));
  const std::size_t C = net.num_classes;
  std::vector<ConfidenceRow> rows;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<std::size_t> order(C);
    for (std::size_t c = 0; c < C; ++c) order[c] = c;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs.at(i, a) > probs.at(i, b); });
    ConfidenceRow r;
    r.sample = i;
    r.label = batch.labels[i];
    r.top1_class = order[0];
    r.top1_conf = probs.at(i, order[0]);
    r.top2_class = order[1];
    r.top2_conf = probs.at(i, order[1]);
    r.match = r.top1_class == r.label;
    rows.push_back(r);
  }
  return rows;
}

std::string confidence_csv(const std::vector<ConfidenceRow>& rows) {
  std::string s = "sample,class,top1_class,top1_conf,top2_class,top2_conf,match\n";
  for (const auto& r : rows) {
    s += std::to_string(r.sample) + "," + std::to_string(r.label) + "," + std::to_string(r.top1_class) +
         "," + io::format_double(r.top1_conf) + "," + std::to_string(r.top2_class) + "," +
         io::format_double(r.top2_conf) + "," + (r.match ? "true" : "false") + "\n";
  }
  return s;
}

}  // namespace mpq
