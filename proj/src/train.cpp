#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mpq/errors.hpp"
#include "mpq/network.hpp"

namespace mpq {

namespace {

struct Moments {
  Tensor m, v;
};

void check_labels(const NetworkDef& net, const LabeledDataset& data) {
  data.validate();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] >= net.num_classes) {
      throw ValidationError("label " + std::to_string(data.labels[i]) + " at sample " +
                            std::to_string(i) + " exceeds the network's " +
                            std::to_string(net.num_classes) + " classes");
    }
  }
}

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t begin, std::size_t end, std::size_t C) {
  Tensor t(Shape{end - begin, C});
  for (std::size_t i = begin; i < end; ++i) t.at(i - begin, labels[i]) = 1.0;
  return t;
}

}  // namespace

bool in_top_k(std::span<const double> logits, std::size_t label, std::size_t k) {
  const double target = logits[label];
  if (std::isnan(target)) return false;
  std::size_t rank = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j] > target || (logits[j] == target && j < label)) ++rank;
  }
  return rank < k;
}

EvalResult evaluate(const NetworkDef& net, const LabeledDataset& data, const QuantConfig* quant) {
  if (data.empty()) throw ValidationError("evaluate: dataset is empty");
  check_labels(net, data);
  const Tensor logits = predict_logits(net, data.images, quant);
  const std::size_t n = data.size(), C = net.num_classes;
  std::size_t hit1 = 0, hit5 = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.data().subspan(i * C, C);
    hit1 += in_top_k(row, data.labels[i], 1);
    if (C >= 5) hit5 += in_top_k(row, data.labels[i], 5);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss += mx + std::log(s) - row[data.labels[i]];
  }
  EvalResult r;
  r.count = n;
  r.top1 = double(hit1) / double(n);
  if (C >= 5) r.top5 = double(hit5) / double(n);
  r.mean_loss = loss / double(n);
  return r;
}

NetworkDef train(const NetworkDef& net, const LabeledDataset& data, const TrainConfig& cfg,
                 const LabeledDataset* validation) {
  net.validate();
  check_labels(net, data);
  if (cfg.epochs > 0 && data.empty()) throw ValidationError("train: dataset is empty");
  if (cfg.batch_size == 0) throw ValidationError("train: batch_size must be positive");
  if (!(cfg.learning_rate > 0)) throw ValidationError("train: learning_rate must be positive");

  NetworkDef out = net;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::map<std::size_t, std::pair<Moments, Moments>> state;
  for (std::size_t i : out.quantizable_layers()) {
    const LayerParams& p = out.params.at(i);
    state[i] = {{Tensor(p.weight.shape()), Tensor(p.weight.shape())},
                {Tensor(p.bias.shape()), Tensor(p.bias.shape())}};
  }

  auto update = [&](Tensor& param, const Tensor& grad, Moments& mom, std::size_t step) {
    auto p = param.data();
    auto g = grad.data();
    auto m = mom.m.data();
    auto v = mom.v.data();
    if (cfg.optimizer == TrainConfig::Optimizer::sgd) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = cfg.momentum * m[k] + g[k];
        p[k] -= cfg.learning_rate * m[k];
      }
      return;
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, double(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(step));
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g[k] * g[k];
      p[k] -= cfg.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.epsilon);
    }
  };

  std::size_t step = 0;
  double last_epoch_loss = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const LabeledDataset shuffled = data.subset(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0, batch_no = 0; b < shuffled.size(); b += cfg.batch_size, ++batch_no) {
      const std::size_t e = std::min(shuffled.size(), b + cfg.batch_size);
      ad::Tape tape;
      const ad::Var x = tape.constant(shuffled.batch(b, e));
      const TracedForward f = forward_traced(out, tape, x, nullptr, ParamMode::trainable);
      const ad::Var loss =
          ad::softmax_crossentropy(f.logits, one_hot(shuffled.labels, b, e, out.num_classes));
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "training diverged: loss " << lv << " at epoch " << epoch << ", batch " << batch_no
           << " (learning rate " << cfg.learning_rate << ")";
        throw TrainingError(os.str());
      }
      epoch_loss += lv * double(e - b);
      const ad::Gradients g = ad::backward(loss);
      ++step;
      for (auto& [i, mom] : state) {
        LayerParams& p = out.params.at(i);
        update(p.weight, g[f.layers.at(i).weight], mom.first, step);
        update(p.bias, g[f.layers.at(i).bias], mom.second, step);
      }
    }
    last_epoch_loss = epoch_loss / double(shuffled.size());
  }

  TrainingRecord rec;
  rec.epochs = cfg.epochs;
  rec.final_loss = last_epoch_loss;
  if (!data.empty()) rec.train_accuracy = evaluate(out, data).top1;
  if (validation && !validation->empty()) rec.val_accuracy = evaluate(out, *validation).top1;
  out.training = rec;
  return out;
}

}  // namespace mpq
