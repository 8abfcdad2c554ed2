#include "mpq/network.hpp"

#include <cmath>
#include <random>
#include <set>

#include "mpq/errors.hpp"

namespace mpq {

namespace {

const std::pair<LayerKind, const char*> kKindNames[] = {
    {LayerKind::dense, "dense"},         {LayerKind::conv2d, "conv2d"},
    {LayerKind::relu, "relu"},           {LayerKind::maxpool, "maxpool"},
    {LayerKind::avgpool, "avgpool"},     {LayerKind::batchnorm, "batchnorm"},
    {LayerKind::flatten, "flatten"},     {LayerKind::residual_add, "residual_add"},
    {LayerKind::softmax_head, "softmax_head"},
};

std::string where(std::size_t i, LayerKind k) {
  return "layer " + std::to_string(i) + " (" + to_string(k) + ")";
}

bool is_quantizable(LayerKind k) { return k == LayerKind::dense || k == LayerKind::conv2d; }

bool extends_activation(LayerKind k) {
  return k == LayerKind::relu || k == LayerKind::batchnorm || k == LayerKind::residual_add;
}

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

const char* to_string(LayerKind k) {
  for (const auto& [kind, name] : kKindNames)
    if (kind == k) return name;
  return "?";
}

LayerKind parse_layer_kind(const std::string& s) {
  for (const auto& [kind, name] : kKindNames)
    if (s == name) return kind;
  throw ParseError("unknown layer kind '" + s + "'");
}

std::vector<std::size_t> NetworkDef::quantizable_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (is_quantizable(layers[i].kind)) out.push_back(i);
  return out;
}

std::map<std::size_t, std::size_t> NetworkDef::activation_points() const {
  std::map<std::size_t, std::size_t> out;
  for (std::size_t i : quantizable_layers()) {
    std::size_t j = i;
    while (j + 1 < layers.size() && extends_activation(layers[j + 1].kind)) ++j;
    out[i] = j;
  }
  return out;
}

std::vector<Shape> NetworkDef::output_shapes() const {
  if (input_shape.size() != 3) {
    throw ValidationError("input shape must be [c,h,w], got " + shape_str(input_shape));
  }
  std::vector<Shape> out;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    auto need_rank = [&](std::size_t r) {
      if (cur.size() != r) {
        throw ValidationError(where(i, l.kind) + ": expects rank-" + std::to_string(r) +
                              " input, got " + shape_str(cur));
      }
    };
    switch (l.kind) {
      case LayerKind::dense:
        need_rank(1);
        if (l.units == 0) throw ValidationError(where(i, l.kind) + ": units must be positive");
        cur = {l.units};
        break;
      case LayerKind::conv2d:
        need_rank(3);
        if (l.units == 0 || l.kernel == 0 || l.stride == 0) {
          throw ValidationError(where(i, l.kind) + ": channels, kernel and stride must be positive");
        }
        if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel) {
          throw ValidationError(where(i, l.kind) + ": kernel larger than padded input");
        }
        cur = {l.units, ad::conv_out_dim(cur[1], l.kernel, l.stride, l.pad),
               ad::conv_out_dim(cur[2], l.kernel, l.stride, l.pad)};
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        need_rank(3);
        std::size_t k = l.kernel, s = l.stride;
        if (l.kind == LayerKind::avgpool && k == 0) {
          if (cur[1] != cur[2]) throw ValidationError(where(i, l.kind) + ": global pool needs square input");
          k = s = cur[1];
        }
        if (k == 0 || s == 0 || k > cur[1] || k > cur[2]) {
          throw ValidationError(where(i, l.kind) + ": invalid window for input " + shape_str(cur));
        }
        cur = {cur[0], (cur[1] - k) / s + 1, (cur[2] - k) / s + 1};
        break;
      }
      case LayerKind::relu:
      case LayerKind::batchnorm:
        break;
      case LayerKind::flatten:
        cur = {shape_numel(cur)};
        break;
      case LayerKind::residual_add:
        if (l.source >= i) {
          throw ValidationError(where(i, l.kind) + ": source " + std::to_string(l.source) +
                                " must precede the layer");
        }
        if (out[l.source] != cur) {
          throw ValidationError(where(i, l.kind) + ": source shape " + shape_str(out[l.source]) +
                                " incompatible with " + shape_str(cur));
        }
        break;
      case LayerKind::softmax_head:
        if (cur != Shape{num_classes}) {
          throw ValidationError(where(i, l.kind) + ": expects [" + std::to_string(num_classes) +
                                "] logits, got " + shape_str(cur));
        }
        break;
    }
    out.push_back(cur);
  }
  return out;
}

void NetworkDef::validate() const {
  if (num_classes == 0) throw ValidationError("num_classes must be positive");
  if (layers.empty() || layers.back().kind != LayerKind::softmax_head) {
    throw ValidationError("the last layer must be softmax_head");
  }
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::softmax_head) {
      throw ValidationError(where(i, layers[i].kind) + ": only one softmax_head, and it must be last");
    }
  }
  if (quantizable_layers().empty()) throw ValidationError("network has no parameterized layer");
  const std::vector<Shape> shapes = output_shapes();

  for (const auto& [idx, p] : params) {
    if (idx >= layers.size()) {
      throw ValidationError("parameters for layer " + std::to_string(idx) + " which does not exist");
    }
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const Shape in = i == 0 ? input_shape : shapes[i - 1];
    const bool has = params.count(i) != 0;
    Shape w, b;
    if (l.kind == LayerKind::dense) {
      w = {l.units, in[0]};
      b = {l.units};
    } else if (l.kind == LayerKind::conv2d) {
      w = {l.units, in[0], l.kernel, l.kernel};
      b = {l.units};
    } else if (l.kind == LayerKind::batchnorm) {
      w = b = {in[0]};
    } else {
      if (has) throw ValidationError(where(i, l.kind) + ": layer takes no parameters");
      continue;
    }
    if (!has) throw ValidationError(where(i, l.kind) + ": missing parameters");
    const LayerParams& p = params.at(i);
    auto check = [&](const Tensor& t, const Shape& s, const char* name) {
      if (t.shape() != s) {
        throw ValidationError(where(i, l.kind) + ": " + name + " shape " + shape_str(t.shape()) +
                              ", expected " + shape_str(s));
      }
    };
    check(p.weight, w, "weight");
    check(p.bias, b, "bias");
    if (l.kind == LayerKind::batchnorm) {
      check(p.mean, b, "mean");
      check(p.var, b, "var");
      for (double v : p.var.data())
        if (!(v >= 0)) throw ValidationError(where(i, l.kind) + ": negative variance");
    }
  }
}

NetworkDef make_mlp(const Shape& input_shape, std::size_t num_classes, std::uint64_t seed,
                    std::vector<std::size_t> hidden) {
  NetworkDef net;
  net.name = "mlp";
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  net.layers.push_back({LayerKind::flatten});
  for (std::size_t h : hidden) {
    net.layers.push_back({LayerKind::dense, h});
    net.layers.push_back({LayerKind::relu});
  }
  net.layers.push_back({LayerKind::dense, num_classes});
  net.layers.push_back({LayerKind::softmax_head});

  std::mt19937_64 rng(seed);
  std::size_t fan_in = shape_numel(input_shape);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (l.kind != LayerKind::dense) continue;
    net.params[i] = {he_normal({l.units, fan_in}, fan_in, rng), Tensor(Shape{l.units}), {}, {}};
    fan_in = l.units;
  }
  net.validate();
  return net;
}

NetworkDef make_tiny_cnn(const Shape& input_shape, std::size_t num_classes, std::uint64_t seed) {
  NetworkDef net;
  net.name = "tiny_cnn";
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  net.layers = {
      {LayerKind::conv2d, 8, 3, 1, 1},
      {LayerKind::relu},
      {LayerKind::maxpool, 0, 2, 2},
      {LayerKind::conv2d, 16, 3, 1, 1},
      {LayerKind::relu},
      {LayerKind::conv2d, 16, 3, 1, 1},
      {LayerKind::relu},
      {LayerKind::residual_add, 0, 0, 1, 0, 4},
      {LayerKind::avgpool, 0, 2, 2},
      {LayerKind::flatten},
      {LayerKind::dense, num_classes},
      {LayerKind::softmax_head},
  };
  std::mt19937_64 rng(seed);
  const std::vector<Shape> shapes = net.output_shapes();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    const Shape in = i == 0 ? input_shape : shapes[i - 1];
    if (l.kind == LayerKind::conv2d) {
      const std::size_t fan_in = in[0] * l.kernel * l.kernel;
      net.params[i] = {he_normal({l.units, in[0], l.kernel, l.kernel}, fan_in, rng),
                       Tensor(Shape{l.units}), {}, {}};
    } else if (l.kind == LayerKind::dense) {
      net.params[i] = {he_normal({l.units, in[0]}, in[0], rng), Tensor(Shape{l.units}), {}, {}};
    }
  }
  net.validate();
  return net;
}

NetworkDef make_reference(const std::string& arch, const Shape& input_shape, std::size_t num_classes,
                          std::uint64_t seed) {
  if (arch == "mlp") return make_mlp(input_shape, num_classes, seed);
  if (arch == "tiny_cnn" || arch == "tinycnn") return make_tiny_cnn(input_shape, num_classes, seed);
  throw ValidationError("unknown reference architecture '" + arch + "' (expected mlp or tiny_cnn)");
}

QuantConfig fp32_config(const NetworkDef& net) {
  QuantConfig c;
  for (std::size_t i : net.quantizable_layers()) c.layers[i] = {QuantSpec::fp32(), QuantSpec::fp32()};
  return c;
}

void check_config(const NetworkDef& net, const QuantConfig& config) {
  const auto q = net.quantizable_layers();
  const std::set<std::size_t> known(q.begin(), q.end());
  for (const auto& [idx, lq] : config.layers) {
    if (!known.count(idx)) {
      throw ValidationError("quant config names layer " + std::to_string(idx) +
                            ", which is not a parameterized layer");
    }
    lq.weight.validate();
    lq.activation.validate();
  }
  for (std::size_t i : q) {
    if (!config.layers.count(i)) {
      throw ValidationError("quant config has no entry for layer " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

struct Core {
  std::vector<ad::Var> acts;
  ad::Var logits;
  std::map<std::size_t, LayerTrace> layers;
};

Core run(const NetworkDef& net, ad::Tape& tape, const ad::Var& x, const QuantConfig* quant,
         bool traced, ParamMode mode) {
  Shape expected = net.input_shape;
  expected.insert(expected.begin(), x.shape().empty() ? 0 : x.shape()[0]);
  if (x.shape() != expected) {
    throw DimensionError("network input must be [n," + shape_str(net.input_shape).substr(1) +
                         ", got " + shape_str(x.shape()));
  }
  if (quant) check_config(net, *quant);

  std::map<std::size_t, std::size_t> owner_of_point;
  for (const auto& [owner, point] : net.activation_points()) owner_of_point[point] = owner;

  auto quantize_var = [&](const ad::Var& v, const QuantSpec& spec, ad::Var& q, ad::Var& err) {
    if (traced) {
      const TracedQuant t = quantize_traced(v, spec);
      q = t.q;
      err = t.err;
    } else {
      q = spec.is_fp32() ? v : tape.constant(quantize(v.value(), spec));
    }
  };

  Core core;
  ad::Var cur = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    ad::Var out;
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::conv2d: {
        const LayerParams& p = net.params.at(i);
        LayerTrace& lt = core.layers[i];
        const bool train = mode == ParamMode::trainable;
        lt.weight = train ? tape.variable(p.weight) : tape.constant(p.weight);
        lt.bias = train ? tape.variable(p.bias) : tape.constant(p.bias);
        ad::Var w = lt.weight;
        if (quant) quantize_var(lt.weight, quant->at(i).weight, w, lt.weight_err);
        lt.weight_q = w;
        if (l.kind == LayerKind::dense) {
          out = ad::add_bias(ad::matmul(cur, w, false, true), lt.bias);
        } else {
          out = ad::add_bias(ad::conv2d(cur, w, {l.stride, l.pad}), lt.bias);
        }
        break;
      }
      case LayerKind::relu:
        out = ad::relu(cur);
        break;
      case LayerKind::batchnorm: {
        const LayerParams& p = net.params.at(i);
        out = ad::batchnorm_inference(cur, p.weight, p.bias, p.mean, p.var);
        break;
      }
      case LayerKind::maxpool:
        out = ad::max_pool2d(cur, l.kernel, l.stride);
        break;
      case LayerKind::avgpool:
        if (l.kernel == 0) {
          out = ad::avg_pool2d(cur, cur.shape()[2], cur.shape()[2]);
        } else {
          out = ad::avg_pool2d(cur, l.kernel, l.stride);
        }
        break;
      case LayerKind::flatten: {
        const Shape& s = cur.shape();
        out = ad::reshape(cur, {s[0], shape_numel(Shape(s.begin() + 1, s.end()))});
        break;
      }
      case LayerKind::residual_add:
        out = ad::add(cur, core.acts[l.source]);
        break;
      case LayerKind::softmax_head:
        out = cur;
        core.logits = cur;
        break;
    }
    auto it = owner_of_point.find(i);
    if (it != owner_of_point.end()) {
      LayerTrace& lt = core.layers[it->second];
      lt.act_q = out;
      if (quant) quantize_var(out, quant->at(it->second).activation, lt.act_q, lt.act_err);
      out = lt.act_q;
    }
    core.acts.push_back(out);
    cur = out;
  }
  return core;
}

}  // namespace

ForwardTrace forward(const NetworkDef& net, const Tensor& x, const QuantConfig* quant) {
  ad::Tape tape;
  ad::NoGradGuard guard(tape);
  Core core = run(net, tape, tape.constant(x), quant, false, ParamMode::constant);
  ForwardTrace t;
  for (const auto& a : core.acts) t.activations.push_back(a.value());
  t.logits = core.logits.value();
  return t;
}

Tensor predict_logits(const NetworkDef& net, const Tensor& x, const QuantConfig* quant,
                      std::size_t batch) {
  const std::size_t n = x.rank() == 0 ? 0 : x.dim(0);
  if (n <= batch) return forward(net, x, quant).logits;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < n; b += batch) {
    parts.push_back(forward(net, x.rows(b, std::min(n, b + batch)), quant).logits);
  }
  return concat_rows(parts);
}

TracedForward forward_traced(const NetworkDef& net, ad::Tape& tape, const ad::Var& x,
                             const QuantConfig* quant, ParamMode mode) {
  Core core = run(net, tape, x, quant, true, mode);
  return {std::move(core.acts), core.logits, std::move(core.layers)};
}

}  // namespace mpq
