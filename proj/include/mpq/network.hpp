#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpq/autodiff.hpp"
#include "mpq/dataset.hpp"
#include "mpq/quantizer.hpp"
#include "mpq/tensor.hpp"

namespace mpq {

enum class LayerKind { dense, conv2d, relu, maxpool, avgpool, batchnorm, flatten, residual_add, softmax_head };

const char* to_string(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;     // dense: output features; conv2d: output channels
  std::size_t kernel = 0;    // conv2d kernel size; pool window (avgpool: 0 = global)
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t source = 0;    // residual_add: index of the other operand
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct LayerParams {
  Tensor weight;  // dense [out,in]; conv2d [cout,cin,k,k]; batchnorm gamma [c]
  Tensor bias;    // dense/conv2d bias; batchnorm beta
  Tensor mean;    // batchnorm only
  Tensor var;     // batchnorm only
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct TrainingRecord {
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double final_loss = 0.0;
  friend bool operator==(const TrainingRecord&, const TrainingRecord&) = default;
};

struct NetworkDef {
  std::string name;
  Shape input_shape;  // [c,h,w]
  std::size_t num_classes = 0;
  std::vector<LayerSpec> layers;
  std::map<std::size_t, LayerParams> params;
  std::optional<TrainingRecord> training;

  // Layers carrying quantizable weights (dense and conv2d), ascending.
  std::vector<std::size_t> quantizable_layers() const;
  // For each quantizable layer, the layer whose output is its quantized
  // activation: the end of the run of relu/batchnorm/residual_add layers that
  // immediately follows it.
  std::map<std::size_t, std::size_t> activation_points() const;
  // Unbatched output shape of every layer.
  std::vector<Shape> output_shapes() const;
  // Throws ValidationError naming the offending layer.
  void validate() const;

  friend bool operator==(const NetworkDef&, const NetworkDef&) = default;
};

// flatten-dense(h1)-relu-dense(h2)-relu-dense(C)-softmax_head.
NetworkDef make_mlp(const Shape& input_shape, std::size_t num_classes, std::uint64_t seed,
                    std::vector<std::size_t> hidden = {128, 64});
// conv(8)-relu-maxpool2-conv(16)-relu-conv(16)-relu-residual_add-avgpool2-flatten-dense-softmax_head.
NetworkDef make_tiny_cnn(const Shape& input_shape, std::size_t num_classes, std::uint64_t seed);
NetworkDef make_reference(const std::string& arch, const Shape& input_shape, std::size_t num_classes,
                          std::uint64_t seed);

// Every quantizable layer at FP32.
QuantConfig fp32_config(const NetworkDef& net);
// Throws ValidationError when the config misses or names unknown layers.
void check_config(const NetworkDef& net, const QuantConfig& config);

// --- Forward --------------------------------------------------------------

struct ForwardTrace {
  std::vector<Tensor> activations;  // one per layer, batched
  Tensor logits;                    // [n, C]
};

// x is [n, c, h, w]. With a config, weights and activation points are fake
// quantized; all-FP32 entries are identity.
ForwardTrace forward(const NetworkDef& net, const Tensor& x, const QuantConfig* quant = nullptr);
Tensor predict_logits(const NetworkDef& net, const Tensor& x, const QuantConfig* quant = nullptr,
                      std::size_t batch = 256);

enum class ParamMode { constant, trainable };

struct LayerTrace {
  ad::Var weight;    // parameter leaf
  ad::Var bias;
  ad::Var weight_q;  // quantized weight used by the forward pass
  ad::Var weight_err;
  ad::Var act_q;     // quantized activation fed downstream
  ad::Var act_err;
};

struct TracedForward {
  std::vector<ad::Var> activations;
  ad::Var logits;
  std::map<std::size_t, LayerTrace> layers;  // keyed by quantizable layer index
};

// Records the forward pass on `tape`. With a config, every weight and
// activation point goes through quantize_traced (FP32 entries give zero error
// leaves), so gradients w.r.t. Q(W) and Q(A) are available.
TracedForward forward_traced(const NetworkDef& net, ad::Tape& tape, const ad::Var& x,
                             const QuantConfig* quant, ParamMode mode = ParamMode::constant);

// --- Training and evaluation ----------------------------------------------

struct TrainConfig {
  enum class Optimizer { sgd, adam };
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;  // adam
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

// Deterministic under cfg.seed. Throws TrainingError on a non-finite loss.
NetworkDef train(const NetworkDef& net, const LabeledDataset& data, const TrainConfig& cfg,
                 const LabeledDataset* validation = nullptr);

struct EvalResult {
  double top1 = 0.0;
  std::optional<double> top5;  // only when num_classes >= 5
  double mean_loss = 0.0;      // cross-entropy vs labels
  std::size_t count = 0;
};

EvalResult evaluate(const NetworkDef& net, const LabeledDataset& data, const QuantConfig* quant = nullptr);
// Top-k hits with ties broken toward the lower class index.
bool in_top_k(std::span<const double> logits, std::size_t label, std::size_t k);

// --- Persistence ----------------------------------------------------------
//
// <stem>.json holds the architecture and blob offsets; <stem>.bin holds every
// parameter tensor as little-endian f64.

void save_network(const NetworkDef& net, const std::filesystem::path& json_path);
NetworkDef load_network(const std::filesystem::path& json_path);

}  // namespace mpq
