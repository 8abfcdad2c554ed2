#include "mpq/quantizer.hpp"

#include <cmath>
#include <string>

#include "mpq/errors.hpp"
#include "mpq/kernels/kernels.hpp"

namespace mpq {

QuantSpec QuantSpec::uniform(int bits, double clip) {
  QuantSpec s{bits, clip};
  s.validate();
  return s;
}

void QuantSpec::validate() const {
  if (is_fp32()) return;
  if (bits < kMinBits || bits > kMaxBits) {
    throw ValidationError("quantization bits must be in [2,16] or 32, got " + std::to_string(bits));
  }
  if (!(clip > 0.0) || !std::isfinite(clip)) {
    throw ValidationError("quantization clip must be positive and finite, got " +
                          std::to_string(clip));
  }
}

double QuantSpec::levels_per_side() const { return std::ldexp(1.0, bits - 1) - 1.0; }

double QuantSpec::step() const { return clip / levels_per_side(); }

Tensor quantize(const Tensor& x, const QuantSpec& spec) {
  spec.validate();
  if (spec.is_fp32()) return x;
  Tensor out(x.shape());
  kernels::quantize(x.data(), out.data(), spec.step(), spec.levels_per_side());
  return out;
}

TracedQuant quantize_traced(const ad::Var& x, const QuantSpec& spec) {
  Tensor q = quantize(x.value(), spec);
  Tensor err(x.shape());
  kernels::sub(q.data(), x.value().data(), err.data());
  const ad::Var err_var = x.tape().variable(std::move(err));
  return {ad::straight_through(x, err_var, std::move(q)), err_var};
}

const LayerQuant& QuantConfig::at(std::size_t layer) const {
  auto it = layers.find(layer);
  if (it == layers.end()) {
    throw ValidationError("quant config has no entry for layer " + std::to_string(layer));
  }
  return it->second;
}

bool QuantConfig::all_fp32() const {
  for (const auto& [idx, lq] : layers) {
    if (!lq.weight.is_fp32() || !lq.activation.is_fp32()) return false;
  }
  return true;
}

}  // namespace mpq
