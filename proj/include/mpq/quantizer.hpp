#pragma once

// Symmetric uniform fake quantization.
//
// A k-bit spec with clip c maps x to
//   clamp(round(x / step), -(2^(k-1)-1), 2^(k-1)-1) * step,  step = c / (2^(k-1)-1)
// with rounding half away from zero, so zero is always representable and the
// grid has 2^k - 1 levels. bits == 32 is the identity (single precision).

#include <cstddef>
#include <map>

#include "mpq/autodiff.hpp"
#include "mpq/tensor.hpp"

namespace mpq {

struct QuantSpec {
  static constexpr int kFp32Bits = 32;
  static constexpr int kMinBits = 2;
  static constexpr int kMaxBits = 16;

  int bits = kFp32Bits;
  double clip = 0.0;

  static QuantSpec fp32() { return {}; }
  // Throws ValidationError for bits outside {2..16, 32} or clip <= 0.
  static QuantSpec uniform(int bits, double clip);

  bool is_fp32() const noexcept { return bits == kFp32Bits; }
  double levels_per_side() const;
  double step() const;
  void validate() const;

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

Tensor quantize(const Tensor& x, const QuantSpec& spec);

struct TracedQuant {
  ad::Var q;    // value == quantize(x) bitwise
  ad::Var err;  // leaf holding quantize(x) - x; d(loss)/d(err) == d(loss)/d(q)
};

// Straight-through: the gradient reaching q flows to x with factor 1.
TracedQuant quantize_traced(const ad::Var& x, const QuantSpec& spec);

struct LayerQuant {
  QuantSpec weight;
  QuantSpec activation;
  friend bool operator==(const LayerQuant&, const LayerQuant&) = default;
};

// Keyed by the layer index of each parameterized layer.
struct QuantConfig {
  std::map<std::size_t, LayerQuant> layers;

  const LayerQuant& at(std::size_t layer) const;
  bool all_fp32() const;
  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

// Per parameterized layer: max |activation| at its quantization point.
struct CalibrationProfile {
  std::map<std::size_t, double> activation_max;
  std::string provenance;
  std::size_t samples = 0;
};

}  // namespace mpq
