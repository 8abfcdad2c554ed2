#pragma once

#include <string>

#include "mpq/dataset.hpp"
#include "mpq/network.hpp"
#include "mpq/quantizer.hpp"

namespace mpq {

// Unquantized forward over every sample; per quantizable layer, the largest
// |A| at its activation point. Throws ValidationError on an empty dataset.
CalibrationProfile calibrate(const NetworkDef& net, const LabeledDataset& data);

// Weight clip = max|W| per layer (1.0 for an all-zero tensor), activation
// clip from the profile. Bits of 32 give FP32 entries.
QuantConfig uniform_config(const CalibrationProfile& profile, int weight_bits, int act_bits,
                           const NetworkDef& net);

std::string to_json(const QuantConfig& config);
QuantConfig quant_config_from_json(const std::string& text);
std::string to_json(const CalibrationProfile& profile);
CalibrationProfile calibration_from_json(const std::string& text);

}  // namespace mpq
