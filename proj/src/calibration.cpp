#include "mpq/calibration.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "mpq/errors.hpp"
#include "mpq/kernels/kernels.hpp"

namespace mpq {

using nlohmann::json;

CalibrationProfile calibrate(const NetworkDef& net, const LabeledDataset& data) {
  if (data.empty()) throw ValidationError("calibrate: dataset is empty");
  net.validate();
  const auto points = net.activation_points();
  CalibrationProfile p;
  p.provenance = to_string(data.provenance);
  p.samples = data.size();
  for (const auto& [owner, point] : points) p.activation_max[owner] = 0.0;
  constexpr std::size_t kBatch = 256;
  for (std::size_t b = 0; b < data.size(); b += kBatch) {
    const ForwardTrace t = forward(net, data.batch(b, std::min(data.size(), b + kBatch)));
    for (const auto& [owner, point] : points) {
      double& m = p.activation_max[owner];
      m = std::max(m, kernels::max_abs(t.activations[point].data()));
    }
  }
  for (const auto& [owner, m] : p.activation_max) {
    if (!std::isfinite(m)) {
      throw ValidationError("calibrate: non-finite activation at layer " + std::to_string(owner));
    }
  }
  return p;
}

QuantConfig uniform_config(const CalibrationProfile& profile, int weight_bits, int act_bits,
                           const NetworkDef& net) {
  QuantConfig c;
  for (std::size_t i : net.quantizable_layers()) {
    auto it = profile.activation_max.find(i);
    if (it == profile.activation_max.end()) {
      throw ValidationError("calibration profile has no entry for layer " + std::to_string(i));
    }
    LayerQuant lq;
    if (weight_bits != QuantSpec::kFp32Bits) {
      double clip = kernels::max_abs(net.params.at(i).weight.data());
      if (!(clip > 0)) clip = 1.0;
      lq.weight = QuantSpec::uniform(weight_bits, clip);
    }
    if (act_bits != QuantSpec::kFp32Bits) {
      const double clip = it->second > 0 ? it->second : 1.0;
      lq.activation = QuantSpec::uniform(act_bits, clip);
    }
    c.layers[i] = lq;
  }
  return c;
}

namespace {

json spec_json(const QuantSpec& s) {
  if (s.is_fp32()) return {{"bits", 32}};
  return {{"bits", s.bits}, {"clip", s.clip}};
}

QuantSpec spec_from(const json& j, const std::string& path) {
  if (!j.is_object() || !j.contains("bits") || !j["bits"].is_number_integer()) {
    throw ValidationError(path + ".bits: expected an integer");
  }
  const int bits = j["bits"].get<int>();
  if (bits == QuantSpec::kFp32Bits) return QuantSpec::fp32();
  if (!j.contains("clip") || !j["clip"].is_number()) throw ValidationError(path + ".clip: expected a number");
  try {
    return QuantSpec::uniform(bits, j["clip"].get<double>());
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

json parse(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string to_json(const QuantConfig& config) {
  json layers = json::object();
  for (const auto& [idx, lq] : config.layers) {
    layers[std::to_string(idx)] = {{"weight", spec_json(lq.weight)}, {"activation", spec_json(lq.activation)}};
  }
  return json{{"format_version", 1}, {"layers", layers}}.dump(2) + "\n";
}

QuantConfig quant_config_from_json(const std::string& text) {
  const json j = parse(text, "quant config");
  if (!j.contains("layers") || !j["layers"].is_object()) throw ValidationError("layers: expected an object");
  QuantConfig c;
  for (const auto& [key, v] : j["layers"].items()) {
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(key, &used);
      if (used != key.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw ValidationError("layers." + key + ": layer key must be an integer");
    }
    const std::string path = "layers." + key;
    c.layers[idx] = {spec_from(v.value("weight", json(nullptr)), path + ".weight"),
                     spec_from(v.value("activation", json(nullptr)), path + ".activation")};
  }
  return c;
}

std::string to_json(const CalibrationProfile& profile) {
  json maxima = json::object();
  for (const auto& [idx, m] : profile.activation_max) maxima[std::to_string(idx)] = m;
  return json{{"format_version", 1},
              {"provenance", profile.provenance},
              {"samples", profile.samples},
              {"activation_max", maxima}}
             .dump(2) + "\n";
}

CalibrationProfile calibration_from_json(const std::string& text) {
  const json j = parse(text, "calibration profile");
  CalibrationProfile p;
  if (!j.contains("activation_max") || !j["activation_max"].is_object()) {
    throw ValidationError("activation_max: expected an object");
  }
  p.provenance = j.value("provenance", std::string());
  p.samples = j.value("samples", std::size_t(0));
  for (const auto& [key, v] : j["activation_max"].items()) {
    if (!v.is_number() || v.get<double>() < 0) {
      throw ValidationError("activation_max." + key + ": expected a non-negative number");
    }
    std::size_t idx = 0;
    try {
      idx = std::stoul(key);
    } catch (const std::exception&) {
      throw ValidationError("activation_max." + key + ": layer key must be an integer");
    }
    p.activation_max[idx] = v.get<double>();
  }
  return p;
}

}  // namespace mpq
