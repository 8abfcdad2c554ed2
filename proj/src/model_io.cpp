#include <bit>

#include "json.hpp"
#include "mpq/errors.hpp"
#include "mpq/io.hpp"
#include "mpq/network.hpp"

namespace mpq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

void append_f64(std::string& blob, const Tensor& t) {
  for (double v : t.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 64; b += 8) blob.push_back(char((bits >> b) & 0xFF));
  }
}

std::vector<std::pair<const char*, const Tensor*>> tensors_of(const LayerParams& p) {
  std::vector<std::pair<const char*, const Tensor*>> out = {{"weight", &p.weight}, {"bias", &p.bias}};
  if (p.mean.rank() > 0) out.push_back({"mean", &p.mean});
  if (p.var.rank() > 0) out.push_back({"var", &p.var});
  return out;
}

class Reader {
 public:
  explicit Reader(fs::path path) : path_(std::move(path)) {}

  template <class T>
  T get(const json& j, const std::string& key, const std::string& ctx) const {
    if (!j.is_object() || !j.contains(key)) fail(ctx + key, "missing");
    try {
      return j.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ctx + key, "has the wrong type");
    }
  }

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw ParseError(path_.string() + ": field '" + field + "' " + what);
  }

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

void save_network(const NetworkDef& net, const fs::path& json_path) {
  net.validate();
  fs::path bin_path = json_path;
  bin_path.replace_extension(".bin");

  std::string blob;
  json layers = json::array();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    json jl = {{"index", i},   {"kind", to_string(l.kind)}, {"units", l.units},
               {"kernel", l.kernel}, {"stride", l.stride},  {"pad", l.pad},
               {"source", l.source}};
    auto it = net.params.find(i);
    if (it != net.params.end()) {
      json params = json::object();
      for (const auto& [name, t] : tensors_of(it->second)) {
        params[name] = {{"shape", t->shape()}, {"offset", blob.size() / 8}, {"length", t->numel()}};
        append_f64(blob, *t);
      }
      jl["params"] = params;
    }
    layers.push_back(jl);
  }

  json j;
  j["format_version"] = kFormatVersion;
  j["name"] = net.name;
  j["input_shape"] = net.input_shape;
  j["num_classes"] = net.num_classes;
  j["layers"] = layers;
  j["blob"] = bin_path.filename().string();
  j["blob_bytes"] = blob.size();
  if (net.training) {
    j["training"] = {{"epochs", net.training->epochs},
                     {"train_accuracy", net.training->train_accuracy},
                     {"val_accuracy", net.training->val_accuracy},
                     {"final_loss", net.training->final_loss}};
  } else {
    j["training"] = nullptr;
  }
  io::write_atomic(bin_path, blob);
  io::write_atomic(json_path, j.dump(2) + "\n");
}

NetworkDef load_network(const fs::path& json_path) {
  const Reader r(json_path);
  json j;
  try {
    j = json::parse(io::read_text(json_path));
  } catch (const json::parse_error& e) {
    throw ParseError(json_path.string() + ": " + e.what());
  }
  const int version = r.get<int>(j, "format_version", "");
  if (version != kFormatVersion) r.fail("format_version", "is " + std::to_string(version) + ", expected 1");

  NetworkDef net;
  net.name = r.get<std::string>(j, "name", "");
  net.input_shape = r.get<Shape>(j, "input_shape", "");
  net.num_classes = r.get<std::size_t>(j, "num_classes", "");

  const fs::path bin_path = json_path.parent_path() / r.get<std::string>(j, "blob", "");
  const std::size_t blob_bytes = r.get<std::size_t>(j, "blob_bytes", "");
  const std::vector<std::uint8_t> blob = io::read_bytes(bin_path);
  if (blob.size() != blob_bytes) {
    throw ParseError(bin_path.string() + ": blob length mismatch, expected " +
                     std::to_string(blob_bytes) + " bytes, got " + std::to_string(blob.size()));
  }

  const json layers = r.get<json>(j, "layers", "");
  if (!layers.is_array()) r.fail("layers", "must be an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string ctx = "layers[" + std::to_string(i) + "].";
    const json& jl = layers[i];
    if (r.get<std::size_t>(jl, "index", ctx) != i) r.fail(ctx + "index", "out of order");
    LayerSpec l;
    try {
      l.kind = parse_layer_kind(r.get<std::string>(jl, "kind", ctx));
    } catch (const ParseError&) {
      r.fail(ctx + "kind", "is not a known layer kind");
    }
    l.units = r.get<std::size_t>(jl, "units", ctx);
    l.kernel = r.get<std::size_t>(jl, "kernel", ctx);
    l.stride = r.get<std::size_t>(jl, "stride", ctx);
    l.pad = r.get<std::size_t>(jl, "pad", ctx);
    l.source = r.get<std::size_t>(jl, "source", ctx);
    net.layers.push_back(l);

    if (!jl.contains("params")) continue;
    LayerParams p;
    for (const char* name : {"weight", "bias", "mean", "var"}) {
      if (!jl["params"].contains(name)) continue;
      const std::string pctx = ctx + "params." + name + ".";
      const json& jt = jl["params"][name];
      const Shape shape = r.get<Shape>(jt, "shape", pctx);
      const std::size_t offset = r.get<std::size_t>(jt, "offset", pctx);
      const std::size_t length = r.get<std::size_t>(jt, "length", pctx);
      if (shape_numel(shape) != length) {
        throw ParseError(json_path.string() + ": layer " + std::to_string(i) + " " + name +
                         " shape " + shape_str(shape) + " disagrees with length " +
                         std::to_string(length));
      }
      if ((offset + length) * 8 > blob.size()) {
        throw ParseError(bin_path.string() + ": layer " + std::to_string(i) + " " + name +
                         " needs bytes up to " + std::to_string((offset + length) * 8) +
                         ", blob has " + std::to_string(blob.size()));
      }
      std::vector<double> data(length);
      for (std::size_t k = 0; k < length; ++k) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b) bits = (bits << 8) | blob[(offset + k) * 8 + std::size_t(b)];
        data[k] = std::bit_cast<double>(bits);
      }
      Tensor t(shape, std::move(data));
      if (std::string(name) == "weight") p.weight = std::move(t);
      else if (std::string(name) == "bias") p.bias = std::move(t);
      else if (std::string(name) == "mean") p.mean = std::move(t);
      else p.var = std::move(t);
    }
    net.params[i] = std::move(p);
  }

  if (j.contains("training") && !j["training"].is_null()) {
    const json& t = j["training"];
    TrainingRecord rec;
    rec.epochs = r.get<std::size_t>(t, "epochs", "training.");
    rec.train_accuracy = r.get<double>(t, "train_accuracy", "training.");
    rec.val_accuracy = r.get<double>(t, "val_accuracy", "training.");
    rec.final_loss = r.get<double>(t, "final_loss", "training.");
    net.training = rec;
  }
  try {
    net.validate();
  } catch (const ValidationError& e) {
    throw ParseError(json_path.string() + ": " + e.what());
  }
  return net;
}

}  // namespace mpq
