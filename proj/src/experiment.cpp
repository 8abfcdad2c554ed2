#include "mpq/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <type_traits>

#include "json.hpp"
#include "mpq/calibration.hpp"
#include "mpq/errors.hpp"
#include "mpq/io.hpp"

namespace mpq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Stream : std::uint64_t { kBlobs = 1, kInit, kShuffle, kGenerator, kNoise, kHessian, kRandomOrder };

// Reads the known keys of one JSON object and rejects the rest.
class Obj {
 public:
  Obj(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) throw ConfigError(ctx_.empty() ? "<root>" : ctx_, "expected an object");
  }

  std::string path(const std::string& key) const { return ctx_.empty() ? key : ctx_ + "." + key; }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  template <class T>
  void get(const std::string& key, T& dst) {
    const json* v = child(key);
    if (!v) return;
    dst = as<T>(*v, path(key));
  }

  void done() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(path(item.key()), "unknown field");
    }
  }

  template <class T>
  static T as(const json& v, const std::string& where) {
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
    else if constexpr (std::is_unsigned_v<T>) ok = v.is_number_unsigned();
    else if constexpr (std::is_integral_v<T>) ok = v.is_number_integer();
    else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
    else ok = true;
    if (!ok) throw ConfigError(where, "has the wrong type");
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where, "has the wrong type");
    }
  }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

void require(const fs::path& p, const std::string& artifact) {
  if (!fs::exists(p)) throw MissingInputError(artifact, p.string());
}

NetworkDef load_model(const fs::path& p) {
  require(p, "model");
  return load_network(p);
}

LoadedDataset load_data(const fs::path& p, const std::string& artifact = "dataset") {
  require(p, artifact);
  return load_dataset(p);
}

json eval_json(const EvalResult& r) {
  json j = {{"top1", r.top1}, {"loss", r.mean_loss}, {"count", r.count}};
  j["top5"] = r.top5 ? json(*r.top5) : json(nullptr);
  return j;
}

fs::path save_split(const LabeledDataset& ds, const fs::path& out, const std::string& name,
                    std::optional<std::uint64_t> seed, const std::string& extra = "{}") {
  DatasetManifest m;
  m.seed = seed;
  m.encoding = natural_encoding(ds);
  m.extra_json = extra;
  return save_dataset(ds, out / "data", name, m);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p, const std::string& header) {
  require(p, p.filename().string());
  std::istringstream in(io::read_text(p));
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw ParseError(p.string() + ": expected header '" + header + "'");
  }
  std::vector<std::vector<std::string>> rows;
  std::size_t n = 1;
  const std::size_t cols = split_csv_line(header).size();
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != cols) {
      throw ParseError(p.string() + ": line " + std::to_string(n) + " has " + std::to_string(row.size()) +
                       " fields, expected " + std::to_string(cols));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

double to_double(const std::string& s, const fs::path& p) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(p.string() + ": '" + s + "' is not a number");
}

std::size_t to_size(const std::string& s, const fs::path& p) {
  const double v = to_double(s, p);
  if (v < 0 || v != std::floor(v)) throw ParseError(p.string() + ": '" + s + "' is not a count");
  return static_cast<std::size_t>(v);
}

std::string curve_name(const std::string& metric, Protocol protocol, const std::string& role) {
  std::string s = "curve_" + metric + "_" + to_string(protocol);
  if (!role.empty() && role != "generated") s += "_" + role;
  return s + ".csv";
}

}  // namespace

// --- Config ---------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 finalizer over the combined state
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string dataset_role(Provenance p) {
  if (p == Provenance::real || p == Provenance::synthetic_blobs) return "real";
  return to_string(p);
}

ExperimentConfig default_experiment(const std::string& arch) {
  ExperimentConfig cfg;
  cfg.arch = arch;
  if (arch == "mlp") {
    cfg.train.epochs = 10;
    cfg.train.learning_rate = 1e-3;
  } else if (arch == "tiny_cnn") {
    cfg.train.epochs = 4;
    cfg.train.learning_rate = 3e-3;
  } else {
    throw ConfigError("arch", "unknown reference architecture '" + arch + "'");
  }
  return cfg;
}

void ExperimentConfig::validate() const {
  if (model.empty() && arch != "mlp" && arch != "tiny_cnn") {
    throw ConfigError("arch", "unknown reference architecture '" + arch + "'");
  }
  if (num_classes < 2) throw ConfigError("num_classes", "must be >= 2");
  if (input_shape.size() != 3 || std::count(input_shape.begin(), input_shape.end(), 0u) > 0) {
    throw ConfigError("input_shape", "must be three positive extents [c,h,w]");
  }
  if (train_per_class < 1) throw ConfigError("data.train_per_class", "must be >= 1");
  if (test_per_class < 1) throw ConfigError("data.test_per_class", "must be >= 1");
  if (calibration_per_class < 1 || calibration_per_class > train_per_class) {
    throw ConfigError("data.calibration_per_class", "must be in [1, train_per_class]");
  }
  if (blobs.latent_dim < num_classes) throw ConfigError("data.blobs.latent_dim", "must be >= num_classes");
  if (!(blobs.separation > 0)) throw ConfigError("data.blobs.separation", "must be positive");
  if (!(blobs.sigma > 0)) throw ConfigError("data.blobs.sigma", "must be positive");
  if (!(blobs.contrast > 0)) throw ConfigError("data.blobs.contrast", "must be positive");
  if (!(blobs.background >= 0 && blobs.background <= 1)) {
    throw ConfigError("data.blobs.background", "must be in [0, 1]");
  }
  if (!(train.learning_rate > 0) || !std::isfinite(train.learning_rate)) {
    throw ConfigError("train.learning_rate", "must be positive");
  }
  if (!(train.momentum >= 0 && train.momentum < 1)) throw ConfigError("train.momentum", "must be in [0, 1)");
  if (train.batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (!(generator.learning_rate > 0) || !std::isfinite(generator.learning_rate)) {
    throw ConfigError("generator.learning_rate", "must be positive");
  }
  if (!(generator.lambda >= 0) || !std::isfinite(generator.lambda)) {
    throw ConfigError("generator.lambda", "must be >= 0");
  }
  if (generator.iterations < 1) throw ConfigError("generator.iterations", "must be >= 1");
  if (generator.samples_per_class < 1) throw ConfigError("generator.samples_per_class", "must be >= 1");
  const bool ptq_ok = ptq_bits == QuantSpec::kFp32Bits ||
                      (ptq_bits >= QuantSpec::kMinBits && ptq_bits <= QuantSpec::kMaxBits);
  if (!ptq_ok) throw ConfigError("quantization.ptq_bits", "must be in [2, 16] or 32");
  if (switch_bits < QuantSpec::kMinBits || switch_bits > QuantSpec::kMaxBits) {
    throw ConfigError("quantization.switch_bits", "must be in [2, 16]");
  }
  if (metrics.empty()) throw ConfigError("sensitivity.metrics", "must name at least one metric");
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    if (std::count(metrics.begin(), metrics.end(), metrics[i]) > 1) {
      throw ConfigError("sensitivity.metrics[" + std::to_string(i) + "]", "duplicate metric");
    }
  }
  if (protocols.empty()) throw ConfigError("sensitivity.protocols", "must name at least one protocol");
  for (std::size_t i = 0; i < protocols.size(); ++i) {
    if (std::count(protocols.begin(), protocols.end(), protocols[i]) > 1) {
      throw ConfigError("sensitivity.protocols[" + std::to_string(i) + "]", "duplicate protocol");
    }
  }
  if (hessian_probes < 1) throw ConfigError("sensitivity.hessian_probes", "must be >= 1");
  if (random_orderings < 1) throw ConfigError("sensitivity.random_orderings", "must be >= 1");
}

ExperimentConfig experiment_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  Obj root(j, "");
  int version = 0;
  if (!root.child("format_version")) throw ConfigError("format_version", "missing");
  root.get("format_version", version);
  if (version != ExperimentConfig::kFormatVersion) {
    throw ConfigError("format_version", "is " + std::to_string(version) + ", expected 1");
  }
  std::string arch = "tiny_cnn";
  root.get("arch", arch);
  ExperimentConfig cfg = default_experiment(arch);
  root.get("model", cfg.model);
  root.get("num_classes", cfg.num_classes);
  root.get("input_shape", cfg.input_shape);
  root.get("seed", cfg.seed);

  if (const json* d = root.child("data")) {
    Obj o(*d, "data");
    o.get("train_per_class", cfg.train_per_class);
    o.get("val_per_class", cfg.val_per_class);
    o.get("test_per_class", cfg.test_per_class);
    o.get("calibration_per_class", cfg.calibration_per_class);
    o.get("noise_samples", cfg.noise_samples);
    if (const json* b = o.child("blobs")) {
      Obj ob(*b, "data.blobs");
      ob.get("latent_dim", cfg.blobs.latent_dim);
      ob.get("separation", cfg.blobs.separation);
      ob.get("sigma", cfg.blobs.sigma);
      ob.get("background", cfg.blobs.background);
      ob.get("contrast", cfg.blobs.contrast);
      ob.done();
    }
    o.done();
  }
  if (const json* t = root.child("train")) {
    Obj o(*t, "train");
    std::string opt = cfg.train.optimizer == TrainConfig::Optimizer::adam ? "adam" : "sgd";
    o.get("optimizer", opt);
    if (opt == "adam") cfg.train.optimizer = TrainConfig::Optimizer::adam;
    else if (opt == "sgd") cfg.train.optimizer = TrainConfig::Optimizer::sgd;
    else throw ConfigError("train.optimizer", "must be adam or sgd");
    o.get("learning_rate", cfg.train.learning_rate);
    o.get("momentum", cfg.train.momentum);
    o.get("epochs", cfg.train.epochs);
    o.get("batch_size", cfg.train.batch_size);
    o.done();
  }
  if (const json* g = root.child("generator")) {
    Obj o(*g, "generator");
    o.get("learning_rate", cfg.generator.learning_rate);
    o.get("lambda", cfg.generator.lambda);
    o.get("maximize_logit", cfg.generator.maximize_logit);
    o.get("iterations", cfg.generator.iterations);
    o.get("samples_per_class", cfg.generator.samples_per_class);
    std::string pre = to_string(cfg.generator.preprocessing);
    o.get("preprocessing", pre);
    try {
      cfg.generator.preprocessing = parse_preprocessing(pre);
    } catch (const ParseError& e) {
      throw ConfigError("generator.preprocessing", e.what());
    }
    o.done();
  }
  if (const json* q = root.child("quantization")) {
    Obj o(*q, "quantization");
    o.get("ptq_bits", cfg.ptq_bits);
    o.get("switch_bits", cfg.switch_bits);
    o.done();
  }
  if (const json* s = root.child("sensitivity")) {
    Obj o(*s, "sensitivity");
    if (const json* m = o.child("metrics")) {
      if (!m->is_array()) throw ConfigError("sensitivity.metrics", "expected an array");
      cfg.metrics.clear();
      for (std::size_t i = 0; i < m->size(); ++i) {
        const std::string where = "sensitivity.metrics[" + std::to_string(i) + "]";
        try {
          cfg.metrics.push_back(parse_metric(Obj::as<std::string>((*m)[i], where)));
        } catch (const ValidationError&) {
          throw ConfigError(where, "must be one of proposed, l2, kld, hessian");
        }
      }
    }
    if (const json* p = o.child("protocols")) {
      if (!p->is_array()) throw ConfigError("sensitivity.protocols", "expected an array");
      cfg.protocols.clear();
      for (std::size_t i = 0; i < p->size(); ++i) {
        const std::string where = "sensitivity.protocols[" + std::to_string(i) + "]";
        try {
          cfg.protocols.push_back(parse_protocol(Obj::as<std::string>((*p)[i], where)));
        } catch (const ValidationError&) {
          throw ConfigError(where, "must be weights or activations");
        }
      }
    }
    o.get("hessian_probes", cfg.hessian_probes);
    o.get("random_orderings", cfg.random_orderings);
    std::string norm = to_string(cfg.norm);
    o.get("norm", norm);
    try {
      cfg.norm = parse_norm(norm);
    } catch (const ValidationError&) {
      throw ConfigError("sensitivity.norm", "must be l2, l2_mean or l1");
    }
    o.done();
  }
  root.done();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment(const fs::path& path) {
  require(path, "config");
  return experiment_from_json(io::read_text(path));
}

std::string to_json(const ExperimentConfig& cfg) {
  json metrics = json::array();
  for (MetricKind m : cfg.metrics) metrics.push_back(to_string(m));
  json protocols = json::array();
  for (Protocol p : cfg.protocols) protocols.push_back(to_string(p));
  json j = {
      {"format_version", ExperimentConfig::kFormatVersion},
      {"arch", cfg.arch},
      {"model", cfg.model},
      {"num_classes", cfg.num_classes},
      {"input_shape", cfg.input_shape},
      {"seed", cfg.seed},
      {"data",
       {{"train_per_class", cfg.train_per_class},
        {"val_per_class", cfg.val_per_class},
        {"test_per_class", cfg.test_per_class},
        {"calibration_per_class", cfg.calibration_per_class},
        {"noise_samples", cfg.noise_samples},
        {"blobs",
         {{"latent_dim", cfg.blobs.latent_dim},
          {"separation", cfg.blobs.separation},
          {"sigma", cfg.blobs.sigma},
          {"background", cfg.blobs.background},
          {"contrast", cfg.blobs.contrast}}}}},
      {"train",
       {{"optimizer", cfg.train.optimizer == TrainConfig::Optimizer::adam ? "adam" : "sgd"},
        {"learning_rate", cfg.train.learning_rate},
        {"momentum", cfg.train.momentum},
        {"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size}}},
      {"generator",
       {{"learning_rate", cfg.generator.learning_rate},
        {"lambda", cfg.generator.lambda},
        {"maximize_logit", cfg.generator.maximize_logit},
        {"iterations", cfg.generator.iterations},
        {"samples_per_class", cfg.generator.samples_per_class},
        {"preprocessing", to_string(cfg.generator.preprocessing)}}},
      {"quantization", {{"ptq_bits", cfg.ptq_bits}, {"switch_bits", cfg.switch_bits}}},
      {"sensitivity",
       {{"metrics", metrics},
        {"protocols", protocols},
        {"hessian_probes", cfg.hessian_probes},
        {"random_orderings", cfg.random_orderings},
        {"norm", to_string(cfg.norm)}}}};
  return j.dump(2) + "\n";
}

// --- Steps ----------------------------------------------------------------

DataPaths make_task_data(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const std::size_t per = cfg.train_per_class + cfg.val_per_class + cfg.test_per_class;
  const std::uint64_t seed = derive_seed(cfg.seed, kBlobs);
  const LabeledDataset all = make_blobs(seed, per, cfg.num_classes, cfg.input_shape, cfg.blobs);

  std::vector<std::size_t> tr, va, te;
  std::vector<std::size_t> seen(cfg.num_classes, 0);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const std::size_t k = seen[all.labels[i]]++;
    if (k < cfg.train_per_class) tr.push_back(i);
    else if (k < cfg.train_per_class + cfg.val_per_class) va.push_back(i);
    else te.push_back(i);
  }
  const LabeledDataset train = all.subset(tr);
  DataPaths p;
  p.train = save_split(train, out, "train", seed);
  p.val = save_split(all.subset(va), out, "val", seed);
  p.test = save_split(all.subset(te), out, "test", seed);
  p.calibration = save_split(train.per_class_subset(cfg.calibration_per_class), out, "calibration", seed);
  return p;
}

fs::path run_train(const ExperimentConfig& cfg, const fs::path& train_data, const fs::path& val_data,
                   const fs::path& test_data, const fs::path& out) {
  cfg.validate();
  const LabeledDataset tr = load_data(train_data, "train dataset").data;
  const LabeledDataset va = load_data(val_data, "validation dataset").data;
  const LabeledDataset te = load_data(test_data, "test dataset").data;
  if (tr.sample_shape() != cfg.input_shape || tr.num_classes != cfg.num_classes) {
    throw ConfigError("input_shape", "train dataset is " + shape_str(tr.sample_shape()) + " with " +
                                         std::to_string(tr.num_classes) + " classes");
  }
  NetworkDef net = make_reference(cfg.arch, cfg.input_shape, cfg.num_classes, derive_seed(cfg.seed, kInit));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, kShuffle);
  net = train(net, tr, tc, va.empty() ? nullptr : &va);

  const fs::path model = out / "model.json";
  save_network(net, model);
  const EvalResult test = evaluate(net, te);
  json j = {{"format_version", 1},
            {"arch", cfg.arch},
            {"epochs", net.training->epochs},
            {"train_accuracy", net.training->train_accuracy},
            {"val_accuracy", net.training->val_accuracy},
            {"final_loss", net.training->final_loss},
            {"test", eval_json(test)}};
  io::write_atomic(out / "train.json", j.dump(2) + "\n");
  return model;
}

fs::path run_generate(const ExperimentConfig& cfg, const fs::path& model, const fs::path& out) {
  cfg.validate();
  const NetworkDef net = load_model(model);
  GenConfig g = cfg.generator;
  g.seed = derive_seed(cfg.seed, kGenerator);
  const GeneratedBatch batch = generate(net, golden_set(net.num_classes), g);

  json extra = json::parse(g.to_json());
  extra["mean_ce_initial"] = batch.mean_ce.front();
  extra["mean_ce_final"] = batch.mean_ce.back();
  const fs::path path = save_split(batch.data, out, "generated", g.seed, extra.dump());
  io::write_atomic(out / "confidence_report.csv", confidence_csv(confidence_report(batch.data, net)));
  return path;
}

fs::path run_noise(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const std::size_t n = cfg.noise_samples ? cfg.noise_samples : cfg.num_classes * cfg.generator.samples_per_class;
  const std::uint64_t seed = derive_seed(cfg.seed, kNoise);
  const LabeledDataset ds = make_noise(seed, n, cfg.input_shape, cfg.generator.preprocessing, cfg.num_classes);
  const json extra = {{"init", "uniform-int[0,255]"},
                      {"preprocessing", to_string(cfg.generator.preprocessing)}};
  return save_split(ds, out, "noise", seed, extra.dump());
}

fs::path run_calibrate(const fs::path& model, const fs::path& dataset, const fs::path& out,
                       const std::string& role) {
  const NetworkDef net = load_model(model);
  const LoadedDataset ds = load_data(dataset);
  const CalibrationProfile profile = calibrate(net, ds.data);
  const fs::path path = out / ("calibration_" + (role.empty() ? dataset_role(ds.data.provenance) : role) + ".json");
  io::write_atomic(path, to_json(profile));
  return path;
}

CalibrationProfile read_calibration(const fs::path& path) {
  require(path, "calibration");
  try {
    return calibration_from_json(io::read_text(path));
  } catch (const ValidationError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

namespace {

std::string calibration_role(const fs::path& p) {
  std::string stem = p.stem().string();
  const std::string prefix = "calibration_";
  if (stem.rfind(prefix, 0) == 0) stem = stem.substr(prefix.size());
  return stem;
}

}  // namespace

fs::path run_quantize_eval(const fs::path& model, const fs::path& eval, const std::vector<fs::path>& calibrations,
                           int bits, const fs::path& out) {
  const NetworkDef net = load_model(model);
  const LabeledDataset data = load_data(eval, "eval dataset").data;
  const QuantConfig fp32 = fp32_config(net);
  json results = json::array();
  for (const fs::path& c : calibrations) {
    const CalibrationProfile profile = read_calibration(c);
    const QuantConfig q = uniform_config(profile, bits, bits, net);
    json r = eval_json(evaluate(net, data, &q));
    r["calibration"] = calibration_role(c);
    r["calibration_samples"] = profile.samples;
    r["config"] = json::parse(to_json(q));
    results.push_back(r);
  }
  json j = {{"format_version", 1},
            {"bits", bits},
            {"eval_dataset", eval.stem().string()},
            {"fp32", eval_json(evaluate(net, data, &fp32))},
            {"ptq", results}};
  const fs::path path = out / "quantize_eval.json";
  io::write_atomic(path, j.dump(2) + "\n");
  return path;
}

fs::path run_sensitivity(const ExperimentConfig& cfg, const fs::path& model, const fs::path& dataset,
                         const fs::path& calibration, const fs::path& out, const std::string& role) {
  cfg.validate();
  const NetworkDef net = load_model(model);
  const LoadedDataset ds = load_data(dataset);
  const CalibrationProfile clips = read_calibration(calibration);
  SensitivityOptions opt;
  opt.clips = &clips;
  opt.probes = cfg.hessian_probes;
  opt.seed = derive_seed(cfg.seed, kHessian);
  opt.norm = cfg.norm;

  std::vector<SensitivityRow> rows;
  for (MetricKind m : cfg.metrics) {
    for (Target t : {Target::weight, Target::activation}) {
      for (const RankedLayer& r : rank_layers(net, ds.data, m, t, cfg.switch_bits, opt)) {
        rows.push_back({m, t, r.layer, cfg.switch_bits, r.score, r.rank});
      }
    }
  }
  const std::string name = role.empty() ? dataset_role(ds.data.provenance) : role;
  const std::string csv = sensitivity_csv(rows);
  const fs::path path = out / ("sensitivity_" + name + ".csv");
  io::write_atomic(path, csv);
  io::write_atomic(out / ("sensitivity_" + name + ".json"), sensitivity_json(rows, name));
  if (name == "generated") io::write_atomic(out / "sensitivity.csv", csv);
  return path;
}

std::vector<SensitivityRow> read_sensitivity_csv(const fs::path& path) {
  std::vector<SensitivityRow> rows;
  for (const auto& f : read_csv(path, "metric,target,layer,bits,score,rank")) {
    try {
      rows.push_back({parse_metric(f[0]), parse_target(f[1]), to_size(f[2], path),
                      static_cast<int>(to_size(f[3], path)), to_double(f[4], path), to_size(f[5], path)});
    } catch (const Error& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }
  return rows;
}

SwitchingCurve read_curve_csv(const fs::path& path) {
  SwitchingCurve c;
  const auto rows = read_csv(path, "switched,layer,task_loss");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (to_size(rows[i][0], path) != i) throw ParseError(path.string() + ": switch counts out of order");
    if (i > 0 && !rows[i][1].empty()) c.order.push_back(to_size(rows[i][1], path));
    c.loss.push_back(to_double(rows[i][2], path));
  }
  if (c.loss.empty()) throw ParseError(path.string() + ": no points");
  return c;
}

fs::path run_switching_step(const ExperimentConfig& cfg, const fs::path& model, const fs::path& eval,
                            const fs::path& calibration, const fs::path& ranking, const std::string& metric,
                            Protocol protocol, const fs::path& out, const std::string& role) {
  cfg.validate();
  const NetworkDef net = load_model(model);
  const LabeledDataset data = load_data(eval, "eval dataset").data;
  const CalibrationProfile clips = read_calibration(calibration);
  const int bits = cfg.switch_bits;

  SwitchingCurve curve;
  if (metric == "oracle") {
    curve = greedy_oracle(net, data, protocol, bits, clips);
  } else if (metric == "random") {
    const std::uint64_t base = derive_seed(cfg.seed, kRandomOrder);
    for (std::size_t s = 0; s < cfg.random_orderings; ++s) {
      const SwitchingCurve c = run_switching(net, data, random_ordering(net, base + s), protocol, bits, clips);
      if (curve.loss.empty()) curve.loss.assign(c.loss.size(), 0.0);
      for (std::size_t i = 0; i < c.loss.size(); ++i) curve.loss[i] += c.loss[i];
    }
    for (double& v : curve.loss) v /= double(cfg.random_orderings);
    curve.protocol = protocol;
    curve.bits = bits;
    curve.metric = "random";
  } else {
    MetricKind m;
    try {
      m = parse_metric(metric);
    } catch (const ValidationError&) {
      throw ConfigError("metric", "must be proposed, l2, kld, hessian, oracle or random");
    }
    std::vector<SensitivityRow> rows;
    for (const SensitivityRow& r : read_sensitivity_csv(ranking)) {
      if (r.metric == m && r.target == protocol_target(protocol)) rows.push_back(r);
    }
    if (rows.empty()) {
      throw MissingInputError(std::string(to_string(m)) + "/" + to_string(protocol_target(protocol)) +
                                  " scores in ranking",
                              ranking.string());
    }
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.rank < b.rank; });
    std::vector<std::size_t> order;
    for (const auto& r : rows) order.push_back(r.layer);
    curve = run_switching(net, data, order, protocol, bits, clips, metric);
  }
  curve.provenance = role.empty() ? "generated" : role;
  const fs::path path = out / curve_name(metric, protocol, role);
  io::write_atomic(path, curve_csv(curve));
  return path;
}

// --- Report ---------------------------------------------------------------

ReportSummary run_report(const fs::path& out) {
  require(out, "output directory");
  ReportSummary s;
  json summary = {{"format_version", 1}};
  bool any = false;
  int switch_bits = 4;
  if (fs::exists(out / "config.json")) switch_bits = load_experiment(out / "config.json").switch_bits;
  summary["switch_bits"] = switch_bits;

  // PTQ table
  const fs::path qe = out / "quantize_eval.json";
  if (fs::exists(qe)) {
    any = true;
    json j;
    try {
      j = json::parse(io::read_text(qe));
      s.fp32_top1 = j.at("fp32").at("top1").get<double>();
      for (const json& r : j.at("ptq")) s.ptq_top1[r.at("calibration").get<std::string>()] = r.at("top1").get<double>();
      summary["eval_dataset"] = j.at("eval_dataset");
      summary["eval_samples"] = j.at("fp32").at("count");
    } catch (const json::exception& e) {
      throw ParseError(qe.string() + ": " + e.what());
    }
    std::string csv = "calibration,bits,top1,top5,loss,top1_delta_vs_real\n";
    csv += "fp32,32," + io::format_double(s.fp32_top1) + "," +
           (j["fp32"]["top5"].is_null() ? "" : io::format_double(j["fp32"]["top5"].get<double>())) + "," +
           io::format_double(j["fp32"]["loss"].get<double>()) + ",\n";
    for (const json& r : j["ptq"]) {
      const std::string role = r["calibration"].get<std::string>();
      csv += role + "," + std::to_string(j["bits"].get<int>()) + "," + io::format_double(r["top1"].get<double>()) +
             "," + (r["top5"].is_null() ? "" : io::format_double(r["top5"].get<double>())) + "," +
             io::format_double(r["loss"].get<double>()) + ",";
      if (s.ptq_top1.count("real")) csv += io::format_double(r["top1"].get<double>() - s.ptq_top1["real"]);
      csv += "\n";
    }
    io::write_atomic(out / "ptq_table.csv", csv);
    summary["fp32_top1"] = s.fp32_top1;
    summary["ptq_top1"] = s.ptq_top1;
  }

  // Curves, sorted by file name so the output never depends on directory order.
  std::vector<fs::path> curve_files;
  for (const auto& e : fs::directory_iterator(out)) {
    const std::string n = e.path().filename().string();
    if (n.rfind("curve_", 0) == 0 && e.path().extension() == ".csv") curve_files.push_back(e.path());
  }
  std::sort(curve_files.begin(), curve_files.end());
  // protocol -> role -> metric -> curve
  std::map<std::string, std::map<std::string, std::map<std::string, SwitchingCurve>>> curves;
  std::string long_csv = "protocol,metric,dataset,switched,task_loss\n";
  for (const fs::path& p : curve_files) {
    const std::string stem = p.stem().string().substr(6);
    std::vector<std::string> parts;
    std::istringstream in(stem);
    for (std::string t; std::getline(in, t, '_');) parts.push_back(t);
    if (parts.size() < 2 || parts.size() > 3) continue;
    try {
      parse_protocol(parts[1]);
    } catch (const ValidationError&) {
      continue;
    }
    SwitchingCurve c = read_curve_csv(p);
    c.metric = parts[0];
    c.protocol = parse_protocol(parts[1]);
    c.provenance = parts.size() == 3 ? parts[2] : "generated";
    c.bits = switch_bits;
    for (std::size_t i = 0; i < c.loss.size(); ++i) {
      long_csv += parts[1] + "," + c.metric + "," + c.provenance + "," + std::to_string(i) + "," +
                  io::format_double(c.loss[i]) + "\n";
    }
    curves[parts[1]][c.provenance][c.metric] = std::move(c);
  }
  if (!curves.empty()) {
    any = true;
    io::write_atomic(out / "curves_long.csv", long_csv);
    std::string csv = "protocol,tag,metric,auc,relative_auc\n";
    for (const auto& [proto, by_role] : curves) {
      auto it = by_role.find("generated");
      if (it == by_role.end()) continue;
      std::map<std::string, double> rel;
      if (it->second.count("proposed")) rel = relative_auc(it->second, "proposed");
      for (const auto& [metric, c] : it->second) {
        s.auc[proto][metric] = auc(c);
        if (rel.count(metric)) s.relative_auc[proto][metric] = rel[metric];
        csv += proto + "," + protocol_tag(c.protocol, c.bits) + "," + metric + "," +
               io::format_double(auc(c)) + "," + (rel.count(metric) ? io::format_double(rel[metric]) : "") + "\n";
      }
    }
    io::write_atomic(out / "auc_table.csv", csv);
    summary["auc"] = s.auc;
    summary["relative_auc"] = s.relative_auc;
  }

  // Dataset comparison: proposed-metric rankings measured on each dataset.
  std::map<std::string, std::vector<SensitivityRow>> sens;
  for (const std::string role : {"real", "generated", "noise"}) {
    const fs::path p = out / ("sensitivity_" + role + ".csv");
    if (fs::exists(p)) sens[role] = read_sensitivity_csv(p);
  }
  auto proposed_scores = [&](const std::string& role, Target t) {
    std::map<std::size_t, double> by_layer;
    for (const auto& r : sens[role]) {
      if (r.metric == MetricKind::proposed && r.target == t) by_layer[r.layer] = r.score;
    }
    std::vector<double> v;
    for (const auto& [l, x] : by_layer) v.push_back(x);
    return v;
  };
  if (sens.count("real")) {
    any = true;
    for (const auto& [role, rows] : sens) {
      if (role == "real") continue;
      double total = 0.0;
      int n = 0;
      for (Target t : {Target::weight, Target::activation}) {
        const auto a = proposed_scores(role, t);
        const auto b = proposed_scores("real", t);
        if (a.empty() || a.size() != b.size()) continue;
        const double rho = spearman(a, b);
        s.spearman_vs_real[to_string(t)][role] = rho;
        total += rho;
        ++n;
      }
      if (n) s.mean_spearman_vs_real[role] = total / n;
    }
  }
  std::string dcsv = "protocol,dataset,auc,relative_auc,spearman_vs_real\n";
  bool dataset_rows = false;
  for (const auto& [proto, by_role] : curves) {
    const Target t = protocol_target(parse_protocol(proto));
    std::map<std::string, SwitchingCurve> per_role;
    for (const auto& [role, by_metric] : by_role) {
      auto it = by_metric.find("proposed");
      if (it != by_metric.end()) per_role[role] = it->second;
    }
    if (!per_role.count("generated")) continue;
    const auto rel = relative_auc(per_role, "generated");
    for (const auto& [role, c] : per_role) {
      dataset_rows = true;
      s.dataset_relative_auc[proto][role] = rel.at(role);
      std::string rho;
      if (role == "real") rho = "1";
      else if (s.spearman_vs_real[to_string(t)].count(role)) rho = io::format_double(s.spearman_vs_real[to_string(t)][role]);
      dcsv += proto + "," + role + "," + io::format_double(auc(c)) + "," + io::format_double(rel.at(role)) + "," +
              rho + "\n";
    }
  }
  if (dataset_rows || !s.spearman_vs_real.empty()) {
    io::write_atomic(out / "dataset_table.csv", dcsv);
    summary["dataset_relative_auc"] = s.dataset_relative_auc;
    summary["spearman_vs_real"] = s.spearman_vs_real;
    summary["mean_spearman_vs_real"] = s.mean_spearman_vs_real;
  }

  // Calibration ranges.
  const fs::path cr = out / "calibration_real.json", cg = out / "calibration_generated.json";
  if (fs::exists(cr) && fs::exists(cg)) {
    any = true;
    const CalibrationProfile real = read_calibration(cr), gen = read_calibration(cg);
    json ratios = json::object();
    for (const auto& [layer, m] : real.activation_max) {
      auto it = gen.activation_max.find(layer);
      if (it == gen.activation_max.end() || m <= 0) continue;
      s.clip_ratio[layer] = it->second / m;
      ratios[std::to_string(layer)] = s.clip_ratio[layer];
    }
    summary["clip_ratio_generated_vs_real"] = ratios;
  }

  const fs::path conf = out / "confidence_report.csv";
  if (fs::exists(conf)) {
    any = true;
    const auto rows = read_csv(conf, "sample,class,top1_class,top1_conf,top2_class,top2_conf,match");
    std::size_t hits = 0;
    for (const auto& r : rows) hits += r[6] == "true";
    s.confidence_match = rows.empty() ? 0.0 : double(hits) / double(rows.size());
    summary["confidence_match"] = s.confidence_match;
  }

  if (!any) throw MissingInputError("pipeline artifacts", out.string());
  io::write_atomic(out / "summary.json", summary.dump(2) + "\n");
  return s;
}

ReportSummary run_pipeline(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  io::write_atomic(out / "config.json", to_json(cfg));
  const DataPaths data = make_task_data(cfg, out);

  fs::path model;
  if (cfg.model.empty()) {
    model = run_train(cfg, data.train, data.val, data.test, out);
  } else {
    const NetworkDef net = load_model(cfg.model);
    if (net.input_shape != cfg.input_shape || net.num_classes != cfg.num_classes) {
      throw ConfigError("model", "network is " + shape_str(net.input_shape) + " with " +
                                     std::to_string(net.num_classes) + " classes, config disagrees");
    }
    model = cfg.model;
  }

  const fs::path generated = run_generate(cfg, model, out);
  const fs::path noise = run_noise(cfg, out);
  const fs::path cal_real = run_calibrate(model, data.calibration, out, "real");
  const fs::path cal_gen = run_calibrate(model, generated, out, "generated");
  const fs::path cal_noise = run_calibrate(model, noise, out, "noise");
  run_quantize_eval(model, data.test, {cal_real, cal_gen, cal_noise}, cfg.ptq_bits, out);

  // Clips always come from the real calibration set; only the measurement
  // data changes.
  const fs::path sens_gen = run_sensitivity(cfg, model, generated, cal_real, out, "generated");
  const fs::path sens_real = run_sensitivity(cfg, model, data.calibration, cal_real, out, "real");
  const fs::path sens_noise = run_sensitivity(cfg, model, noise, cal_real, out, "noise");

  const bool has_proposed =
      std::find(cfg.metrics.begin(), cfg.metrics.end(), MetricKind::proposed) != cfg.metrics.end();
  for (Protocol p : cfg.protocols) {
    for (MetricKind m : cfg.metrics) run_switching_step(cfg, model, data.test, cal_real, sens_gen, to_string(m), p, out);
    run_switching_step(cfg, model, data.test, cal_real, {}, "oracle", p, out);
    run_switching_step(cfg, model, data.test, cal_real, {}, "random", p, out);
    if (has_proposed) {
      run_switching_step(cfg, model, data.test, cal_real, sens_real, "proposed", p, out, "real");
      run_switching_step(cfg, model, data.test, cal_real, sens_noise, "proposed", p, out, "noise");
    }
  }
  return run_report(out);
}

}  // namespace mpq
