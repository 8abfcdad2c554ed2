// Command-line front end: one subcommand per pipeline step, plus `pipeline`.
//
// Exit codes: 0 ok, 1 invalid configuration or input content, 2 missing input.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mpq/errors.hpp"
#include "mpq/experiment.hpp"

namespace fs = std::filesystem;
using namespace mpq;

namespace {

struct Common {
  std::string config;
  std::string arch = "tiny_cnn";
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", c.config, "experiment config JSON");
    cmd->add_option("--arch", c.arch, "reference architecture when no config is given (mlp, tiny_cnn)");
    cmd->add_option("--seed", c.seed, "master seed, overrides the config");
  }
  cmd->add_option("--out", c.out, "output directory");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? default_experiment(c.arch) : load_experiment(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

int bits_or(const std::optional<int>& bits, int fallback) { return bits ? *bits : fallback; }

void say(const fs::path& p) { std::cout << p.string() << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-training mixed-precision quantization toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string model, dataset, ranking, name, metric, protocol;
  std::vector<std::string> calibrations;
  std::optional<int> bits;
  bool noise = false;

  auto* train = app.add_subcommand("train", "make the blob task splits and train the reference net");
  add_common(train, common);

  auto* gen = app.add_subcommand("generate", "generate labeled calibration data (or a noise set)");
  add_common(gen, common);
  gen->add_option("--model", model, "model json")->required();
  gen->add_flag("--noise", noise, "write a uniform-noise dataset instead");

  auto* cal = app.add_subcommand("calibrate", "per-layer activation clipping ranges");
  add_common(cal, common, false);
  cal->add_option("--model", model, "model json")->required();
  cal->add_option("--dataset", dataset, "dataset manifest")->required();
  cal->add_option("--name", name, "role used in the file name (default from provenance)");

  auto* qe = app.add_subcommand("quantize-eval", "FP32 and uniform PTQ accuracy per calibration");
  add_common(qe, common, false);
  qe->add_option("--model", model, "model json")->required();
  qe->add_option("--dataset", dataset, "eval dataset manifest")->required();
  qe->add_option("--calibration", calibrations, "calibration profile(s)")->required();
  qe->add_option("--bits", bits, "bit-width for weights and activations (default 8)");

  auto* sens = app.add_subcommand("sensitivity", "per-layer sensitivity scores and rankings");
  add_common(sens, common);
  sens->add_option("--model", model, "model json")->required();
  sens->add_option("--dataset", dataset, "measurement dataset manifest")->required();
  sens->add_option("--calibration", calibrations, "activation clips")->required()->expected(1);
  sens->add_option("--bits", bits, "bit-width of the measured layer (default 4)");
  sens->add_option("--metric", metric, "proposed, l2, kld or hessian (default: the config's list)");
  sens->add_option("--name", name, "role used in the file name (default from provenance)");

  auto* sw = app.add_subcommand("switching", "task-loss curve restoring layers to FP32 in ranked order");
  add_common(sw, common);
  sw->add_option("--model", model, "model json")->required();
  sw->add_option("--dataset", dataset, "eval dataset manifest")->required();
  sw->add_option("--calibration", calibrations, "activation clips")->required()->expected(1);
  sw->add_option("--ranking", ranking, "sensitivity csv (not needed for oracle/random)");
  sw->add_option("--metric", metric, "proposed, l2, kld, hessian, oracle or random")->required();
  sw->add_option("--protocol", protocol, "weights or activations")->required();
  sw->add_option("--bits", bits, "starting bit-width (default 4)");
  sw->add_option("--name", name, "ranking dataset role appended to the file name");

  auto* rep = app.add_subcommand("report", "aggregate artifacts into tables and summary.json");
  add_common(rep, common, false);

  auto* pipe = app.add_subcommand("pipeline", "every step in order");
  add_common(pipe, common);

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out = common.out;
    if (*train) {
      const ExperimentConfig cfg = resolve(common);
      const DataPaths d = make_task_data(cfg, out);
      for (const auto& p : {d.train, d.val, d.test, d.calibration}) say(p);
      say(run_train(cfg, d.train, d.val, d.test, out));
    } else if (*gen) {
      const ExperimentConfig cfg = resolve(common);
      say(noise ? run_noise(cfg, out) : run_generate(cfg, model, out));
    } else if (*cal) {
      say(run_calibrate(model, dataset, out, name));
    } else if (*qe) {
      std::vector<fs::path> files(calibrations.begin(), calibrations.end());
      const int b = bits_or(bits, 8);
      if (b != 32 && (b < 2 || b > 16)) throw ConfigError("--bits", "must be in [2, 16] or 32");
      say(run_quantize_eval(model, dataset, files, b, out));
    } else if (*sens) {
      ExperimentConfig cfg = resolve(common);
      cfg.switch_bits = bits_or(bits, cfg.switch_bits);
      if (!metric.empty()) {
        try {
          cfg.metrics = {parse_metric(metric)};
        } catch (const ValidationError&) {
          throw ConfigError("--metric", "must be one of proposed, l2, kld, hessian");
        }
      }
      cfg.validate();
      say(run_sensitivity(cfg, model, dataset, calibrations.at(0), out, name));
    } else if (*sw) {
      ExperimentConfig cfg = resolve(common);
      cfg.switch_bits = bits_or(bits, cfg.switch_bits);
      cfg.validate();
      Protocol p;
      try {
        p = parse_protocol(protocol);
      } catch (const ValidationError&) {
        throw ConfigError("--protocol", "must be weights or activations");
      }
      if (metric != "oracle" && metric != "random" && ranking.empty()) {
        throw MissingInputError("ranking", "--ranking");
      }
      say(run_switching_step(cfg, model, dataset, calibrations.at(0), ranking, metric, p, out, name));
    } else if (*rep) {
      run_report(out);
      say(out / "summary.json");
    } else if (*pipe) {
      const ExperimentConfig cfg = resolve(common);
      run_pipeline(cfg, out);
      say(out / "summary.json");
    }
  } catch (const MissingInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid config: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
