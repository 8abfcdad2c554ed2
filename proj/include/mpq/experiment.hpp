#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/generator.hpp"
#include "mpq/harness.hpp"
#include "mpq/network.hpp"
#include "mpq/sensitivity.hpp"

namespace mpq {

struct ExperimentConfig {
  static constexpr int kFormatVersion = 1;

  std::string arch = "tiny_cnn";  // reference architecture when `model` is empty
  std::string model;              // path to an existing model json
  std::size_t num_classes = 10;
  Shape input_shape = {1, 28, 28};
  std::size_t train_per_class = 80;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 20;
  std::size_t calibration_per_class = 1;  // real calibration set, from train
  std::size_t noise_samples = 0;          // 0: as many as generated
  std::uint64_t seed = 1;
  BlobOptions blobs;
  TrainConfig train;
  GenConfig generator;
  int ptq_bits = 8;
  int switch_bits = 4;
  std::vector<MetricKind> metrics = {MetricKind::proposed, MetricKind::l2, MetricKind::kld,
                                     MetricKind::hessian};
  std::vector<Protocol> protocols = {Protocol::weights, Protocol::activations};
  std::size_t hessian_probes = 100;
  NormKind norm = NormKind::l2;
  std::size_t random_orderings = 20;

  // Throws ConfigError naming the field.
  void validate() const;
};

// Defaults for a reference architecture ("mlp" or "tiny_cnn").
ExperimentConfig default_experiment(const std::string& arch);
// Missing fields take the defaults of the named arch. Throws ConfigError with
// the field path.
ExperimentConfig experiment_from_json(const std::string& text);
ExperimentConfig load_experiment(const std::filesystem::path& path);
std::string to_json(const ExperimentConfig& cfg);

// Independent stream seeds derived from the master seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

// Role names used in file names: "real" for the blob task, otherwise the
// provenance.
std::string dataset_role(Provenance p);

// --- Steps ----------------------------------------------------------------
//
// Every step reads and writes only the files it names under `out`; all
// writes are atomic.

struct DataPaths {
  std::filesystem::path train, val, test, calibration;  // manifest paths
};

// data/{train,val,test,calibration}.json from one blob draw, split per class.
DataPaths make_task_data(const ExperimentConfig& cfg, const std::filesystem::path& out);

// model.json/.bin and train.json.
std::filesystem::path run_train(const ExperimentConfig& cfg, const std::filesystem::path& train_data,
                                const std::filesystem::path& val_data, const std::filesystem::path& test_data,
                                const std::filesystem::path& out);

// data/generated.json and confidence_report.csv.
std::filesystem::path run_generate(const ExperimentConfig& cfg, const std::filesystem::path& model,
                                   const std::filesystem::path& out);
// data/noise.json.
std::filesystem::path run_noise(const ExperimentConfig& cfg, const std::filesystem::path& out);

// calibration_<role>.json.
std::filesystem::path run_calibrate(const std::filesystem::path& model, const std::filesystem::path& dataset,
                                    const std::filesystem::path& out, const std::string& role = "");

// quantize_eval.json: FP32 and `bits` PTQ under each calibration file.
std::filesystem::path run_quantize_eval(const std::filesystem::path& model, const std::filesystem::path& eval,
                                        const std::vector<std::filesystem::path>& calibrations, int bits,
                                        const std::filesystem::path& out);

// sensitivity_<role>.csv (plus sensitivity.csv for generated data) with one
// row per metric, target and layer; clips come from `calibration`.
std::filesystem::path run_sensitivity(const ExperimentConfig& cfg, const std::filesystem::path& model,
                                      const std::filesystem::path& dataset,
                                      const std::filesystem::path& calibration, const std::filesystem::path& out,
                                      const std::string& role = "");

// curve_<metric>_<protocol>[_<role>].csv. metric is a sensitivity metric
// (ranking read from `ranking`), "oracle", or "random" (pointwise mean over
// cfg.random_orderings seeds).
std::filesystem::path run_switching_step(const ExperimentConfig& cfg, const std::filesystem::path& model,
                                         const std::filesystem::path& eval,
                                         const std::filesystem::path& calibration,
                                         const std::filesystem::path& ranking, const std::string& metric,
                                         Protocol protocol, const std::filesystem::path& out,
                                         const std::string& role = "");

struct ReportSummary {
  double fp32_top1 = 0.0;
  std::map<std::string, double> ptq_top1;                      // by calibration role
  std::map<std::string, std::map<std::string, double>> auc;    // protocol -> metric -> area
  std::map<std::string, std::map<std::string, double>> relative_auc;
  std::map<std::string, std::map<std::string, double>> dataset_relative_auc;  // protocol -> role
  std::map<std::string, std::map<std::string, double>> spearman_vs_real;      // target -> role
  std::map<std::string, double> mean_spearman_vs_real;                        // role
  std::map<std::size_t, double> clip_ratio;                                   // generated / real
  double confidence_match = 0.0;
};

// Reads the artifacts in `out` and writes auc_table.csv, ptq_table.csv,
// dataset_table.csv, curves_long.csv and summary.json.
ReportSummary run_report(const std::filesystem::path& out);

// Every step in order.
ReportSummary run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out);

// --- Artifact readers -----------------------------------------------------

std::vector<SensitivityRow> read_sensitivity_csv(const std::filesystem::path& path);
SwitchingCurve read_curve_csv(const std::filesystem::path& path);
CalibrationProfile read_calibration(const std::filesystem::path& path);

}  // namespace mpq
