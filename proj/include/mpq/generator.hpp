#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/network.hpp"

namespace mpq {

struct GenConfig {
  double learning_rate = 0.04;
  double lambda = 1.0;
  // true: the optimizer raises the target logit (loss = CE - lambda*y_c);
  // false: the printed sign, loss = CE + lambda*y_c.
  bool maximize_logit = true;
  std::size_t iterations = 1000;
  std::size_t samples_per_class = 1;
  std::uint64_t seed = 0;
  Preprocessing preprocessing;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  void validate() const;
  std::string to_json() const;
};

struct GeneratedBatch {
  LabeledDataset data;        // provenance generated, labels = target classes
  Tensor confidences;         // [n, C] softmax of the final logits
  std::vector<double> mean_ce;  // mean CE over samples, before each step and after the last
};

// Optimizes noise-initialized inputs against the golden set with Adam,
// projecting into the preprocessed input range after every step.
// Throws GenerationError on a non-finite loss.
GeneratedBatch generate(const NetworkDef& net, const GoldenSet& golden, const GenConfig& cfg);

struct ConfidenceRow {
  std::size_t sample = 0;
  std::size_t label = 0;
  std::size_t top1_class = 0;
  double top1_conf = 0.0;
  std::size_t top2_class = 0;
  double top2_conf = 0.0;
  bool match = false;
};

std::vector<ConfidenceRow> confidence_report(const LabeledDataset& batch, const NetworkDef& net);
std::string confidence_csv(const std::vector<ConfidenceRow>& rows);

}  // namespace mpq
