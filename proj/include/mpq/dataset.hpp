#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpq/tensor.hpp"

namespace mpq {

enum class Provenance { real, noise, generated, synthetic_blobs };

const char* to_string(Provenance p);
Provenance parse_provenance(const std::string& s);

struct LabeledDataset {
  Tensor images;  // [n, c, h, w]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  Provenance provenance = Provenance::real;
  // Free-form markers such as "empty" or "labels-meaningless".
  std::vector<std::string> flags;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  Shape sample_shape() const;

  Tensor batch(std::size_t begin, std::size_t end) const;
  Tensor one_hot(std::size_t begin, std::size_t end) const;
  LabeledDataset subset(const std::vector<std::size_t>& indices) const;
  // First `per_class` samples of every class, in class order.
  LabeledDataset per_class_subset(std::size_t per_class) const;
  bool has_flag(const std::string& f) const;

  // Throws ValidationError on n/labels mismatch or labels >= num_classes.
  void validate() const;
};

LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b);

struct GoldenSet {
  Tensor vectors;  // [C, C], one one-hot row per class
  std::size_t num_classes() const { return vectors.dim(0); }
};

GoldenSet golden_set(std::size_t num_classes);

// Maps raw [0,255] intensities into the model input range.
struct Preprocessing {
  enum class Kind { normalize, standardize };
  Kind kind = Kind::normalize;
  double mean = 127.5;    // standardize only
  double stddev = 127.5;  // standardize only

  double apply(double raw) const;
  double lower() const { return apply(0.0); }
  double upper() const { return apply(255.0); }
  friend bool operator==(const Preprocessing&, const Preprocessing&) = default;
};

std::string to_string(const Preprocessing& p);
Preprocessing parse_preprocessing(const std::string& s);

// --- IDX ------------------------------------------------------------------
//
// Images: magic 0x00000803 (unsigned bytes, n x h x w), scaled by 1/255 into a
// [n,1,h,w] tensor, or 0x00000E04 (big-endian f64, n x c x h x w), stored
// values unchanged. Labels: magic 0x00000801 (unsigned bytes).

enum class IdxEncoding { ubyte, f64 };

LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::optional<std::size_t> num_classes = std::nullopt);

// ubyte requires single-channel images whose values are exact multiples of
// 1/255 in [0,1]; otherwise throws ValidationError.
void save_idx(const LabeledDataset& ds, const std::filesystem::path& images,
              const std::filesystem::path& labels, IdxEncoding encoding);

IdxEncoding natural_encoding(const LabeledDataset& ds);

// --- Synthetic datasets ---------------------------------------------------

struct BlobOptions {
  std::size_t latent_dim = 16;  // >= num_classes
  double separation = 8.0;      // distance between class means, in units of sigma
  double sigma = 1.0;
  double background = 0.5;      // pixel = clip(background + contrast * embed(z), 0, 1)
  double contrast = 0.1;
};

// Gaussian class clusters in a latent space, embedded into the input shape by
// a fixed seed-derived map, clipped to [0,1] and rounded to the 1/255 grid.
// Samples are interleaved by class.
LabeledDataset make_blobs(std::uint64_t seed, std::size_t per_class, std::size_t num_classes,
                          const Shape& sample_shape, const BlobOptions& options = {});

// Uniform integers in [0,255] through `pre`; labels round-robin and flagged
// as meaningless.
LabeledDataset make_noise(std::uint64_t seed, std::size_t n, const Shape& sample_shape,
                          const Preprocessing& pre, std::size_t num_classes);

// --- Dataset manifests ----------------------------------------------------
//
// <dir>/<name>.json names <name>-images.idx and <name>-labels.idx plus
// provenance, seed, preprocessing and free-form generator settings.

struct DatasetManifest {
  int format_version = 1;
  Provenance provenance = Provenance::real;
  std::optional<std::uint64_t> seed;
  Preprocessing preprocessing;
  std::size_t num_classes = 0;
  std::size_t count = 0;
  IdxEncoding encoding = IdxEncoding::ubyte;
  std::string images_file;
  std::string labels_file;
  std::vector<std::string> flags;
  std::string extra_json = "{}";  // e.g. the generator configuration
};

std::filesystem::path save_dataset(const LabeledDataset& ds, const std::filesystem::path& dir,
                                   const std::string& name, DatasetManifest manifest);

struct LoadedDataset {
  LabeledDataset data;
  DatasetManifest manifest;
};

LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace mpq
