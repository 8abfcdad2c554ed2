#include "mpq/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "json.hpp"
#include "mpq/errors.hpp"
#include "mpq/io.hpp"

namespace mpq {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::real: return "real";
    case Provenance::noise: return "noise";
    case Provenance::generated: return "generated";
    case Provenance::synthetic_blobs: return "synthetic-blobs";
  }
  return "?";
}

Provenance parse_provenance(const std::string& s) {
  if (s == "real") return Provenance::real;
  if (s == "noise") return Provenance::noise;
  if (s == "generated") return Provenance::generated;
  if (s == "synthetic-blobs") return Provenance::synthetic_blobs;
  throw ParseError("unknown provenance '" + s + "'");
}

Shape LabeledDataset::sample_shape() const {
  if (images.rank() == 0) return {};
  return Shape(images.shape().begin() + 1, images.shape().end());
}

Tensor LabeledDataset::batch(std::size_t begin, std::size_t end) const {
  return images.rows(begin, end);
}

Tensor LabeledDataset::one_hot(std::size_t begin, std::size_t end) const {
  Tensor t(Shape{end - begin, num_classes});
  for (std::size_t i = begin; i < end; ++i) t.at(i - begin, labels[i]) = 1.0;
  return t;
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.provenance = provenance;
  out.flags = flags;
  Shape s = images.shape();
  const std::size_t stride = shape_numel(sample_shape());
  s[0] = indices.size();
  std::vector<double> data;
  data.reserve(indices.size() * stride);
  for (std::size_t i : indices) {
    if (i >= size()) throw ValidationError("subset index " + std::to_string(i) + " out of range");
    const auto src = images.data().subspan(i * stride, stride);
    data.insert(data.end(), src.begin(), src.end());
    out.labels.push_back(labels[i]);
  }
  out.images = Tensor(std::move(s), std::move(data));
  return out;
}

LabeledDataset LabeledDataset::per_class_subset(std::size_t per_class) const {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < size(); ++i) {
    if (by_class[labels[i]].size() < per_class) by_class[labels[i]].push_back(i);
  }
  std::vector<std::size_t> picked;
  for (const auto& v : by_class) picked.insert(picked.end(), v.begin(), v.end());
  return subset(picked);
}

bool LabeledDataset::has_flag(const std::string& f) const {
  return std::find(flags.begin(), flags.end(), f) != flags.end();
}

void LabeledDataset::validate() const {
  if (images.rank() < 2) throw ValidationError("dataset images must be batched");
  if (images.dim(0) != labels.size()) {
    throw ValidationError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " at sample " +
                            std::to_string(i) + " >= num_classes " + std::to_string(num_classes));
    }
  }
  if (!images.all_finite()) throw ValidationError("dataset contains non-finite pixels");
}

LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.num_classes != b.num_classes) throw ValidationError("concat: class counts differ");
  LabeledDataset out = a;
  const Tensor parts[] = {a.images, b.images};
  out.images = concat_rows(parts);
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

GoldenSet golden_set(std::size_t num_classes) {
  if (num_classes < 2) {
    throw ValidationError("golden set needs at least 2 classes, got " + std::to_string(num_classes));
  }
  Tensor v(Shape{num_classes, num_classes});
  for (std::size_t c = 0; c < num_classes; ++c) v.at(c, c) = 1.0;
  return {std::move(v)};
}

double Preprocessing::apply(double raw) const {
  if (kind == Kind::normalize) return raw / 255.0;
  return (raw - mean) / stddev;
}

std::string to_string(const Preprocessing& p) {
  if (p.kind == Preprocessing::Kind::normalize) return "normalize";
  return "standardize:" + io::format_double(p.mean) + ":" + io::format_double(p.stddev);
}

Preprocessing parse_preprocessing(const std::string& s) {
  Preprocessing p;
  if (s == "normalize") return p;
  if (s == "standardize") {
    p.kind = Preprocessing::Kind::standardize;
    return p;
  }
  const std::string prefix = "standardize:";
  if (s.rfind(prefix, 0) == 0) {
    p.kind = Preprocessing::Kind::standardize;
    const std::string rest = s.substr(prefix.size());
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw ParseError("preprocessing '" + s + "': expected mean:std");
    try {
      p.mean = std::stod(rest.substr(0, colon));
      p.stddev = std::stod(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw ParseError("preprocessing '" + s + "': bad number");
    }
    if (!(p.stddev > 0)) throw ParseError("preprocessing '" + s + "': std must be positive");
    return p;
  }
  throw ParseError("unknown preprocessing '" + s + "'");
}

// ---------------------------------------------------------------------------
// IDX

namespace {

constexpr std::uint8_t kTypeUbyte = 0x08;
constexpr std::uint8_t kTypeF64 = 0x0E;

std::string hex_magic(std::uint32_t m) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << m;
  return os.str();
}

std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(char((v >> s) & 0xFF));
}

struct IdxFile {
  std::uint8_t type = 0;
  std::vector<std::uint32_t> dims;
  const std::uint8_t* payload = nullptr;
  std::size_t payload_size = 0;
};

IdxFile parse_idx_header(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  if (bytes.size() < 4) {
    throw ParseError(what + ": truncated header, expected at least 4 bytes, got " +
                     std::to_string(bytes.size()));
  }
  const std::uint32_t magic = read_be32(bytes.data());
  if (bytes[0] != 0 || bytes[1] != 0 || bytes[3] == 0) {
    throw ParseError(what + ": bad magic " + hex_magic(magic));
  }
  IdxFile f;
  f.type = bytes[2];
  const std::size_t ndims = bytes[3];
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) {
    throw ParseError(what + ": truncated header, expected " + std::to_string(header) +
                     " bytes, got " + std::to_string(bytes.size()));
  }
  for (std::size_t i = 0; i < ndims; ++i) f.dims.push_back(read_be32(bytes.data() + 4 + 4 * i));
  f.payload = bytes.data() + header;
  f.payload_size = bytes.size() - header;
  return f;
}

void require_payload(const IdxFile& f, std::size_t elem_size, const std::string& what) {
  std::size_t count = 1;
  for (auto d : f.dims) count *= d;
  const std::size_t expected = count * elem_size;
  if (f.payload_size != expected) {
    throw ParseError(what + ": payload length mismatch, expected " + std::to_string(expected) +
                     " bytes, got " + std::to_string(f.payload_size));
  }
}

}  // namespace

LabeledDataset load_idx(const fs::path& images, const fs::path& labels,
                        std::optional<std::size_t> num_classes) {
  const auto img_bytes = io::read_bytes(images);
  const auto lbl_bytes = io::read_bytes(labels);
  const IdxFile img = parse_idx_header(img_bytes, "images " + images.string());
  const IdxFile lbl = parse_idx_header(lbl_bytes, "labels " + labels.string());

  const std::uint32_t img_magic = read_be32(img_bytes.data());
  const std::uint32_t lbl_magic = read_be32(lbl_bytes.data());
  if (lbl_magic != 0x00000801u) {
    throw ParseError("labels " + labels.string() + ": wrong magic " + hex_magic(lbl_magic) +
                     ", expected 0x00000801");
  }
  require_payload(lbl, 1, "labels " + labels.string());

  LabeledDataset ds;
  std::vector<double> pixels;
  Shape shape;
  if (img_magic == 0x00000803u) {
    require_payload(img, 1, "images " + images.string());
    shape = {img.dims[0], 1, img.dims[1], img.dims[2]};
    pixels.resize(img.payload_size);
    for (std::size_t i = 0; i < img.payload_size; ++i) pixels[i] = double(img.payload[i]) / 255.0;
  } else if (img_magic == 0x00000E04u) {
    require_payload(img, 8, "images " + images.string());
    shape = {img.dims[0], img.dims[1], img.dims[2], img.dims[3]};
    pixels.resize(img.payload_size / 8);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits = (bits << 8) | img.payload[i * 8 + b];
      pixels[i] = std::bit_cast<double>(bits);
    }
  } else {
    throw ParseError("images " + images.string() + ": wrong magic " + hex_magic(img_magic) +
                     ", expected 0x00000803 or 0x00000e04");
  }
  if (lbl.dims[0] != shape[0]) {
    throw ParseError("count mismatch: " + std::to_string(shape[0]) + " images vs " +
                     std::to_string(lbl.dims[0]) + " labels");
  }
  ds.images = Tensor(std::move(shape), std::move(pixels));
  ds.labels.assign(lbl.payload, lbl.payload + lbl.payload_size);
  std::size_t max_label = 0;
  for (auto l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = num_classes.value_or(ds.labels.empty() ? 0 : max_label + 1);
  if (ds.empty()) ds.flags.push_back("empty");
  ds.validate();
  return ds;
}

IdxEncoding natural_encoding(const LabeledDataset& ds) {
  if (ds.images.rank() != 4 || ds.images.dim(1) != 1) return IdxEncoding::f64;
  for (double v : ds.images.data()) {
    if (!(v >= 0.0 && v <= 1.0) || std::round(v * 255.0) / 255.0 != v) return IdxEncoding::f64;
  }
  return IdxEncoding::ubyte;
}

void save_idx(const LabeledDataset& ds, const fs::path& images, const fs::path& labels,
              IdxEncoding encoding) {
  ds.validate();
  if (ds.images.rank() != 4) throw ValidationError("save_idx expects [n,c,h,w] images");
  const Shape& s = ds.images.shape();
  std::string img;
  if (encoding == IdxEncoding::ubyte) {
    if (natural_encoding(ds) != IdxEncoding::ubyte) {
      throw ValidationError("images are not single-channel multiples of 1/255; use f64 encoding");
    }
    img.push_back(0);
    img.push_back(0);
    img.push_back(char(kTypeUbyte));
    img.push_back(3);
    put_be32(img, std::uint32_t(s[0]));
    put_be32(img, std::uint32_t(s[2]));
    put_be32(img, std::uint32_t(s[3]));
    for (double v : ds.images.data()) img.push_back(char(std::uint8_t(std::lround(v * 255.0))));
  } else {
    img.push_back(0);
    img.push_back(0);
    img.push_back(char(kTypeF64));
    img.push_back(4);
    for (auto d : s) put_be32(img, std::uint32_t(d));
    for (double v : ds.images.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 56; b >= 0; b -= 8) img.push_back(char((bits >> b) & 0xFF));
    }
  }
  std::string lbl;
  lbl.push_back(0);
  lbl.push_back(0);
  lbl.push_back(char(kTypeUbyte));
  lbl.push_back(1);
  put_be32(lbl, std::uint32_t(ds.size()));
  for (auto l : ds.labels) {
    if (l > 255) throw ValidationError("IDX labels are bytes; label " + std::to_string(l));
    lbl.push_back(char(std::uint8_t(l)));
  }
  io::write_atomic(images, img);
  io::write_atomic(labels, lbl);
}

// ---------------------------------------------------------------------------
// Synthetic data

LabeledDataset make_blobs(std::uint64_t seed, std::size_t per_class, std::size_t num_classes,
                          const Shape& sample_shape, const BlobOptions& opt) {
  if (num_classes == 0) throw ValidationError("make_blobs: num_classes must be positive");
  if (opt.latent_dim < num_classes) {
    throw ValidationError("make_blobs: latent_dim must be >= num_classes");
  }
  if (sample_shape.size() != 3) throw ValidationError("make_blobs: sample shape must be [c,h,w]");
  const std::size_t c = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
  const std::size_t pixels = c * h * w;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Embedding: each latent direction paints a few smooth signed bumps.
  std::vector<double> embed(pixels * opt.latent_dim, 0.0);
  for (std::size_t k = 0; k < opt.latent_dim; ++k) {
    for (int bump = 0; bump < 3; ++bump) {
      const std::size_t ch = rng() % c;
      const double sign = (rng() & 1) ? 1.0 : -1.0;
      const double cy = 0.15 * double(h) + 0.7 * double(h) * unit(rng);
      const double cx = 0.15 * double(w) + 0.7 * double(w) * unit(rng);
      const double radius = (0.05 + 0.07 * unit(rng)) * double(std::min(h, w));
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double d2 = (double(y) - cy) * (double(y) - cy) + (double(x) - cx) * (double(x) - cx);
          embed[((ch * h + y) * w + x) * opt.latent_dim + k] += sign * std::exp(-d2 / (2 * radius * radius));
        }
    }
  }
  // Class means along distinct axes: pairwise distance separation * sigma.
  const double offset = opt.separation * opt.sigma / std::sqrt(2.0);

  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.provenance = Provenance::synthetic_blobs;
  const std::size_t n = per_class * num_classes;
  std::vector<double> data(n * pixels);
  std::vector<double> z(opt.latent_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % num_classes;
    for (std::size_t k = 0; k < opt.latent_dim; ++k) {
      z[k] = opt.sigma * normal(rng) + (k == label ? offset : 0.0);
    }
    for (std::size_t p = 0; p < pixels; ++p) {
      double v = 0.0;
      for (std::size_t k = 0; k < opt.latent_dim; ++k) v += embed[p * opt.latent_dim + k] * z[k];
      v = std::clamp(opt.background + opt.contrast * v, 0.0, 1.0);
      data[i * pixels + p] = std::round(v * 255.0) / 255.0;
    }
    ds.labels.push_back(label);
  }
  ds.images = Tensor(Shape{n, c, h, w}, std::move(data));
  if (n == 0) ds.flags.push_back("empty");
  return ds;
}

LabeledDataset make_noise(std::uint64_t seed, std::size_t n, const Shape& sample_shape,
                          const Preprocessing& pre, std::size_t num_classes) {
  if (num_classes == 0) throw ValidationError("make_noise: num_classes must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(0, 255);
  Shape s{n};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  Tensor images(s);
  for (auto& v : images.data()) v = pre.apply(double(byte(rng)));
  LabeledDataset ds;
  ds.images = std::move(images);
  ds.num_classes = num_classes;
  ds.provenance = Provenance::noise;
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(i % num_classes);
  ds.flags.push_back("labels-meaningless");
  if (n == 0) ds.flags.push_back("empty");
  return ds;
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

json preprocessing_json(const Preprocessing& p) {
  if (p.kind == Preprocessing::Kind::normalize) return {{"kind", "normalize"}};
  return {{"kind", "standardize"}, {"mean", p.mean}, {"std", p.stddev}};
}

template <class T>
T field(const json& j, const char* name, const fs::path& where) {
  if (!j.contains(name)) throw ParseError(where.string() + ": missing field '" + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    throw ParseError(where.string() + ": field '" + name + "' has the wrong type");
  }
}

}  // namespace

fs::path save_dataset(const LabeledDataset& ds, const fs::path& dir, const std::string& name,
                      DatasetManifest m) {
  m.provenance = ds.provenance;
  m.num_classes = ds.num_classes;
  m.count = ds.size();
  m.flags = ds.flags;
  m.images_file = name + "-images.idx";
  m.labels_file = name + "-labels.idx";
  save_idx(ds, dir / m.images_file, dir / m.labels_file, m.encoding);
  json j;
  j["format_version"] = m.format_version;
  j["provenance"] = to_string(m.provenance);
  j["seed"] = m.seed ? json(*m.seed) : json(nullptr);
  j["preprocessing"] = preprocessing_json(m.preprocessing);
  j["num_classes"] = m.num_classes;
  j["count"] = m.count;
  j["encoding"] = m.encoding == IdxEncoding::ubyte ? "ubyte" : "f64";
  j["images"] = m.images_file;
  j["labels"] = m.labels_file;
  j["flags"] = m.flags;
  j["generator"] = json::parse(m.extra_json);
  const fs::path path = dir / (name + ".json");
  io::write_atomic(path, j.dump(2) + "\n");
  return path;
}

LoadedDataset load_dataset(const fs::path& manifest_path) {
  json j;
  try {
    j = json::parse(io::read_text(manifest_path));
  } catch (const json::parse_error& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.format_version = field<int>(j, "format_version", manifest_path);
  if (m.format_version != 1) {
    throw ParseError(manifest_path.string() + ": unsupported format_version " +
                     std::to_string(m.format_version));
  }
  m.provenance = parse_provenance(field<std::string>(j, "provenance", manifest_path));
  if (j.contains("seed") && !j["seed"].is_null()) m.seed = j["seed"].get<std::uint64_t>();
  const json pre = j.value("preprocessing", json{{"kind", "normalize"}});
  if (pre.value("kind", "normalize") == "standardize") {
    m.preprocessing.kind = Preprocessing::Kind::standardize;
    m.preprocessing.mean = pre.value("mean", 127.5);
    m.preprocessing.stddev = pre.value("std", 127.5);
  }
  m.num_classes = field<std::size_t>(j, "num_classes", manifest_path);
  m.count = field<std::size_t>(j, "count", manifest_path);
  m.encoding = field<std::string>(j, "encoding", manifest_path) == "f64" ? IdxEncoding::f64
                                                                        : IdxEncoding::ubyte;
  m.images_file = field<std::string>(j, "images", manifest_path);
  m.labels_file = field<std::string>(j, "labels", manifest_path);
  m.flags = j.value("flags", std::vector<std::string>{});
  if (j.contains("generator")) m.extra_json = j["generator"].dump();

  const fs::path dir = manifest_path.parent_path();
  LoadedDataset out{load_idx(dir / m.images_file, dir / m.labels_file, m.num_classes), m};
  if (out.data.size() != m.count) {
    throw ParseError(manifest_path.string() + ": field 'count' is " + std::to_string(m.count) +
                     " but files hold " + std::to_string(out.data.size()) + " samples");
  }
  out.data.provenance = m.provenance;
  out.data.flags = m.flags;
  return out;
}

}  // namespace mpq
