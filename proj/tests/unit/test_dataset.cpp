#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "../support/tempdir.hpp"
#include "mpq/autodiff.hpp"
#include "mpq/dataset.hpp"
#include "mpq/errors.hpp"
#include "mpq/io.hpp"

using namespace mpq;
using mpq::testing::TempDir;

namespace {

std::string be32(std::uint32_t v) {
  std::string s;
  for (int b = 24; b >= 0; b -= 8) s.push_back(char((v >> b) & 0xFF));
  return s;
}

std::string idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w, std::uint8_t fill) {
  return be32(0x803) + be32(n) + be32(h) + be32(w) + std::string(n * h * w, char(fill));
}

std::string idx_labels(std::vector<std::uint8_t> labels) {
  return be32(0x801) + be32(std::uint32_t(labels.size())) + std::string(labels.begin(), labels.end());
}

void put(const std::filesystem::path& p, const std::string& bytes) { io::write_atomic(p, bytes); }

template <class Fn>
std::string parse_error_message(Fn fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e.what();
  }
  return "<no ParseError>";
}

}  // namespace

TEST(Idx, AllWhiteImageScalesToOne) {
  TempDir dir;
  put(dir / "i", idx_images(1, 28, 28, 255));
  put(dir / "l", idx_labels({0}));
  const auto ds = load_idx(dir / "i", dir / "l");
  ASSERT_EQ(ds.images.shape(), (Shape{1, 1, 28, 28}));
  for (double v : ds.images.data()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(ds.labels, std::vector<std::size_t>{0});
}

TEST(Idx, PixelScalingIsDivisionBy255) {
  TempDir dir;
  std::string img = be32(0x803) + be32(1) + be32(1) + be32(4);
  for (int v : {0, 1, 128, 254}) img.push_back(char(v));
  put(dir / "i", img);
  put(dir / "l", idx_labels({2}));
  const auto ds = load_idx(dir / "i", dir / "l", 3);
  EXPECT_EQ(ds.images[0], 0.0);
  EXPECT_EQ(ds.images[1], 1.0 / 255.0);
  EXPECT_EQ(ds.images[2], 128.0 / 255.0);
  EXPECT_EQ(ds.images[3], 254.0 / 255.0);
  EXPECT_EQ(ds.num_classes, 3u);
}

TEST(Idx, WrongMagicNamesMagic) {
  TempDir dir;
  put(dir / "i", be32(0x802) + be32(1) + be32(1) + std::string(1, '\0'));
  put(dir / "l", idx_labels({0}));
  const std::string msg = parse_error_message([&] { load_idx(dir / "i", dir / "l"); });
  EXPECT_NE(msg.find("0x00000802"), std::string::npos) << msg;
}

TEST(Idx, WrongLabelMagicNamesMagic) {
  TempDir dir;
  put(dir / "i", idx_images(1, 2, 2, 0));
  put(dir / "l", be32(0x803) + be32(1) + be32(1) + be32(1) + std::string(1, '\0'));
  const std::string msg = parse_error_message([&] { load_idx(dir / "i", dir / "l"); });
  EXPECT_NE(msg.find("0x00000803"), std::string::npos) << msg;
}

TEST(Idx, TruncatedPayload) {
  TempDir dir;
  std::string img = idx_images(2, 3, 3, 7);
  img.pop_back();
  put(dir / "i", img);
  put(dir / "l", idx_labels({0, 1}));
  const std::string msg = parse_error_message([&] { load_idx(dir / "i", dir / "l"); });
  EXPECT_NE(msg.find("expected 18"), std::string::npos) << msg;
  EXPECT_NE(msg.find("got 17"), std::string::npos) << msg;
}

TEST(Idx, CountMismatchBetweenFiles) {
  TempDir dir;
  put(dir / "i", idx_images(2, 3, 3, 7));
  put(dir / "l", idx_labels({0, 1, 1}));
  const std::string msg = parse_error_message([&] { load_idx(dir / "i", dir / "l"); });
  EXPECT_NE(msg.find("count mismatch"), std::string::npos) << msg;
}

TEST(Idx, MissingFileIsError) {
  TempDir dir;
  EXPECT_THROW(load_idx(dir / "nope", dir / "nope2"), Error);
}

TEST(Idx, RoundTripPreservesBytes) {
  TempDir dir;
  std::mt19937_64 rng(9);
  std::string img = be32(0x803) + be32(5) + be32(4) + be32(3);
  for (int i = 0; i < 60; ++i) img.push_back(char(rng() & 0xFF));
  const std::string lbl = idx_labels({0, 4, 2, 9, 1});
  put(dir / "i", img);
  put(dir / "l", lbl);
  const auto ds = load_idx(dir / "i", dir / "l");
  save_idx(ds, dir / "i2", dir / "l2", IdxEncoding::ubyte);
  const auto a = io::read_bytes(dir / "i2");
  const auto b = io::read_bytes(dir / "l2");
  EXPECT_EQ(std::string(a.begin(), a.end()), img);
  EXPECT_EQ(std::string(b.begin(), b.end()), lbl);
}

TEST(Idx, F64RoundTripIsExact) {
  TempDir dir;
  LabeledDataset ds = make_noise(3, 4, {2, 3, 3}, parse_preprocessing("standardize"), 3);
  ds.images[5] = -1.0 / 3.0;
  save_idx(ds, dir / "i", dir / "l", IdxEncoding::f64);
  const auto back = load_idx(dir / "i", dir / "l", 3);
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_THROW(save_idx(ds, dir / "i", dir / "l", IdxEncoding::ubyte), ValidationError);
}

TEST(Idx, FuzzedHeadersRaiseParseError) {
  TempDir dir;
  put(dir / "l", idx_labels({0, 1}));
  const std::string good = idx_images(2, 3, 3, 1);
  std::mt19937_64 rng(77);
  int parse_errors = 0, accepted = 0;
  for (int trial = 0; trial < 400; ++trial) {
    std::string bad = good;
    const int mode = trial % 4;
    if (mode == 0) {
      bad.resize(rng() % 16);  // truncated header
    } else if (mode == 1) {
      bad[rng() % 4] = char(rng() & 0xFF);  // corrupted magic
    } else if (mode == 2) {
      bad[4 + rng() % 12] = char(rng() & 0xFF);  // corrupted dimension
    } else {
      bad.resize(16 + rng() % 18);  // truncated payload
    }
    put(dir / "i", bad);
    try {
      load_idx(dir / "i", dir / "l");
      ++accepted;
      ASSERT_EQ(bad, good) << "malformed file accepted at trial " << trial;
    } catch (const ParseError&) {
      ++parse_errors;
    } catch (const std::exception& e) {
      FAIL() << "trial " << trial << " threw non-ParseError: " << e.what();
    }
  }
  EXPECT_GT(parse_errors, 350);
}

TEST(Blobs, SameSeedIdentical) {
  const auto a = make_blobs(11, 5, 4, {1, 12, 12});
  const auto b = make_blobs(11, 5, 4, {1, 12, 12});
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  const auto c = make_blobs(12, 5, 4, {1, 12, 12});
  EXPECT_NE(a.images, c.images);
}

TEST(Blobs, ShapeRangeAndProvenance) {
  const auto ds = make_blobs(1, 3, 10, {1, 28, 28});
  EXPECT_EQ(ds.images.shape(), (Shape{30, 1, 28, 28}));
  EXPECT_EQ(ds.provenance, Provenance::synthetic_blobs);
  for (double v : ds.images.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
    ASSERT_EQ(std::round(v * 255) / 255, v);
  }
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.labels[i], i % 10);
  EXPECT_NO_THROW(ds.validate());
}

TEST(Blobs, EmptyIsAcceptedAndFlagged) {
  const auto ds = make_blobs(1, 0, 3, {1, 8, 8});
  EXPECT_TRUE(ds.empty());
  EXPECT_TRUE(ds.has_flag("empty"));
  EXPECT_EQ(ds.images.shape(), (Shape{0, 1, 8, 8}));
}

TEST(Blobs, LinearClassifierSeparatesClasses) {
  // Softmax regression on centered pixels by plain gradient descent.
  const auto all = make_blobs(5, 80, 10, {1, 28, 28});
  std::vector<std::size_t> first, second;
  for (std::size_t i = 0; i < all.size(); ++i) (i < all.size() / 2 ? first : second).push_back(i);
  const auto train = all.subset(first);
  const auto test = all.subset(second);
  const std::size_t d = 28 * 28, C = 10;
  Tensor w(Shape{d, C});
  Tensor b(Shape{1, C});
  auto centered = [&](const LabeledDataset& ds) {
    Tensor t = ds.images.reshaped({ds.size(), d});
    for (auto& v : t.data()) v -= 0.5;
    return t;
  };
  const Tensor x = centered(train);
  const Tensor y = train.one_hot(0, train.size());
  for (int it = 0; it < 150; ++it) {
    ad::Tape tape;
    const ad::Var wv = tape.variable(w), bv = tape.variable(b);
    const ad::Var logits = ad::add(ad::matmul(tape.constant(x), wv),
                                   ad::matmul(tape.constant(Tensor(Shape{x.dim(0), 1}, 1.0)), bv));
    const ad::Gradients g = ad::backward(ad::softmax_crossentropy(logits, y));
    const Tensor gw = g[wv], gb = g[bv];
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= 0.5 * gw[i];
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] -= 0.5 * gb[i];
  }
  std::size_t correct = 0;
  const Tensor xt = centered(test);
  for (std::size_t n = 0; n < test.size(); ++n) {
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t c = 0; c < C; ++c) {
      double s = b[c];
      for (std::size_t p = 0; p < d; ++p) s += xt.at(n, p) * w.at(p, c);
      if (s > best_v) best_v = s, best = c;
    }
    correct += best == test.labels[n];
  }
  EXPECT_GE(double(correct) / double(test.size()), 0.99);
}

TEST(Noise, NormalizeRange) {
  const auto ds = make_noise(1, 20, {1, 8, 8}, Preprocessing{}, 5);
  double lo = 1, hi = 0;
  for (double v : ds.images.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
  EXPECT_LT(lo, 0.05);
  EXPECT_GT(hi, 0.95);
  EXPECT_TRUE(ds.has_flag("labels-meaningless"));
  EXPECT_EQ(ds.provenance, Provenance::noise);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.labels[i], i % 5);
}

TEST(Noise, StandardizeRange) {
  const auto pre = parse_preprocessing("standardize:127.5:127.5");
  const auto ds = make_noise(2, 20, {3, 4, 4}, pre, 5);
  for (double v : ds.images.data()) {
    ASSERT_GE(v, -1.0);
    ASSERT_LE(v, 1.0);
  }
  EXPECT_EQ(pre.lower(), -1.0);
  EXPECT_EQ(pre.upper(), 1.0);
}

TEST(Noise, Deterministic) {
  const auto a = make_noise(8, 6, {1, 5, 5}, Preprocessing{}, 3);
  const auto b = make_noise(8, 6, {1, 5, 5}, Preprocessing{}, 3);
  EXPECT_EQ(a.images, b.images);
}

TEST(Preprocessing, ParseAndFormat) {
  EXPECT_EQ(parse_preprocessing("normalize"), Preprocessing{});
  const auto p = parse_preprocessing("standardize:10:2");
  EXPECT_EQ(p.apply(14.0), 2.0);
  EXPECT_EQ(parse_preprocessing(to_string(p)), p);
  EXPECT_THROW(parse_preprocessing("bogus"), ParseError);
  EXPECT_THROW(parse_preprocessing("standardize:1:0"), ParseError);
}

TEST(GoldenSet, ThreeClasses) {
  const auto g = golden_set(3);
  EXPECT_EQ(g.vectors, Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
}

TEST(GoldenSet, RowsAreOneHot) {
  for (std::size_t C : {2, 10, 1000}) {
    const auto g = golden_set(C);
    ASSERT_EQ(g.vectors.shape(), (Shape{C, C}));
    for (std::size_t r = 0; r < C; ++r) {
      double s = 0;
      std::size_t nonzero = 0;
      for (std::size_t c = 0; c < C; ++c) {
        s += g.vectors.at(r, c);
        nonzero += g.vectors.at(r, c) != 0;
      }
      ASSERT_EQ(s, 1.0);
      ASSERT_EQ(nonzero, 1u);
      ASSERT_EQ(g.vectors.at(r, r), 1.0);
    }
  }
}

TEST(GoldenSet, RejectsFewerThanTwoClasses) {
  EXPECT_THROW(golden_set(1), ValidationError);
  EXPECT_THROW(golden_set(0), ValidationError);
}

TEST(Dataset, SubsetsAndValidation) {
  const auto ds = make_blobs(3, 4, 3, {1, 4, 4});
  const auto one = ds.per_class_subset(1);
  EXPECT_EQ(one.labels, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(one.images.rows(1, 2), ds.images.rows(1, 2));
  EXPECT_THROW(ds.subset({100}), ValidationError);
  LabeledDataset bad = ds;
  bad.labels[0] = 7;
  EXPECT_THROW(bad.validate(), ValidationError);
  const auto both = concat(ds, one);
  EXPECT_EQ(both.size(), ds.size() + 3);
}

TEST(Manifest, SaveLoadRoundTrip) {
  TempDir dir;
  const auto ds = make_blobs(21, 2, 4, {1, 6, 6});
  DatasetManifest m;
  m.seed = 21;
  m.extra_json = R"({"iterations": 5})";
  const auto path = save_dataset(ds, dir.path(), "blobs", m);
  const auto loaded = load_dataset(path);
  EXPECT_EQ(loaded.data.images, ds.images);
  EXPECT_EQ(loaded.data.labels, ds.labels);
  EXPECT_EQ(loaded.data.provenance, Provenance::synthetic_blobs);
  EXPECT_EQ(loaded.manifest.seed, std::optional<std::uint64_t>(21));
  EXPECT_EQ(loaded.manifest.num_classes, 4u);
  EXPECT_NE(loaded.manifest.extra_json.find("iterations"), std::string::npos);
}

TEST(Manifest, CorruptManifestIsParseError) {
  TempDir dir;
  put(dir / "m.json", "{not json");
  EXPECT_THROW(load_dataset(dir / "m.json"), ParseError);
  put(dir / "m.json", R"({"format_version": 1})");
  EXPECT_THROW(load_dataset(dir / "m.json"), ParseError);
  put(dir / "m.json", R"({"format_version": 9})");
  EXPECT_THROW(load_dataset(dir / "m.json"), ParseError);
}
