#pragma once

// Synthetic attribute dataset: grayscale images containing independent
// binary attributes, each with a ground-truth support region.
//
//   0 circle          filled disc, region = its bounding box
//   1 square          filled square, region = the square
//   2 horizontal_bar  bar inside the top third, region = exact bar pixels
//   3 vertical_bar    bar inside the left third, region = exact bar pixels
//   4 bright_background  pre-noise background level >= 0.6, full-frame region
//   5 inverted_contrast  glyphs darker than background, full-frame region
//
// All six factors are always sampled and rendered (so images look the same
// whatever num_attributes selects); the first num_attributes of them are
// exposed as labels/regions.  Background levels are drawn from
// [0.62, 0.88] or [0.17, 0.58], leaving a gap around the 0.6 threshold, and
// each glyph's contrast is drawn independently and clamped to the available
// headroom so shapes stay at least ~0.07 away from the background even in
// the worst case.  Glyphs are kept disjoint: the horizontal bar runs right
// of the vertical bar's column range, the vertical bar below the horizontal
// bar's row range, and discs/squares are placed by seeded rejection against
// everything already placed (if no free spot is found the last candidate is
// used, so generation always terminates).  When no glyph attribute is
// positive a small 2x2 dot (no label, no region) is drawn so
// inverted_contrast stays observable on otherwise empty images.
//
// Sample i of a split is generated from its own RNG stream derived from
// (seed, split, i): content is independent of generation order and of
// num_samples, and the train/test streams never overlap.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcam/io.hpp"
#include "mcam/random.hpp"
#include "mcam/tensor.hpp"

namespace mcam {

enum class Split : uint8_t { train = 0, test = 1 };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

namespace attribute {

inline constexpr int64_t kCircle = 0;
inline constexpr int64_t kSquare = 1;
inline constexpr int64_t kHorizontalBar = 2;
inline constexpr int64_t kVerticalBar = 3;
inline constexpr int64_t kBrightBackground = 4;
inline constexpr int64_t kInvertedContrast = 5;
inline constexpr int64_t kCount = 6;

inline const char* name(int64_t k) {
  constexpr const char* kNames[] = {"circle",       "square",            "horizontal_bar",
                                    "vertical_bar", "bright_background", "inverted_contrast"};
  detail::check(k >= 0 && k < kCount, "attribute index " + std::to_string(k) + " out of range");
  return kNames[k];
}

// Attributes with a meaningful sub-frame support region.
inline bool spatially_localized(int64_t k) { return k >= 0 && k < 4; }

}  // namespace attribute

struct DatasetSpec {
  int64_t num_samples = 2000;
  int64_t image_size = 32;
  int64_t num_attributes = 6;
  double noise_stddev = 0.05;
  uint64_t seed = 0;

  bool operator==(const DatasetSpec&) const = default;

  void validate() const {
    detail::check(num_samples >= 1, "dataset: num_samples must be >= 1");
    detail::check(image_size >= 16, "dataset: image_size must be >= 16 for the glyph geometry");
    detail::check(num_attributes >= 1 && num_attributes <= attribute::kCount,
                  "dataset: num_attributes must be in [1," +
                      std::to_string(attribute::kCount) + "]");
    detail::check(noise_stddev >= 0.0 && noise_stddev <= 0.2,
                  "dataset: noise_stddev must be in [0, 0.2]");
  }
};

struct Sample {
  std::vector<float> image;                   // image_size^2, row-major, [0,1]
  std::vector<uint8_t> labels;                // num_attributes, {0,1}
  std::vector<std::vector<uint8_t>> regions;  // num_attributes bitmaps (0/1 per pixel)
};

struct Dataset {
  DatasetSpec spec;
  Split split = Split::train;
  std::vector<Sample> samples;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
};

namespace detail {

inline constexpr uint64_t kSampleSaltTrain = 0x64735f747261696eull;  // 'ds_train'
inline constexpr uint64_t kSampleSaltTest = 0x64735f74657374ull;     // 'ds_test'

inline uint64_t sample_stream(uint64_t seed, Split split, int64_t index) {
  const uint64_t salt = split == Split::train ? kSampleSaltTrain : kSampleSaltTest;
  return hash_mix(seed, salt, static_cast<uint64_t>(index));
}

struct Factors {
  bool circle, square, hbar, vbar, bright, inverted;
  double background;
  double circle_contrast, square_contrast, hbar_contrast, vbar_contrast, dot_contrast;
  int64_t circle_r, circle_cx, circle_cy;
  int64_t square_side, square_x0, square_y0;
  int64_t hbar_t, hbar_r0, hbar_x0, hbar_x1;
  int64_t vbar_t, vbar_c0, vbar_y0, vbar_y1;
  int64_t dot_x0, dot_y0;
  bool has_dot;
};

struct Box {  // inclusive pixel bounds
  int64_t y0, x0, y1, x1;
};

inline bool boxes_overlap(const Box& a, const Box& b) {
  return a.y0 <= b.y1 && b.y0 <= a.y1 && a.x0 <= b.x1 && b.x0 <= a.x1;
}

// One fixed draw order so every sample is reproducible from its stream.
inline Factors draw_factors(Rng& rng, int64_t s) {
  Factors f{};
  f.circle = rng.bernoulli(0.5);
  f.square = rng.bernoulli(0.5);
  f.hbar = rng.bernoulli(0.5);
  f.vbar = rng.bernoulli(0.5);
  f.bright = rng.bernoulli(0.5);
  f.background = f.bright ? rng.uniform(0.62, 0.88) : rng.uniform(0.17, 0.58);
  f.inverted = rng.bernoulli(0.5);

  const int64_t third = s / 3;
  std::vector<Box> placed;
  // Bars first: lanes are disjoint by construction (the horizontal bar stays
  // right of the left third, the vertical bar below the top third).
  if (f.hbar) {
    f.hbar_t = rng.uniform_int(2, 3);
    f.hbar_r0 = rng.uniform_int(0, third - f.hbar_t);
    f.hbar_x0 = third + 1 + rng.uniform_int(0, s / 8);
    f.hbar_x1 = s - 1 - rng.uniform_int(0, s / 8);
    f.hbar_contrast = rng.uniform(0.25, 0.45);
    placed.push_back({f.hbar_r0, f.hbar_x0, f.hbar_r0 + f.hbar_t - 1, f.hbar_x1});
  }
  if (f.vbar) {
    f.vbar_t = rng.uniform_int(2, 3);
    f.vbar_c0 = rng.uniform_int(0, third - f.vbar_t);
    f.vbar_y0 = third + 1 + rng.uniform_int(0, s / 8);
    f.vbar_y1 = s - 1 - rng.uniform_int(0, s / 8);
    f.vbar_contrast = rng.uniform(0.25, 0.45);
    placed.push_back({f.vbar_y0, f.vbar_c0, f.vbar_y1, f.vbar_c0 + f.vbar_t - 1});
  }
  // Shapes by rejection with a 1px gap; the last candidate stands if every
  // attempt collided (does not happen at default geometry).
  auto place = [&](int64_t extent_y, int64_t extent_x, int64_t& y0, int64_t& x0) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      y0 = rng.uniform_int(1, s - 1 - extent_y);
      x0 = rng.uniform_int(1, s - 1 - extent_x);
      const Box margin{y0 - 1, x0 - 1, y0 + extent_y, x0 + extent_x};
      bool free = true;
      for (const Box& b : placed) free = free && !boxes_overlap(margin, b);
      if (free) break;
    }
    placed.push_back({y0, x0, y0 + extent_y - 1, x0 + extent_x - 1});
  };
  if (f.square) {
    const int64_t lo = std::max<int64_t>(5, 3 * s / 16);
    f.square_side = rng.uniform_int(lo, std::max(lo, 5 * s / 16));
    f.square_contrast = rng.uniform(0.25, 0.45);
    place(f.square_side, f.square_side, f.square_y0, f.square_x0);
  }
  if (f.circle) {
    const int64_t lo = std::max<int64_t>(3, s / 8);
    f.circle_r = rng.uniform_int(lo, std::max(lo, 7 * s / 32));
    f.circle_contrast = rng.uniform(0.25, 0.45);
    int64_t y0 = 0, x0 = 0;
    place(2 * f.circle_r + 1, 2 * f.circle_r + 1, y0, x0);
    f.circle_cy = y0 + f.circle_r;
    f.circle_cx = x0 + f.circle_r;
  }
  f.has_dot = !(f.circle || f.square || f.hbar || f.vbar);
  if (f.has_dot) {
    f.dot_x0 = rng.uniform_int(0, s - 2);
    f.dot_y0 = rng.uniform_int(0, s - 2);
    f.dot_contrast = rng.uniform(0.25, 0.45);
  }
  return f;
}

}  // namespace detail

// Deterministic: content depends only on (spec.seed, split, sample index).
inline Dataset generate_dataset(const DatasetSpec& spec, Split split) {
  spec.validate();
  const int64_t s = spec.image_size;
  const int64_t k = spec.num_attributes;
  Dataset ds;
  ds.spec = spec;
  ds.split = split;
  ds.samples.reserve(static_cast<size_t>(spec.num_samples));

  for (int64_t i = 0; i < spec.num_samples; ++i) {
    Rng rng(detail::sample_stream(spec.seed, split, i));
    const detail::Factors f = detail::draw_factors(rng, s);

    // Glyphs sit their contrast away from the background, clamped so they
    // stay inside [0.04, 0.96] with at least ~0.07 of separation.
    const double dir = f.inverted ? -1.0 : 1.0;
    const double headroom = f.inverted ? f.background - 0.04 : 0.96 - f.background;
    auto glyph_value = [&](double contrast) {
      return f.background + dir * std::min(contrast, headroom);
    };

    std::vector<double> canvas(static_cast<size_t>(s * s), f.background);
    Sample sample;
    sample.labels.assign(static_cast<size_t>(k), 0);
    sample.regions.assign(static_cast<size_t>(k),
                          std::vector<uint8_t>(static_cast<size_t>(s * s), 0));
    auto mark = [&](int64_t attr, int64_t y, int64_t x) {
      if (attr < k) sample.regions[static_cast<size_t>(attr)][static_cast<size_t>(y * s + x)] = 1;
    };

    if (f.hbar) {
      const double glyph = glyph_value(f.hbar_contrast);
      for (int64_t y = f.hbar_r0; y < f.hbar_r0 + f.hbar_t; ++y)
        for (int64_t x = f.hbar_x0; x <= f.hbar_x1; ++x) {
          mark(attribute::kHorizontalBar, y, x);
          canvas[static_cast<size_t>(y * s + x)] = glyph;
        }
    }
    if (f.vbar) {
      const double glyph = glyph_value(f.vbar_contrast);
      for (int64_t y = f.vbar_y0; y <= f.vbar_y1; ++y)
        for (int64_t x = f.vbar_c0; x < f.vbar_c0 + f.vbar_t; ++x) {
          mark(attribute::kVerticalBar, y, x);
          canvas[static_cast<size_t>(y * s + x)] = glyph;
        }
    }
    if (f.square) {
      const double glyph = glyph_value(f.square_contrast);
      for (int64_t y = f.square_y0; y < f.square_y0 + f.square_side; ++y)
        for (int64_t x = f.square_x0; x < f.square_x0 + f.square_side; ++x) {
          mark(attribute::kSquare, y, x);
          canvas[static_cast<size_t>(y * s + x)] = glyph;
        }
    }
    if (f.circle) {
      const double glyph = glyph_value(f.circle_contrast);
      for (int64_t y = f.circle_cy - f.circle_r; y <= f.circle_cy + f.circle_r; ++y)
        for (int64_t x = f.circle_cx - f.circle_r; x <= f.circle_cx + f.circle_r; ++x) {
          mark(attribute::kCircle, y, x);  // region: bounding box
          const int64_t dy = y - f.circle_cy, dx = x - f.circle_cx;
          if (dy * dy + dx * dx <= f.circle_r * f.circle_r)
            canvas[static_cast<size_t>(y * s + x)] = glyph;
        }
    }
    if (f.has_dot) {
      const double glyph = glyph_value(f.dot_contrast);
      for (int64_t y = f.dot_y0; y < f.dot_y0 + 2; ++y)
        for (int64_t x = f.dot_x0; x < f.dot_x0 + 2; ++x)
          canvas[static_cast<size_t>(y * s + x)] = glyph;
    }

    const bool flags[attribute::kCount] = {f.circle, f.square, f.hbar,
                                           f.vbar,   f.bright, f.inverted};
    for (int64_t a = 0; a < k; ++a) sample.labels[static_cast<size_t>(a)] = flags[a] ? 1 : 0;
    if (f.bright && attribute::kBrightBackground < k)
      std::fill(sample.regions[attribute::kBrightBackground].begin(),
                sample.regions[attribute::kBrightBackground].end(), uint8_t{1});
    if (f.inverted && attribute::kInvertedContrast < k)
      std::fill(sample.regions[attribute::kInvertedContrast].begin(),
                sample.regions[attribute::kInvertedContrast].end(), uint8_t{1});

    sample.image.resize(static_cast<size_t>(s * s));
    for (int64_t p = 0; p < s * s; ++p) {
      const double noisy = canvas[static_cast<size_t>(p)] + rng.normal(0.0, spec.noise_stddev);
      sample.image[static_cast<size_t>(p)] =
          static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

inline constexpr char kDatasetMagic[9] = "MCAMDS1";  // 7 chars + NUL = 8 bytes

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const int64_t s = ds.spec.image_size;
  const int64_t k = ds.spec.num_attributes;
  const size_t row_bytes = static_cast<size_t>((s + 7) / 8);
  detail::ByteWriter w;
  w.u32(1);  // format version
  w.u64(static_cast<uint64_t>(ds.samples.size()));
  w.u32(static_cast<uint32_t>(s));
  w.u32(static_cast<uint32_t>(k));
  w.u64(ds.spec.seed);
  w.u8(static_cast<uint8_t>(ds.split));
  w.f64(ds.spec.noise_stddev);
  for (const Sample& sample : ds.samples) {
    for (float v : sample.image) w.f32(v);
    for (uint8_t v : sample.labels) w.u8(v);
    for (const auto& region : sample.regions) {
      for (int64_t y = 0; y < s; ++y) {
        std::vector<unsigned char> packed(row_bytes, 0);
        for (int64_t x = 0; x < s; ++x)
          if (region[static_cast<size_t>(y * s + x)])
            packed[static_cast<size_t>(x / 8)] |= static_cast<unsigned char>(1u << (x % 8));
        w.raw(packed.data(), packed.size());
      }
    }
  }
  write_framed_file(path, kDatasetMagic, w.bytes());
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const std::vector<unsigned char> payload = read_framed_file(path, kDatasetMagic);
  detail::ByteReader r(payload);
  const uint32_t version = r.u32();
  if (version != 1)
    throw version_error(path.string() + ": unsupported dataset version " +
                        std::to_string(version));
  Dataset ds;
  const uint64_t count = r.u64();
  ds.spec.image_size = r.u32();
  ds.spec.num_attributes = r.u32();
  ds.spec.seed = r.u64();
  const uint8_t split = r.u8();
  if (split > 1) throw version_error(path.string() + ": unknown split tag");
  ds.split = static_cast<Split>(split);
  ds.spec.noise_stddev = r.f64();
  ds.spec.num_samples = static_cast<int64_t>(count);
  ds.spec.validate();

  const int64_t s = ds.spec.image_size;
  const int64_t k = ds.spec.num_attributes;
  const size_t row_bytes = static_cast<size_t>((s + 7) / 8);
  ds.samples.resize(count);
  for (Sample& sample : ds.samples) {
    sample.image.resize(static_cast<size_t>(s * s));
    for (float& v : sample.image) v = r.f32();
    sample.labels.resize(static_cast<size_t>(k));
    for (uint8_t& v : sample.labels) {
      v = r.u8();
      if (v > 1) throw checksum_error(path.string() + ": label byte out of range");
    }
    sample.regions.assign(static_cast<size_t>(k),
                          std::vector<uint8_t>(static_cast<size_t>(s * s), 0));
    for (auto& region : sample.regions) {
      std::vector<unsigned char> packed(row_bytes);
      for (int64_t y = 0; y < s; ++y) {
        r.raw(packed.data(), packed.size());
        for (int64_t x = 0; x < s; ++x)
          region[static_cast<size_t>(y * s + x)] =
              (packed[static_cast<size_t>(x / 8)] >> (x % 8)) & 1u;
      }
    }
  }
  if (r.remaining() != 0)
    throw checksum_error(path.string() + ": " + std::to_string(r.remaining()) +
                         " trailing bytes after samples");
  return ds;
}

struct SampleBatch {
  Tensor images;                 // [B, 1, S, S]
  Tensor labels;                 // [B, K] in {0,1}
  std::vector<int64_t> indices;  // dataset positions, for bookkeeping
};

namespace detail {

inline SampleBatch make_batch(const Dataset& ds, std::span<const int64_t> idx) {
  const int64_t s = ds.spec.image_size;
  const int64_t k = ds.spec.num_attributes;
  const int64_t b = static_cast<int64_t>(idx.size());
  SampleBatch batch;
  batch.images = Tensor::zeros({b, 1, s, s});
  batch.labels = Tensor::zeros({b, k});
  batch.indices.assign(idx.begin(), idx.end());
  auto img = batch.images.data();
  auto lab = batch.labels.data();
  for (int64_t row = 0; row < b; ++row) {
    const Sample& sample = ds.samples[static_cast<size_t>(idx[static_cast<size_t>(row)])];
    for (int64_t p = 0; p < s * s; ++p)
      img[row * s * s + p] = static_cast<double>(sample.image[static_cast<size_t>(p)]);
    for (int64_t a = 0; a < k; ++a)
      lab[row * k + a] = static_cast<double>(sample.labels[static_cast<size_t>(a)]);
  }
  return batch;
}

}  // namespace detail

// Shuffled mini-batches covering the dataset exactly once; the last batch may
// be short.  The same shuffle_seed always yields the same sequence.
inline std::vector<SampleBatch> batches(const Dataset& ds, int64_t batch_size,
                                        uint64_t shuffle_seed) {
  detail::check(batch_size >= 1, "batches: batch_size must be >= 1");
  detail::check(ds.size() > 0, "batches: dataset is empty");
  Rng rng(shuffle_seed);
  const std::vector<int64_t> order = permutation(ds.size(), rng);
  std::vector<SampleBatch> out;
  for (int64_t start = 0; start < ds.size(); start += batch_size) {
    const int64_t stop = std::min(ds.size(), start + batch_size);
    out.push_back(detail::make_batch(
        ds, std::span<const int64_t>(order.data() + start, static_cast<size_t>(stop - start))));
  }
  return out;
}

// Unshuffled batches in dataset order, for evaluation.
inline std::vector<SampleBatch> sequential_batches(const Dataset& ds, int64_t batch_size) {
  detail::check(batch_size >= 1, "batches: batch_size must be >= 1");
  detail::check(ds.size() > 0, "batches: dataset is empty");
  std::vector<int64_t> order(static_cast<size_t>(ds.size()));
  for (int64_t i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
  std::vector<SampleBatch> out;
  for (int64_t start = 0; start < ds.size(); start += batch_size) {
    const int64_t stop = std::min(ds.size(), start + batch_size);
    out.push_back(detail::make_batch(
        ds, std::span<const int64_t>(order.data() + start, static_cast<size_t>(stop - start))));
  }
  return out;
}

}  // namespace mcam
