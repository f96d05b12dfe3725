#pragma once

// Interpretability outputs computed from a trained network and a labeled
// dataset: per-attribute channel statistics of the attention masks, Pearson
// correlation between channels and between attributes, channel-importance
// rankings, a region-based localization score against the dataset's
// ground-truth bitmaps, and deterministic file exports (PGM grids, a
// correlation heatmap, CSV matrices, and text tables).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mcam/data.hpp"
#include "mcam/io.hpp"
#include "mcam/model.hpp"

namespace mcam {

// Which per-channel scalar feeds the feature-correlation observations: the
// spatial mean of the attention mask itself (default), or the spatial mean
// of the attention-weighted features as a sensitivity alternative.
enum class CorrelationSignal { mask_mean, masked_feature_mean };

inline const char* correlation_signal_name(CorrelationSignal s) {
  return s == CorrelationSignal::mask_mean ? "mask_mean" : "masked_feature_mean";
}

// ---------------------------------------------------------------------------
// Mask statistics

// Mean mask activation per (attribute, channel), over samples and spatial
// positions.  Row k is attribute k's importance vector over the C channels.
struct ChannelMaskStats {
  int64_t num_attributes = 0;
  int64_t num_channels = 0;
  std::vector<double> mean;  // [K * C], row-major

  double at(int64_t k, int64_t c) const {
    return mean[static_cast<size_t>(k * num_channels + c)];
  }
};

// One row per (sample, attribute) pair in sample-major order; column c holds
// that pair's spatial-mean scalar for channel c.
struct MaskObservations {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> values;  // [rows * cols]
};

// Per-channel mean mask value inside and outside one region bitmap.
struct RegionMeans {
  std::vector<double> inside, outside;
};

inline RegionMeans region_means(std::span<const double> planes, int64_t channels,
                                std::span<const unsigned char> region) {
  const int64_t hw = static_cast<int64_t>(region.size());
  detail::check(static_cast<int64_t>(planes.size()) == channels * hw,
                "region_means: plane buffer does not match channels x region size");
  int64_t inside_count = 0;
  for (unsigned char bit : region) inside_count += bit;
  detail::check(inside_count > 0, "region_means: region is empty");
  detail::check(inside_count < hw, "region_means: region covers the whole frame");
  RegionMeans out;
  out.inside.resize(static_cast<size_t>(channels));
  out.outside.resize(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) {
    double in_sum = 0.0, out_sum = 0.0;
    const double* plane = planes.data() + c * hw;
    for (int64_t t = 0; t < hw; ++t)
      (region[static_cast<size_t>(t)] ? in_sum : out_sum) += plane[t];
    out.inside[static_cast<size_t>(c)] = in_sum / static_cast<double>(inside_count);
    out.outside[static_cast<size_t>(c)] = out_sum / static_cast<double>(hw - inside_count);
  }
  return out;
}

// Everything a single pass over the dataset can provide: observation rows for
// the correlation matrices, and per-positive-sample region means for the
// localization score of each spatially localized attribute.
struct MaskSurveyEntry {
  int64_t sample = 0;
  int64_t attribute = 0;
  RegionMeans means;
};

struct MaskSurvey {
  MaskObservations mask_observations;    // spatial-mean mask values
  MaskObservations signal_observations;  // empty unless an alternative signal was requested
  std::vector<MaskSurveyEntry> region_means;

  const MaskObservations& correlation_observations() const {
    return signal_observations.rows > 0 ? signal_observations : mask_observations;
  }
};

inline MaskSurvey survey_masks(const Network& net, const Dataset& ds,
                               CorrelationSignal signal = CorrelationSignal::mask_mean,
                               int64_t batch_size = 32) {
  detail::check(ds.size() > 0, "survey_masks: dataset is empty");
  detail::check(ds.spec.num_attributes == net.config.num_attributes,
                "survey_masks: dataset has " + std::to_string(ds.spec.num_attributes) +
                    " attributes, network expects " +
                    std::to_string(net.config.num_attributes));
  detail::check(ds.spec.image_size == net.config.image_size,
                "survey_masks: dataset image size " + std::to_string(ds.spec.image_size) +
                    " != network image size " + std::to_string(net.config.image_size));
  const int64_t k_count = net.config.num_attributes;
  const int64_t channels = net.config.feature_channels;
  const int64_t hw = net.config.image_size * net.config.image_size;
  const bool wants_signal = signal != CorrelationSignal::mask_mean;

  MaskSurvey survey;
  survey.mask_observations.rows = ds.size() * k_count;
  survey.mask_observations.cols = channels;
  survey.mask_observations.values.resize(
      static_cast<size_t>(survey.mask_observations.rows * channels));
  if (wants_signal) {
    survey.signal_observations = survey.mask_observations;
  }

  auto spatial_means = [&](const Tensor& maps, int64_t b, double* row) {
    const double* base = maps.data().data() + b * channels * hw;
    for (int64_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (int64_t t = 0; t < hw; ++t) s += base[c * hw + t];
      row[c] = s / static_cast<double>(hw);
    }
  };

  for (const SampleBatch& batch : sequential_batches(ds, batch_size)) {
    Graph g(Graph::Mode::no_grad);
    const Tensor features = extract_features(g, net, batch.images);
    const int64_t b_count = batch.images.dim(0);
    for (int64_t k = 0; k < k_count; ++k) {
      Tensor mask = attention_mask(g, net, features, k);
      Tensor signal_maps = wants_signal ? apply_attention(g, features, mask) : mask;
      for (int64_t b = 0; b < b_count; ++b) {
        const int64_t sample = batch.indices[static_cast<size_t>(b)];
        const int64_t row = sample * k_count + k;
        spatial_means(mask, b,
                      survey.mask_observations.values.data() + row * channels);
        if (wants_signal)
          spatial_means(signal_maps, b,
                        survey.signal_observations.values.data() + row * channels);
        if (attribute::spatially_localized(k) &&
            batch.labels.data()[b * k_count + k] == 1.0) {
          const Sample& s = ds.samples[static_cast<size_t>(sample)];
          std::span<const double> planes(mask.data().data() + b * channels * hw,
                                         static_cast<size_t>(channels * hw));
          survey.region_means.push_back(
              {sample, k, region_means(planes, channels, s.regions[static_cast<size_t>(k)])});
        }
      }
    }
  }
  // Canonical sample-major order, so the survey does not depend on batching.
  std::sort(survey.region_means.begin(), survey.region_means.end(),
            [](const MaskSurveyEntry& a, const MaskSurveyEntry& b) {
              return a.sample != b.sample ? a.sample < b.sample : a.attribute < b.attribute;
            });
  return survey;
}

inline ChannelMaskStats channel_mask_stats(const MaskObservations& obs, int64_t num_attributes) {
  detail::check(num_attributes >= 1, "channel_mask_stats: need at least one attribute");
  detail::check(obs.rows > 0 && obs.rows % num_attributes == 0,
                "channel_mask_stats: " + std::to_string(obs.rows) +
                    " observation rows are not a multiple of " +
                    std::to_string(num_attributes) + " attributes");
  ChannelMaskStats stats;
  stats.num_attributes = num_attributes;
  stats.num_channels = obs.cols;
  stats.mean.assign(static_cast<size_t>(num_attributes * obs.cols), 0.0);
  const int64_t samples = obs.rows / num_attributes;
  for (int64_t row = 0; row < obs.rows; ++row) {
    const int64_t k = row % num_attributes;
    const double* src = obs.values.data() + row * obs.cols;
    double* dst = stats.mean.data() + k * obs.cols;
    for (int64_t c = 0; c < obs.cols; ++c) dst[c] += src[c];
  }
  for (double& v : stats.mean) v /= static_cast<double>(samples);
  return stats;
}

inline ChannelMaskStats compute_channel_mask_stats(const Network& net, const Dataset& ds,
                                                   int64_t batch_size = 32) {
  return channel_mask_stats(survey_masks(net, ds, CorrelationSignal::mask_mean, batch_size)
                                .mask_observations,
                            net.config.num_attributes);
}

// ---------------------------------------------------------------------------
// Pearson correlation

struct CorrelationMatrix {
  int64_t size = 0;
  std::vector<double> r;  // [size * size]; missing entries are NaN
  std::vector<std::string> warnings;

  double at(int64_t i, int64_t j) const { return r[static_cast<size_t>(i * size + j)]; }
};

namespace detail {

// Sums of squares below this are treated as zero variance: observation
// scalars here live in (0,1), so anything smaller can only be centering
// round-off of a constant column.
inline constexpr double kVarianceFloor = 1e-24;

}  // namespace detail

// Pearson coefficients between the columns of a row-major [rows x cols]
// observation matrix.  Zero-variance columns yield NaN entries (including
// the diagonal) plus a warning naming the column; `label` names the variable
// kind in those warnings.
inline CorrelationMatrix pearson_matrix(std::span<const double> data, int64_t rows, int64_t cols,
                                        const std::string& label = "column") {
  detail::check(rows >= 2, "pearson_matrix: need at least 2 observations, got " +
                               std::to_string(rows));
  detail::check(cols >= 1, "pearson_matrix: need at least 1 variable");
  detail::check(static_cast<int64_t>(data.size()) == rows * cols,
                "pearson_matrix: buffer size does not match rows x cols");
  for (double v : data)
    detail::check(std::isfinite(v), "pearson_matrix: non-finite observation");

  std::vector<double> mean(static_cast<size_t>(cols), 0.0);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) mean[static_cast<size_t>(j)] += data[static_cast<size_t>(i * cols + j)];
  for (double& m : mean) m /= static_cast<double>(rows);

  std::vector<double> centered(data.size());
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j)
      centered[static_cast<size_t>(i * cols + j)] =
          data[static_cast<size_t>(i * cols + j)] - mean[static_cast<size_t>(j)];

  // One GEMM gives every pairwise sum of centered products.
  detail::ConstMatMap x(centered.data(), rows, cols);
  detail::RowMat s(cols, cols);
  s.noalias() = x.transpose() * x;

  CorrelationMatrix out;
  out.size = cols;
  out.r.assign(static_cast<size_t>(cols * cols), 0.0);
  std::vector<double> stddev(static_cast<size_t>(cols), 0.0);
  std::vector<bool> missing(static_cast<size_t>(cols), false);
  for (int64_t j = 0; j < cols; ++j) {
    const double var_sum = s(j, j);
    if (var_sum < detail::kVarianceFloor) {
      missing[static_cast<size_t>(j)] = true;
      out.warnings.push_back(label + " " + std::to_string(j) +
                             " has zero variance; its correlations are recorded as missing");
    } else {
      stddev[static_cast<size_t>(j)] = std::sqrt(var_sum);
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int64_t i = 0; i < cols; ++i) {
    for (int64_t j = i; j < cols; ++j) {
      double value;
      if (missing[static_cast<size_t>(i)] || missing[static_cast<size_t>(j)])
        value = nan;
      else if (i == j)
        value = 1.0;
      else
        value = std::clamp(s(i, j) / (stddev[static_cast<size_t>(i)] * stddev[static_cast<size_t>(j)]),
                           -1.0, 1.0);
      out.r[static_cast<size_t>(i * cols + j)] = value;
      out.r[static_cast<size_t>(j * cols + i)] = value;
    }
  }
  return out;
}

inline CorrelationMatrix feature_correlation(const MaskObservations& obs) {
  return pearson_matrix(obs.values, obs.rows, obs.cols, "channel");
}

// Pearson between the attributes' importance vectors, observed across the
// C channels.
inline CorrelationMatrix attribute_correlation(const ChannelMaskStats& stats) {
  detail::check(stats.num_attributes >= 2,
                "attribute_correlation: need at least 2 attributes");
  std::vector<double> transposed(stats.mean.size());
  for (int64_t c = 0; c < stats.num_channels; ++c)
    for (int64_t k = 0; k < stats.num_attributes; ++k)
      transposed[static_cast<size_t>(c * stats.num_attributes + k)] = stats.at(k, c);
  return pearson_matrix(transposed, stats.num_channels, stats.num_attributes, "attribute");
}

// ---------------------------------------------------------------------------
// Rankings

struct RankedChannel {
  int64_t id = 0;
  double score = 0.0;
};

// Channels ranked by mean mask activation for attribute k, descending; exact
// ties broken by ascending channel ID.
inline std::vector<RankedChannel> channel_importance(const ChannelMaskStats& stats, int64_t k,
                                                     int64_t top_n = 3) {
  detail::check(k >= 0 && k < stats.num_attributes,
                "channel_importance: attribute " + std::to_string(k) + " out of range");
  detail::check(top_n >= 1 && top_n <= stats.num_channels,
                "channel_importance: top_n must be in [1, C]");
  std::vector<RankedChannel> ranked;
  ranked.reserve(static_cast<size_t>(stats.num_channels));
  for (int64_t c = 0; c < stats.num_channels; ++c) ranked.push_back({c, stats.at(k, c)});
  std::sort(ranked.begin(), ranked.end(), [](const RankedChannel& a, const RankedChannel& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  ranked.resize(static_cast<size_t>(top_n));
  return ranked;
}

// The n largest finite off-diagonal coefficients of the target's row,
// descending, ties by ascending ID; missing entries are skipped, so fewer
// than n results are possible.
inline std::vector<RankedChannel> top_correlated(const CorrelationMatrix& m, int64_t target,
                                                 int64_t n) {
  detail::check(target >= 0 && target < m.size,
                "top_correlated: target " + std::to_string(target) + " out of range");
  detail::check(n >= 1 && n < m.size, "top_correlated: n must be in [1, size)");
  std::vector<RankedChannel> ranked;
  for (int64_t j = 0; j < m.size; ++j) {
    const double r = m.at(target, j);
    if (j != target && std::isfinite(r)) ranked.push_back({j, r});
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedChannel& a, const RankedChannel& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  if (static_cast<int64_t>(ranked.size()) > n) ranked.resize(static_cast<size_t>(n));
  return ranked;
}

// ---------------------------------------------------------------------------
// Localization score

struct LocalizationScore {
  int64_t attribute = -1;
  int64_t positives = 0;
  std::vector<int64_t> channels;  // the channels that were scored
  double inside_mean = 0.0;
  double outside_mean = 0.0;
  double ratio = 0.0;          // inside_mean / outside_mean
  double pass_fraction = 0.0;  // share of positives with per-sample ratio > threshold
};

inline LocalizationScore localization_from_means(int64_t attribute,
                                                 const std::vector<RegionMeans>& positives,
                                                 const std::vector<int64_t>& channels,
                                                 double ratio_threshold) {
  detail::check(!positives.empty(), "localization: no positive samples for attribute " +
                                        std::to_string(attribute));
  detail::check(!channels.empty(), "localization: empty channel list");
  LocalizationScore score;
  score.attribute = attribute;
  score.positives = static_cast<int64_t>(positives.size());
  score.channels = channels;
  int64_t passed = 0;
  for (const RegionMeans& rm : positives) {
    double inside = 0.0, outside = 0.0;
    for (int64_t c : channels) {
      inside += rm.inside[static_cast<size_t>(c)];
      outside += rm.outside[static_cast<size_t>(c)];
    }
    inside /= static_cast<double>(channels.size());
    outside /= static_cast<double>(channels.size());
    score.inside_mean += inside;
    score.outside_mean += outside;
    if (inside / outside > ratio_threshold) ++passed;
  }
  score.inside_mean /= static_cast<double>(positives.size());
  score.outside_mean /= static_cast<double>(positives.size());
  score.ratio = score.inside_mean / score.outside_mean;
  score.pass_fraction = static_cast<double>(passed) / static_cast<double>(positives.size());
  return score;
}

inline constexpr double kLocalizationRatioThreshold = 1.3;

inline LocalizationScore localization_score(const Network& net, const Dataset& ds, int64_t k,
                                            double ratio_threshold = kLocalizationRatioThreshold,
                                            int64_t top_n = 3, int64_t batch_size = 32) {
  detail::check(k >= 0 && k < net.config.num_attributes,
                "localization_score: attribute " + std::to_string(k) + " out of range");
  detail::check(attribute::spatially_localized(k),
                "localization_score: attribute " + std::to_string(k) + " (" +
                    attribute::name(k) + ") is not spatially localized");
  const MaskSurvey survey = survey_masks(net, ds, CorrelationSignal::mask_mean, batch_size);
  const ChannelMaskStats stats =
      channel_mask_stats(survey.mask_observations, net.config.num_attributes);
  std::vector<int64_t> channels;
  for (const RankedChannel& rc : channel_importance(stats, k, top_n)) channels.push_back(rc.id);
  std::vector<RegionMeans> positives;
  for (const MaskSurveyEntry& e : survey.region_means)
    if (e.attribute == k) positives.push_back(e.means);
  return localization_from_means(k, positives, channels, ratio_threshold);
}

// ---------------------------------------------------------------------------
// Mean-mask grid rendering

struct MeanMaskGrid {
  int64_t attribute = 0;
  int64_t channels = 0;
  int64_t cols = 0, rows = 0;  // cols = ceil(sqrt(C)), rows = ceil(C / cols)
  std::vector<double> values;  // per channel, pre-normalization
  double min_value = 0.0, max_value = 0.0;
};

inline MeanMaskGrid mean_mask_grid(const ChannelMaskStats& stats, int64_t k) {
  detail::check(k >= 0 && k < stats.num_attributes,
                "mean_mask_grid: attribute " + std::to_string(k) + " out of range");
  MeanMaskGrid grid;
  grid.attribute = k;
  grid.channels = stats.num_channels;
  grid.cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(stats.num_channels))));
  grid.rows = (stats.num_channels + grid.cols - 1) / grid.cols;
  grid.values.assign(stats.mean.begin() + k * stats.num_channels,
                     stats.mean.begin() + (k + 1) * stats.num_channels);
  grid.min_value = *std::min_element(grid.values.begin(), grid.values.end());
  grid.max_value = *std::max_element(grid.values.begin(), grid.values.end());
  return grid;
}

inline MeanMaskGrid mean_mask_grid(const Network& net, const Dataset& ds, int64_t k,
                                   int64_t batch_size = 32) {
  return mean_mask_grid(compute_channel_mask_stats(net, ds, batch_size), k);
}

inline constexpr int64_t kGridCellPixels = 12;

// One square cell per channel, min-max normalized per grid (a constant grid
// renders as 0); cells past the last channel are a 1-pixel checkerboard so
// padding can never be mistaken for data.
inline std::vector<uint8_t> render_mask_grid(const MeanMaskGrid& grid) {
  const int64_t cell = kGridCellPixels;
  const int64_t width = grid.cols * cell, height = grid.rows * cell;
  std::vector<uint8_t> pixels(static_cast<size_t>(width * height), 0);
  const double span = grid.max_value - grid.min_value;
  for (int64_t cy = 0; cy < grid.rows; ++cy)
    for (int64_t cx = 0; cx < grid.cols; ++cx) {
      const int64_t c = cy * grid.cols + cx;
      for (int64_t y = 0; y < cell; ++y)
        for (int64_t x = 0; x < cell; ++x) {
          uint8_t v;
          if (c < grid.channels) {
            const double norm =
                span > 0.0 ? (grid.values[static_cast<size_t>(c)] - grid.min_value) / span : 0.0;
            v = static_cast<uint8_t>(std::lround(255.0 * norm));
          } else {
            v = ((x + y) % 2 == 0) ? 0 : 255;
          }
          pixels[static_cast<size_t>((cy * cell + y) * width + (cx * cell + x))] = v;
        }
    }
  return pixels;
}

inline std::string mask_grid_sidecar(const MeanMaskGrid& grid) {
  std::ostringstream os;
  os << "attribute=" << grid.attribute << "\n";
  os << "attribute_name=" << attribute::name(grid.attribute) << "\n";
  os << "channels=" << grid.channels << "\n";
  os << "grid_cols=" << grid.cols << "\n";
  os << "grid_rows=" << grid.rows << "\n";
  os << "padding_cells=" << (grid.cols * grid.rows - grid.channels) << "\n";
  os << "cell_pixels=" << kGridCellPixels << "\n";
  os << "min=" << format_double(grid.min_value) << "\n";
  os << "max=" << format_double(grid.max_value) << "\n";
  return os.str();
}

// Correlation heatmap: pixel (i,j) = round(255 * (1 - (r+1)/2)), so r = 1 is
// darkest (0) and r = -1 is white (255); missing entries render as 255.
inline std::vector<uint8_t> render_correlation_heatmap(const CorrelationMatrix& m) {
  std::vector<uint8_t> pixels(static_cast<size_t>(m.size * m.size), 255);
  for (int64_t i = 0; i < m.size; ++i)
    for (int64_t j = 0; j < m.size; ++j) {
      const double r = m.at(i, j);
      if (std::isfinite(r))
        pixels[static_cast<size_t>(i * m.size + j)] =
            static_cast<uint8_t>(std::lround(255.0 * (1.0 - (r + 1.0) / 2.0)));
    }
  return pixels;
}

// ---------------------------------------------------------------------------
// Text and CSV renderings

namespace detail {

inline std::string two_decimals(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string four_decimals(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace detail

inline std::string correlation_csv(const CorrelationMatrix& m,
                                   const std::vector<std::string>& labels,
                                   const std::string& corner) {
  detail::check(static_cast<int64_t>(labels.size()) == m.size,
                "correlation_csv: label count does not match matrix size");
  std::ostringstream os;
  os << corner;
  for (const std::string& l : labels) os << ',' << l;
  os << "\n";
  for (int64_t i = 0; i < m.size; ++i) {
    os << labels[static_cast<size_t>(i)];
    for (int64_t j = 0; j < m.size; ++j) os << ',' << format_double(m.at(i, j));
    os << "\n";
  }
  return os.str();
}

inline std::string mask_stats_csv(const ChannelMaskStats& stats) {
  std::ostringstream os;
  os << "attribute";
  for (int64_t c = 0; c < stats.num_channels; ++c) os << ',' << c;
  os << "\n";
  for (int64_t k = 0; k < stats.num_attributes; ++k) {
    os << attribute::name(k);
    for (int64_t c = 0; c < stats.num_channels; ++c) os << ',' << format_double(stats.at(k, c));
    os << "\n";
  }
  return os.str();
}

// "17 (0.98), 5 (0.91), ..." in the style of the correlation tables.
inline std::string ranked_ids_line(const std::vector<RankedChannel>& ranked) {
  std::ostringstream os;
  for (size_t i = 0; i < ranked.size(); ++i) {
    if (i) os << ", ";
    os << ranked[i].id << " (" << detail::two_decimals(ranked[i].score) << ")";
  }
  return os.str();
}

inline std::string localization_csv(const std::vector<LocalizationScore>& scores) {
  std::ostringstream os;
  os << "attribute,name,positives,inside_mean,outside_mean,ratio,pass_fraction\n";
  for (const LocalizationScore& s : scores) {
    os << s.attribute << ',' << attribute::name(s.attribute) << ',' << s.positives << ','
       << format_double(s.inside_mean) << ',' << format_double(s.outside_mean) << ','
       << format_double(s.ratio) << ',' << format_double(s.pass_fraction) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Full report

struct AnalysisReport {
  ChannelMaskStats stats;
  std::vector<MeanMaskGrid> grids;  // one per attribute
  CorrelationMatrix feature_corr;
  CorrelationMatrix attribute_corr;
  std::vector<std::vector<RankedChannel>> top_channels;    // per attribute, top 3
  std::vector<std::vector<RankedChannel>> top_attributes;  // per attribute, top min(5, K-1)
  std::vector<LocalizationScore> localization;             // localized attributes with positives
  std::vector<std::string> warnings;
  std::string provenance;  // key=value lines; no timestamps, so exports are reproducible
};

inline constexpr int64_t kTopChannels = 3;

inline AnalysisReport analyze(const Network& net, const Dataset& ds,
                              CorrelationSignal signal = CorrelationSignal::mask_mean,
                              int64_t batch_size = 32) {
  detail::check(net.config.num_attributes >= 2,
                "analyze: the correlation report needs at least 2 attributes");
  const MaskSurvey survey = survey_masks(net, ds, signal, batch_size);
  const int64_t k_count = net.config.num_attributes;

  AnalysisReport report;
  report.stats = channel_mask_stats(survey.mask_observations, k_count);
  for (int64_t k = 0; k < k_count; ++k) report.grids.push_back(mean_mask_grid(report.stats, k));

  report.feature_corr = feature_correlation(survey.correlation_observations());
  for (const std::string& w : report.feature_corr.warnings)
    report.warnings.push_back("feature correlation: " + w);
  report.attribute_corr = attribute_correlation(report.stats);
  for (const std::string& w : report.attribute_corr.warnings)
    report.warnings.push_back("attribute correlation: " + w);

  const int64_t top_attr_n = std::min<int64_t>(5, k_count - 1);
  for (int64_t k = 0; k < k_count; ++k) {
    report.top_channels.push_back(
        channel_importance(report.stats, k, std::min(kTopChannels, report.stats.num_channels)));
    report.top_attributes.push_back(top_correlated(report.attribute_corr, k, top_attr_n));
  }

  for (int64_t k = 0; k < k_count; ++k) {
    if (!attribute::spatially_localized(k)) continue;
    std::vector<RegionMeans> positives;
    for (const MaskSurveyEntry& e : survey.region_means)
      if (e.attribute == k) positives.push_back(e.means);
    if (positives.empty()) {
      report.warnings.push_back("localization: attribute " + std::to_string(k) + " (" +
                                attribute::name(k) + ") has no positive samples; skipped");
      continue;
    }
    std::vector<int64_t> channels;
    for (const RankedChannel& rc : report.top_channels[static_cast<size_t>(k)])
      channels.push_back(rc.id);
    report.localization.push_back(
        localization_from_means(k, positives, channels, kLocalizationRatioThreshold));
  }

  char checksum[24];
  std::snprintf(checksum, sizeof checksum, "%016llx",
                static_cast<unsigned long long>(net.parameter_checksum()));
  std::ostringstream prov;
  prov << "parameter_checksum=" << checksum << "\n";
  prov << "network_seed=" << net.config.seed << "\n";
  prov << "network_image_size=" << net.config.image_size << "\n";
  prov << "network_feature_channels=" << net.config.feature_channels << "\n";
  prov << "network_num_attributes=" << net.config.num_attributes << "\n";
  prov << "dataset_seed=" << ds.spec.seed << "\n";
  prov << "dataset_split=" << split_name(ds.split) << "\n";
  prov << "dataset_samples=" << ds.size() << "\n";
  prov << "dataset_image_size=" << ds.spec.image_size << "\n";
  prov << "dataset_noise_stddev=" << format_double(ds.spec.noise_stddev) << "\n";
  prov << "correlation_signal=" << correlation_signal_name(signal) << "\n";
  report.provenance = prov.str();
  return report;
}

// Writes every artifact of a report into `dir`; rerunning on the same report
// produces byte-identical files.
inline void export_report(const AnalysisReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  for (const MeanMaskGrid& grid : report.grids) {
    const std::string stem =
        "mask_grid_" + std::to_string(grid.attribute) + "_" + attribute::name(grid.attribute);
    write_pgm(dir / (stem + ".pgm"), grid.cols * kGridCellPixels, grid.rows * kGridCellPixels,
              render_mask_grid(grid));
    write_text_file(dir / (stem + ".txt"), mask_grid_sidecar(grid));
  }

  write_text_file(dir / "mask_means.csv", mask_stats_csv(report.stats));

  std::vector<std::string> channel_labels;
  for (int64_t c = 0; c < report.feature_corr.size; ++c)
    channel_labels.push_back(std::to_string(c));
  write_text_file(dir / "feature_correlation.csv",
                  correlation_csv(report.feature_corr, channel_labels, "channel"));
  write_pgm(dir / "feature_correlation.pgm", report.feature_corr.size, report.feature_corr.size,
            render_correlation_heatmap(report.feature_corr));

  std::vector<std::string> attr_labels;
  for (int64_t k = 0; k < report.attribute_corr.size; ++k)
    attr_labels.push_back(attribute::name(k));
  write_text_file(dir / "attribute_correlation.csv",
                  correlation_csv(report.attribute_corr, attr_labels, "attribute"));

  // Per-attribute top channels (the figure-style ranking, scores at 4
  // decimals since mask means are close together).
  std::ostringstream importance;
  for (int64_t k = 0; k < report.stats.num_attributes; ++k) {
    importance << attribute::name(k) << ":";
    for (const RankedChannel& rc : report.top_channels[static_cast<size_t>(k)])
      importance << " " << rc.id << " (" << detail::four_decimals(rc.score) << ")";
    importance << "\n";
  }
  write_text_file(dir / "channel_importance.txt", importance.str());

  // Per-target top correlated channels, targets being every channel that
  // appears in some attribute's top list.
  std::vector<int64_t> targets;
  for (const auto& ranked : report.top_channels)
    for (const RankedChannel& rc : ranked) targets.push_back(rc.id);
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  std::ostringstream features;
  const int64_t top_feature_n = std::min<int64_t>(5, report.feature_corr.size - 1);
  for (int64_t t : targets)
    features << "target " << t << ": "
             << ranked_ids_line(top_correlated(report.feature_corr, t, top_feature_n)) << "\n";
  write_text_file(dir / "top_features.txt", features.str());

  std::ostringstream attrs;
  for (int64_t k = 0; k < report.stats.num_attributes; ++k) {
    attrs << attribute::name(k) << ":";
    const auto& ranked = report.top_attributes[static_cast<size_t>(k)];
    for (size_t i = 0; i < ranked.size(); ++i)
      attrs << (i ? ", " : " ") << attribute::name(ranked[i].id) << " ("
            << detail::two_decimals(ranked[i].score) << ")";
    attrs << "\n";
  }
  write_text_file(dir / "top_attributes.txt", attrs.str());

  write_text_file(dir / "localization.csv", localization_csv(report.localization));

  std::ostringstream warn;
  for (const std::string& w : report.warnings) warn << w << "\n";
  write_text_file(dir / "warnings.txt", warn.str());

  write_text_file(dir / "provenance.txt", report.provenance);
}

}  // namespace mcam
