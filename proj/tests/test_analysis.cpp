#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mcam/analysis.hpp"
#include "mcam/random.hpp"

namespace {

using namespace mcam;

std::filesystem::path temp_dir(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mcam_analysis_" + name);
}

std::string read_file_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXPECT_TRUE(in.good()) << p;
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

NetworkConfig tiny_network() {
  NetworkConfig c;
  c.image_size = 16;
  c.feature_channels = 8;
  c.num_attributes = 6;
  c.dilation_schedule = {1, 2};
  c.extractor_channels = {6};
  c.mask_hidden = 3;
  c.head_hidden = 4;
  c.recon_hidden = 3;
  return c;
}

DatasetSpec tiny_data_spec(int64_t samples, uint64_t seed) {
  DatasetSpec spec;
  spec.num_samples = samples;
  spec.image_size = 16;
  spec.num_attributes = 6;
  spec.seed = seed;
  return spec;
}

ChannelMaskStats make_stats(int64_t k, int64_t c, const std::vector<double>& values) {
  ChannelMaskStats stats;
  stats.num_attributes = k;
  stats.num_channels = c;
  stats.mean = values;
  return stats;
}

// Textbook two-pass Pearson for one column pair, used as the oracle.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const size_t n = x.size();
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// --------------------------------------------------------------------------
// Pearson matrix

TEST(PearsonTest, MatchesHandComputedExamples) {
  // Columns x = [1,2,3], y = [2,4,7]: r = 15 / sqrt(228).
  const std::vector<double> a = {1, 2, 2, 4, 3, 7};
  const CorrelationMatrix ma = pearson_matrix(a, 3, 2);
  EXPECT_NEAR(ma.at(0, 1), 0.9933992678, 1e-10);
  EXPECT_NEAR(ma.at(0, 1), 15.0 / std::sqrt(228.0), 1e-15);

  // Columns x = [1,2,3], y = [2,4,8]: r = 18 / sqrt(336).
  const std::vector<double> b = {1, 2, 2, 4, 3, 8};
  const CorrelationMatrix mb = pearson_matrix(b, 3, 2);
  EXPECT_NEAR(mb.at(0, 1), 0.9819805061, 1e-10);
  EXPECT_NEAR(mb.at(0, 1), 18.0 / std::sqrt(336.0), 1e-15);
}

TEST(PearsonTest, DuplicateAndNegatedColumns) {
  // Columns: x, x (duplicate), and 2*mean - x (negation about the mean).
  const std::vector<double> x = {0.2, 0.5, 0.9, 0.4};
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= 4.0;
  std::vector<double> data;
  for (double v : x) {
    data.push_back(v);
    data.push_back(v);
    data.push_back(2.0 * mean - v);
  }
  const CorrelationMatrix m = pearson_matrix(data, 4, 3);
  EXPECT_NEAR(m.at(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(m.at(0, 2), -1.0, 1e-15);
  EXPECT_TRUE(m.warnings.empty());
}

TEST(PearsonTest, MatchesTwoPassOracleOnSeededData) {
  const int64_t rows = 50, cols = 12;
  Rng rng(404);
  std::vector<double> data(static_cast<size_t>(rows * cols));
  for (double& v : data) v = rng.uniform01();
  const CorrelationMatrix m = pearson_matrix(data, rows, cols);
  for (int64_t i = 0; i < cols; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      std::vector<double> x, y;
      for (int64_t r = 0; r < rows; ++r) {
        x.push_back(data[static_cast<size_t>(r * cols + i)]);
        y.push_back(data[static_cast<size_t>(r * cols + j)]);
      }
      EXPECT_NEAR(m.at(i, j), pearson_oracle(x, y), 1e-12) << "(" << i << "," << j << ")";
    }
  }
}

TEST(PearsonTest, ExactlySymmetricWithUnitDiagonalAndClampedRange) {
  Rng rng(77);
  const int64_t rows = 9, cols = 6;
  std::vector<double> data(static_cast<size_t>(rows * cols));
  for (double& v : data) v = rng.normal();
  const CorrelationMatrix m = pearson_matrix(data, rows, cols);
  for (int64_t i = 0; i < cols; ++i) {
    EXPECT_EQ(m.at(i, i), 1.0);
    for (int64_t j = 0; j < cols; ++j) {
      EXPECT_EQ(m.at(i, j), m.at(j, i));
      EXPECT_GE(m.at(i, j), -1.0);
      EXPECT_LE(m.at(i, j), 1.0);
    }
  }
}

TEST(PearsonTest, ZeroVarianceColumnIsMissingWithWarning) {
  // Column 1 is constant; every entry touching it must be NaN, the rest
  // must be untouched.
  const std::vector<double> data = {1.0, 0.37, 5.0, 2.0, 0.37, 4.0, 3.0, 0.37, 9.0};
  const CorrelationMatrix m = pearson_matrix(data, 3, 3, "channel");
  EXPECT_TRUE(std::isnan(m.at(0, 1)));
  EXPECT_TRUE(std::isnan(m.at(1, 1)));
  EXPECT_TRUE(std::isnan(m.at(1, 2)));
  EXPECT_TRUE(std::isfinite(m.at(0, 2)));
  EXPECT_EQ(m.at(0, 0), 1.0);
  ASSERT_EQ(m.warnings.size(), 1u);
  EXPECT_NE(m.warnings[0].find("channel 1"), std::string::npos);
  EXPECT_NE(m.warnings[0].find("zero variance"), std::string::npos);
}

TEST(PearsonTest, RejectsBadInputs) {
  EXPECT_THROW(pearson_matrix(std::vector<double>{1.0, 2.0}, 1, 2), std::invalid_argument);
  EXPECT_THROW(pearson_matrix(std::vector<double>{1.0, 2.0, 3.0}, 2, 2), std::invalid_argument);
  const std::vector<double> bad = {1.0, std::numeric_limits<double>::infinity(), 2.0, 3.0};
  EXPECT_THROW(pearson_matrix(bad, 2, 2), std::invalid_argument);
}

// --------------------------------------------------------------------------
// Mask statistics

TEST(MaskStatsTest, AveragesObservationRowsPerAttribute) {
  // Two samples, two attributes, three channels, sample-major rows.
  MaskObservations obs;
  obs.rows = 4;
  obs.cols = 3;
  obs.values = {1, 2, 3,   // sample 0, attribute 0
                4, 5, 6,   // sample 0, attribute 1
                3, 4, 5,   // sample 1, attribute 0
                6, 7, 8};  // sample 1, attribute 1
  const ChannelMaskStats stats = channel_mask_stats(obs, 2);
  EXPECT_EQ(stats.num_attributes, 2);
  EXPECT_EQ(stats.num_channels, 3);
  EXPECT_DOUBLE_EQ(stats.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(stats.at(0, 1), 3.0);
  EXPECT_DOUBLE_EQ(stats.at(0, 2), 4.0);
  EXPECT_DOUBLE_EQ(stats.at(1, 0), 5.0);
  EXPECT_DOUBLE_EQ(stats.at(1, 1), 6.0);
  EXPECT_DOUBLE_EQ(stats.at(1, 2), 7.0);

  EXPECT_THROW(channel_mask_stats(obs, 3), std::invalid_argument);
}

TEST(MaskStatsTest, SurveyMatchesDirectMaskComputation) {
  const Dataset ds = generate_dataset(tiny_data_spec(6, 5), Split::test);
  const Network net = init_network(tiny_network());
  const MaskSurvey survey = survey_masks(net, ds, CorrelationSignal::mask_mean, 4);

  const int64_t k_count = net.config.num_attributes;
  const int64_t channels = net.config.feature_channels;
  const int64_t hw = net.config.image_size * net.config.image_size;
  ASSERT_EQ(survey.mask_observations.rows, ds.size() * k_count);
  ASSERT_EQ(survey.mask_observations.cols, channels);

  // Recompute sample 3's attribute-2 row straight from the model.
  const int64_t sample = 3, k = 2;
  std::vector<SampleBatch> all = sequential_batches(ds, ds.size());
  Graph g(Graph::Mode::no_grad);
  Tensor features = extract_features(g, net, all[0].images);
  Tensor mask = attention_mask(g, net, features, k);
  for (int64_t c = 0; c < channels; ++c) {
    double s = 0.0;
    const double* plane = mask.data().data() + (sample * channels + c) * hw;
    for (int64_t t = 0; t < hw; ++t) s += plane[t];
    EXPECT_EQ(survey.mask_observations.values[static_cast<size_t>(
                  (sample * k_count + k) * channels + c)],
              s / static_cast<double>(hw))
        << "channel " << c;
  }
}

TEST(MaskStatsTest, SurveyIsDeterministicAndBatchSizeInvariant) {
  const Dataset ds = generate_dataset(tiny_data_spec(10, 6), Split::test);
  const Network net = init_network(tiny_network());
  const MaskSurvey a = survey_masks(net, ds, CorrelationSignal::mask_mean, 64);
  const MaskSurvey b = survey_masks(net, ds, CorrelationSignal::mask_mean, 3);
  EXPECT_EQ(a.mask_observations.values, b.mask_observations.values);
  ASSERT_EQ(a.region_means.size(), b.region_means.size());
  for (size_t i = 0; i < a.region_means.size(); ++i) {
    EXPECT_EQ(a.region_means[i].sample, b.region_means[i].sample);
    EXPECT_EQ(a.region_means[i].attribute, b.region_means[i].attribute);
    EXPECT_EQ(a.region_means[i].means.inside, b.region_means[i].means.inside);
    EXPECT_EQ(a.region_means[i].means.outside, b.region_means[i].means.outside);
  }

  // One region entry per positive label of each spatially localized attribute.
  size_t expected = 0;
  for (const Sample& s : ds.samples)
    for (int64_t k = 0; k < 4; ++k) expected += s.labels[static_cast<size_t>(k)];
  EXPECT_EQ(a.region_means.size(), expected);
}

TEST(MaskStatsTest, StatsOfSigmoidMasksLieInOpenUnitInterval) {
  const Dataset ds = generate_dataset(tiny_data_spec(8, 7), Split::test);
  const Network net = init_network(tiny_network());
  const ChannelMaskStats stats = compute_channel_mask_stats(net, ds);
  for (double v : stats.mean) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(MaskStatsTest, AlternativeSignalChangesCorrelationObservationsOnly) {
  const Dataset ds = generate_dataset(tiny_data_spec(6, 8), Split::test);
  const Network net = init_network(tiny_network());
  const MaskSurvey plain = survey_masks(net, ds, CorrelationSignal::mask_mean);
  const MaskSurvey alt = survey_masks(net, ds, CorrelationSignal::masked_feature_mean);
  EXPECT_EQ(plain.mask_observations.values, alt.mask_observations.values);
  EXPECT_EQ(plain.signal_observations.rows, 0);
  ASSERT_EQ(alt.signal_observations.rows, alt.mask_observations.rows);
  EXPECT_NE(alt.signal_observations.values, alt.mask_observations.values);
  EXPECT_EQ(&plain.correlation_observations(), &plain.mask_observations);
  EXPECT_EQ(&alt.correlation_observations(), &alt.signal_observations);
}

// --------------------------------------------------------------------------
// Region means and localization

TEST(LocalizationTest, RegionMeansHandCase) {
  // One 2x2 plane, region marks only the top-left pixel.
  const std::vector<double> plane = {8.0, 2.0, 4.0, 6.0};
  const std::vector<unsigned char> region = {1, 0, 0, 0};
  const RegionMeans rm = region_means(plane, 1, region);
  EXPECT_DOUBLE_EQ(rm.inside[0], 8.0);
  EXPECT_DOUBLE_EQ(rm.outside[0], 4.0);

  const std::vector<unsigned char> empty = {0, 0, 0, 0};
  EXPECT_THROW(region_means(plane, 1, empty), std::invalid_argument);
  const std::vector<unsigned char> full = {1, 1, 1, 1};
  EXPECT_THROW(region_means(plane, 1, full), std::invalid_argument);
  EXPECT_THROW(region_means(plane, 2, region), std::invalid_argument);
}

TEST(LocalizationTest, UniformMaskGivesRatioOneAndNoPasses) {
  RegionMeans uniform;
  uniform.inside = {0.4, 0.4};
  uniform.outside = {0.4, 0.4};
  const LocalizationScore score =
      localization_from_means(2, {uniform, uniform}, {0, 1}, 1.3);
  EXPECT_EQ(score.attribute, 2);
  EXPECT_EQ(score.positives, 2);
  EXPECT_DOUBLE_EQ(score.inside_mean, 0.4);
  EXPECT_DOUBLE_EQ(score.outside_mean, 0.4);
  EXPECT_DOUBLE_EQ(score.ratio, 1.0);
  EXPECT_DOUBLE_EQ(score.pass_fraction, 0.0);
}

TEST(LocalizationTest, ConcentratedMaskPassesAndAggregatesExactly) {
  RegionMeans focused;
  focused.inside = {0.9};
  focused.outside = {0.01};
  RegionMeans flat;
  flat.inside = {0.3};
  flat.outside = {0.3};
  const LocalizationScore score = localization_from_means(0, {focused, flat}, {0}, 1.3);
  EXPECT_EQ(score.positives, 2);
  EXPECT_DOUBLE_EQ(score.inside_mean, (0.9 + 0.3) / 2.0);
  EXPECT_DOUBLE_EQ(score.outside_mean, (0.01 + 0.3) / 2.0);
  EXPECT_DOUBLE_EQ(score.pass_fraction, 0.5);
  EXPECT_GT(score.ratio, 1.3);
}

TEST(LocalizationTest, OnlySelectedChannelsAreScored) {
  RegionMeans rm;
  rm.inside = {0.9, 0.1};   // channel 0 focused, channel 1 anti-focused
  rm.outside = {0.1, 0.9};
  EXPECT_DOUBLE_EQ(localization_from_means(1, {rm}, {0}, 1.3).pass_fraction, 1.0);
  EXPECT_DOUBLE_EQ(localization_from_means(1, {rm}, {1}, 1.3).pass_fraction, 0.0);
  // Both channels together cancel to ratio 1.
  EXPECT_DOUBLE_EQ(localization_from_means(1, {rm}, {0, 1}, 1.3).ratio, 1.0);
}

TEST(LocalizationTest, FromMeansRejectsEmptyInputs) {
  RegionMeans rm;
  rm.inside = {0.5};
  rm.outside = {0.5};
  EXPECT_THROW(localization_from_means(0, {}, {0}, 1.3), std::invalid_argument);
  EXPECT_THROW(localization_from_means(0, {rm}, {}, 1.3), std::invalid_argument);
}

TEST(LocalizationTest, ScoreWrapperValidatesAttributeAndRuns) {
  const Dataset ds = generate_dataset(tiny_data_spec(12, 9), Split::test);
  const Network net = init_network(tiny_network());
  EXPECT_THROW(localization_score(net, ds, attribute::kBrightBackground),
               std::invalid_argument);
  EXPECT_THROW(localization_score(net, ds, 99), std::invalid_argument);

  int64_t positives = 0;
  for (const Sample& s : ds.samples) positives += s.labels[attribute::kCircle];
  ASSERT_GT(positives, 0);
  const LocalizationScore score = localization_score(net, ds, attribute::kCircle);
  EXPECT_EQ(score.attribute, attribute::kCircle);
  EXPECT_EQ(score.positives, positives);
  EXPECT_EQ(score.channels.size(), 3u);
  EXPECT_TRUE(std::isfinite(score.ratio));
  EXPECT_GE(score.pass_fraction, 0.0);
  EXPECT_LE(score.pass_fraction, 1.0);
}

// --------------------------------------------------------------------------
// Rankings

TEST(RankingTest, UniqueMaximumWinsAndDefaultIsTopThree) {
  std::vector<double> values(16, 0.1);
  values[7] = 0.9;
  values[3] = 0.5;
  values[12] = 0.4;
  const ChannelMaskStats stats = make_stats(1, 16, values);
  const std::vector<RankedChannel> top = channel_importance(stats, 0);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].id, 7);
  EXPECT_DOUBLE_EQ(top[0].score, 0.9);
  EXPECT_EQ(top[1].id, 3);
  EXPECT_EQ(top[2].id, 12);
}

TEST(RankingTest, ExactTiesBreakByAscendingChannelId) {
  std::vector<double> values(12, 0.2);
  values[9] = 0.7;
  values[2] = 0.7;
  const ChannelMaskStats stats = make_stats(1, 12, values);
  const std::vector<RankedChannel> top = channel_importance(stats, 0, 2);
  EXPECT_EQ(top[0].id, 2);
  EXPECT_EQ(top[1].id, 9);
}

TEST(RankingTest, OrderInvariantUnderStrictlyIncreasingTransforms) {
  Rng rng(1234);
  std::vector<double> values(32);
  for (double& v : values) v = rng.uniform01();
  const ChannelMaskStats base = make_stats(1, 32, values);
  std::vector<int64_t> base_order;
  for (const RankedChannel& rc : channel_importance(base, 0, 32)) base_order.push_back(rc.id);

  for (auto transform : {+[](double v) { return 2.0 * v + 1.0; },
                         +[](double v) { return std::exp(v); }}) {
    std::vector<double> mapped(values.size());
    for (size_t i = 0; i < values.size(); ++i) mapped[i] = transform(values[i]);
    const ChannelMaskStats other = make_stats(1, 32, mapped);
    std::vector<int64_t> order;
    for (const RankedChannel& rc : channel_importance(other, 0, 32)) order.push_back(rc.id);
    EXPECT_EQ(order, base_order);
  }
}

TEST(RankingTest, ValidatesArguments) {
  const ChannelMaskStats stats = make_stats(2, 4, std::vector<double>(8, 0.5));
  EXPECT_THROW(channel_importance(stats, 2, 1), std::invalid_argument);
  EXPECT_THROW(channel_importance(stats, -1, 1), std::invalid_argument);
  EXPECT_THROW(channel_importance(stats, 0, 5), std::invalid_argument);
  EXPECT_THROW(channel_importance(stats, 0, 0), std::invalid_argument);
}

TEST(RankingTest, TopCorrelatedExcludesSelfSkipsMissingAndBreaksTies) {
  CorrelationMatrix m;
  m.size = 2;
  m.r = {1.0, 0.3, 0.3, 1.0};
  const std::vector<RankedChannel> single = top_correlated(m, 0, 1);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].id, 1);
  EXPECT_DOUBLE_EQ(single[0].score, 0.3);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  CorrelationMatrix big;
  big.size = 4;
  big.r = {1.0, 0.5, nan, 0.5,
           0.5, 1.0, nan, 0.2,
           nan, nan, nan, nan,
           0.5, 0.2, nan, 1.0};
  const std::vector<RankedChannel> top = top_correlated(big, 0, 3);
  ASSERT_EQ(top.size(), 2u);  // the missing column is skipped entirely
  EXPECT_EQ(top[0].id, 1);    // tie 0.5 with id 3 resolves to the smaller id
  EXPECT_EQ(top[1].id, 3);

  EXPECT_THROW(top_correlated(m, 2, 1), std::invalid_argument);
  EXPECT_THROW(top_correlated(m, 0, 2), std::invalid_argument);
}

TEST(RankingTest, AttributeCorrelationOfInjectedStats) {
  // Attribute 1 duplicates attribute 0's importance vector.
  ChannelMaskStats stats = make_stats(3, 4,
                                      {0.1, 0.5, 0.3, 0.8,
                                       0.1, 0.5, 0.3, 0.8,
                                       0.9, 0.2, 0.6, 0.1});
  const CorrelationMatrix m = attribute_correlation(stats);
  EXPECT_EQ(m.size, 3);
  EXPECT_NEAR(m.at(0, 1), 1.0, 1e-15);
  for (int64_t i = 0; i < 3; ++i) {
    EXPECT_EQ(m.at(i, i), 1.0);
    for (int64_t j = 0; j < 3; ++j) EXPECT_EQ(m.at(i, j), m.at(j, i));
  }

  const ChannelMaskStats single = make_stats(1, 4, {0.1, 0.2, 0.3, 0.4});
  EXPECT_THROW(attribute_correlation(single), std::invalid_argument);
}

// --------------------------------------------------------------------------
// Mean-mask grids and heatmap

TEST(GridTest, GeometryFor128ChannelsIsTwelveByElevenWithFourPaddingCells) {
  const ChannelMaskStats stats = make_stats(1, 128, std::vector<double>(128, 0.5));
  const MeanMaskGrid grid = mean_mask_grid(stats, 0);
  EXPECT_EQ(grid.cols, 12);
  EXPECT_EQ(grid.rows, 11);
  EXPECT_EQ(grid.cols * grid.rows - grid.channels, 4);
  for (double v : grid.values) EXPECT_DOUBLE_EQ(v, 0.5);
  EXPECT_DOUBLE_EQ(grid.min_value, 0.5);
  EXPECT_DOUBLE_EQ(grid.max_value, 0.5);
}

TEST(GridTest, GeometryForEightChannels) {
  const ChannelMaskStats stats = make_stats(1, 8, std::vector<double>(8, 0.25));
  const MeanMaskGrid grid = mean_mask_grid(stats, 0);
  EXPECT_EQ(grid.cols, 3);
  EXPECT_EQ(grid.rows, 3);
  EXPECT_EQ(grid.cols * grid.rows - grid.channels, 1);
}

TEST(GridTest, RenderingNormalizesMinMaxAndMarksPadding) {
  // Three channels on a 2x2 grid: min 0.2 -> 0, max 0.7 -> 255, and
  // 0.4 -> round(255 * 0.4) = 102.
  const ChannelMaskStats stats = make_stats(1, 3, {0.2, 0.7, 0.4});
  const MeanMaskGrid grid = mean_mask_grid(stats, 0);
  ASSERT_EQ(grid.cols, 2);
  ASSERT_EQ(grid.rows, 2);
  const std::vector<uint8_t> pixels = render_mask_grid(grid);
  const int64_t cell = kGridCellPixels, width = grid.cols * cell;
  ASSERT_EQ(pixels.size(), static_cast<size_t>(width * grid.rows * cell));
  auto cell_pixel = [&](int64_t cy, int64_t cx, int64_t y, int64_t x) {
    return pixels[static_cast<size_t>((cy * cell + y) * width + cx * cell + x)];
  };
  EXPECT_EQ(cell_pixel(0, 0, 5, 5), 0);
  EXPECT_EQ(cell_pixel(0, 1, 5, 5), 255);
  EXPECT_EQ(cell_pixel(1, 0, 5, 5), 102);
  // Padding cell: 1-pixel checkerboard.
  EXPECT_EQ(cell_pixel(1, 1, 0, 0), 0);
  EXPECT_EQ(cell_pixel(1, 1, 0, 1), 255);
  EXPECT_EQ(cell_pixel(1, 1, 1, 0), 255);

  // A constant grid renders its data cells as 0.
  const ChannelMaskStats flat = make_stats(1, 3, {0.5, 0.5, 0.5});
  const std::vector<uint8_t> flat_pixels = render_mask_grid(mean_mask_grid(flat, 0));
  EXPECT_EQ(flat_pixels[static_cast<size_t>(5 * width + 5)], 0);
}

TEST(GridTest, IdenticalStatsRowsRenderIdenticalGrids) {
  const std::vector<double> row = {0.3, 0.8, 0.1, 0.6};
  std::vector<double> both = row;
  both.insert(both.end(), row.begin(), row.end());
  const ChannelMaskStats stats = make_stats(2, 4, both);
  const MeanMaskGrid g0 = mean_mask_grid(stats, 0);
  const MeanMaskGrid g1 = mean_mask_grid(stats, 1);
  EXPECT_EQ(g0.values, g1.values);
  EXPECT_EQ(render_mask_grid(g0), render_mask_grid(g1));
}

TEST(GridTest, SidecarRecordsGeometryAndScale) {
  const ChannelMaskStats stats = make_stats(3, 128, std::vector<double>(3 * 128, 0.5));
  const std::string sidecar = mask_grid_sidecar(mean_mask_grid(stats, 2));
  EXPECT_NE(sidecar.find("attribute=2\n"), std::string::npos);
  EXPECT_NE(sidecar.find("attribute_name=horizontal_bar\n"), std::string::npos);
  EXPECT_NE(sidecar.find("grid_cols=12\n"), std::string::npos);
  EXPECT_NE(sidecar.find("grid_rows=11\n"), std::string::npos);
  EXPECT_NE(sidecar.find("padding_cells=4\n"), std::string::npos);
  EXPECT_NE(sidecar.find("min=0.5\n"), std::string::npos);
  EXPECT_NE(sidecar.find("max=0.5\n"), std::string::npos);
}

TEST(GridTest, HeatmapMapsCorrelationToDocumentedGrayLevels) {
  CorrelationMatrix m;
  m.size = 2;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.r = {1.0, -1.0, 0.0, nan};
  const std::vector<uint8_t> pixels = render_correlation_heatmap(m);
  ASSERT_EQ(pixels.size(), 4u);
  EXPECT_EQ(pixels[0], 0);    // r = 1 darkest
  EXPECT_EQ(pixels[1], 255);  // r = -1 white
  EXPECT_EQ(pixels[2], 128);  // r = 0 mid-gray
  EXPECT_EQ(pixels[3], 255);  // missing renders white
}

// --------------------------------------------------------------------------
// Text renderings

TEST(RenderTest, RankedLineAndCsvFormats) {
  EXPECT_EQ(ranked_ids_line({{17, 0.984}, {5, 0.905}}), "17 (0.98), 5 (0.91)");
  EXPECT_EQ(ranked_ids_line({}), "");

  CorrelationMatrix m;
  m.size = 2;
  m.r = {1.0, 0.25, 0.25, 1.0};
  EXPECT_EQ(correlation_csv(m, {"a", "b"}, "attribute"),
            "attribute,a,b\na,1,0.25\nb,0.25,1\n");
  EXPECT_THROW(correlation_csv(m, {"a"}, "attribute"), std::invalid_argument);

  CorrelationMatrix missing;
  missing.size = 1;
  missing.r = {std::numeric_limits<double>::quiet_NaN()};
  EXPECT_EQ(correlation_csv(missing, {"x"}, "channel"), "channel,x\nx,nan\n");

  const ChannelMaskStats stats = make_stats(2, 2, {0.5, 0.25, 1.0, 0.125});
  EXPECT_EQ(mask_stats_csv(stats),
            "attribute,0,1\ncircle,0.5,0.25\nsquare,1,0.125\n");

  LocalizationScore score;
  score.attribute = 2;
  score.positives = 7;
  score.inside_mean = 0.5;
  score.outside_mean = 0.25;
  score.ratio = 2.0;
  score.pass_fraction = 0.75;
  EXPECT_EQ(localization_csv({score}),
            "attribute,name,positives,inside_mean,outside_mean,ratio,pass_fraction\n"
            "2,horizontal_bar,7,0.5,0.25,2,0.75\n");
}

// --------------------------------------------------------------------------
// Full report and export

TEST(ReportTest, AnalyzePopulatesEverySection) {
  const Dataset ds = generate_dataset(tiny_data_spec(12, 31), Split::test);
  const Network net = init_network(tiny_network());
  const AnalysisReport report = analyze(net, ds);

  EXPECT_EQ(report.stats.num_attributes, 6);
  EXPECT_EQ(report.stats.num_channels, 8);
  EXPECT_EQ(report.grids.size(), 6u);
  EXPECT_EQ(report.feature_corr.size, 8);
  EXPECT_EQ(report.attribute_corr.size, 6);
  ASSERT_EQ(report.top_channels.size(), 6u);
  for (const auto& ranked : report.top_channels) EXPECT_EQ(ranked.size(), 3u);
  ASSERT_EQ(report.top_attributes.size(), 6u);
  for (const auto& ranked : report.top_attributes) EXPECT_EQ(ranked.size(), 5u);

  // Localization entries exactly for localized attributes with positives.
  std::vector<int64_t> expected;
  for (int64_t k = 0; k < 4; ++k) {
    int64_t positives = 0;
    for (const Sample& s : ds.samples) positives += s.labels[static_cast<size_t>(k)];
    if (positives > 0) expected.push_back(k);
  }
  ASSERT_EQ(report.localization.size(), expected.size());
  for (size_t i = 0; i < expected.size(); ++i)
    EXPECT_EQ(report.localization[i].attribute, expected[i]);

  EXPECT_NE(report.provenance.find("dataset_split=test\n"), std::string::npos);
  EXPECT_NE(report.provenance.find("dataset_seed=31\n"), std::string::npos);
  EXPECT_NE(report.provenance.find("correlation_signal=mask_mean\n"), std::string::npos);
  char checksum[24];
  std::snprintf(checksum, sizeof checksum, "%016llx",
                static_cast<unsigned long long>(net.parameter_checksum()));
  EXPECT_NE(report.provenance.find(std::string("parameter_checksum=") + checksum + "\n"),
            std::string::npos);
}

TEST(ReportTest, AnalyzeIsDeterministic) {
  const Dataset ds = generate_dataset(tiny_data_spec(8, 33), Split::test);
  const Network net = init_network(tiny_network());
  const AnalysisReport a = analyze(net, ds);
  const AnalysisReport b = analyze(net, ds);
  EXPECT_EQ(a.stats.mean, b.stats.mean);
  EXPECT_EQ(a.feature_corr.r, b.feature_corr.r);
  EXPECT_EQ(a.attribute_corr.r, b.attribute_corr.r);
  EXPECT_EQ(a.provenance, b.provenance);
}

TEST(ReportTest, AlternativeSignalIsRecordedAndChangesFeatureCorrelation) {
  const Dataset ds = generate_dataset(tiny_data_spec(8, 35), Split::test);
  const Network net = init_network(tiny_network());
  const AnalysisReport plain = analyze(net, ds, CorrelationSignal::mask_mean);
  const AnalysisReport alt = analyze(net, ds, CorrelationSignal::masked_feature_mean);
  EXPECT_NE(plain.feature_corr.r, alt.feature_corr.r);
  EXPECT_EQ(plain.stats.mean, alt.stats.mean);  // Fig.-1 stats always use raw masks
  EXPECT_NE(alt.provenance.find("correlation_signal=masked_feature_mean\n"), std::string::npos);
}

TEST(ReportTest, ExportWritesEveryArtifactByteReproducibly) {
  const Dataset ds = generate_dataset(tiny_data_spec(10, 37), Split::test);
  const Network net = init_network(tiny_network());
  const AnalysisReport report = analyze(net, ds);

  const auto dir1 = temp_dir("export1");
  const auto dir2 = temp_dir("export2");
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);
  export_report(report, dir1);
  export_report(report, dir2);

  const std::vector<std::string> expected = {
      "mask_grid_0_circle.pgm",       "mask_grid_0_circle.txt",
      "mask_grid_1_square.pgm",       "mask_grid_1_square.txt",
      "mask_grid_2_horizontal_bar.pgm", "mask_grid_2_horizontal_bar.txt",
      "mask_grid_3_vertical_bar.pgm", "mask_grid_3_vertical_bar.txt",
      "mask_grid_4_bright_background.pgm", "mask_grid_4_bright_background.txt",
      "mask_grid_5_inverted_contrast.pgm", "mask_grid_5_inverted_contrast.txt",
      "mask_means.csv",        "feature_correlation.csv", "feature_correlation.pgm",
      "attribute_correlation.csv", "channel_importance.txt", "top_features.txt",
      "top_attributes.txt",    "localization.csv",        "warnings.txt",
      "provenance.txt"};
  for (const std::string& name : expected) {
    ASSERT_TRUE(std::filesystem::exists(dir1 / name)) << name;
    EXPECT_EQ(read_file_text(dir1 / name), read_file_text(dir2 / name)) << name;
  }

  // Exactly the expected files, nothing else.
  size_t count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir1)) {
    (void)entry;
    ++count;
  }
  EXPECT_EQ(count, expected.size());

  // The 8-channel grid PGM is 3x3 cells of 12 px.
  const std::string pgm = read_file_text(dir1 / "mask_grid_0_circle.pgm");
  EXPECT_EQ(pgm.substr(0, 13), "P5\n36 36\n255\n");
  const std::string heat = read_file_text(dir1 / "feature_correlation.pgm");
  EXPECT_EQ(heat.substr(0, 11), "P5\n8 8\n255\n");

  // Text tables have one line per attribute / target.
  const std::string importance = read_file_text(dir1 / "channel_importance.txt");
  EXPECT_EQ(static_cast<size_t>(std::count(importance.begin(), importance.end(), '\n')), 6u);
  EXPECT_EQ(importance.compare(0, 7, "circle:"), 0);
}

}  // namespace
