#include <gtest/gtest.h>

#include <filesystem>

#include "dwgl/report.hpp"
#include "dwgl/rng.hpp"
#include "support/oracles.hpp"

using namespace dwgl;
namespace fs = std::filesystem;

TEST(Stats, ConstantList) {
  const std::vector<double> v = {1, 1, 1, 1};
  const auto s = activation_stats(v);
  EXPECT_EQ(s.median, 1.0);
  EXPECT_EQ(s.max, 1.0);
  EXPECT_EQ(s.variance, 0.0);
  EXPECT_EQ(s.activated_count, 4u);
}

TEST(Stats, SmallExample) {
  const std::vector<double> v = {0, 0, 3, 4};
  const auto s = activation_stats(v);
  EXPECT_DOUBLE_EQ(s.overall_mean, 1.75);
  EXPECT_EQ(s.activated_count, 2u);
  EXPECT_DOUBLE_EQ(s.activated_median, 3.5);
  EXPECT_EQ(s.max, 4.0);
  EXPECT_DOUBLE_EQ(s.median, 1.5);
  EXPECT_DOUBLE_EQ(s.variance, (1.75 * 1.75 * 2 + 1.25 * 1.25 + 2.25 * 2.25) / 4);
}

TEST(Stats, RandomListsMatchBruteForce) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng.below(40));
    for (auto& x : v) x = rng.below(4) == 0 ? 0.0 : std::round(rng.uniform(0, 5) * 4) / 4;
    const auto s = activation_stats(v);
    double mean = 0;
    for (double x : v) mean += x / static_cast<double>(v.size());
    std::size_t active = 0;
    double var = 0, mx = v[0];
    for (double x : v) {
      active += x >= mean;
      var += (x - mean) * (x - mean) / static_cast<double>(v.size());
      mx = std::max(mx, x);
    }
    // Median: the value with at most half strictly below and above, averaged for even sizes.
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    const double median = (sorted[(v.size() - 1) / 2] + sorted[v.size() / 2]) / 2;
    EXPECT_NEAR(s.overall_mean, mean, 1e-12);
    EXPECT_EQ(s.activated_count, active);
    EXPECT_NEAR(s.variance, var, 1e-9);
    EXPECT_EQ(s.max, mx);
    EXPECT_EQ(s.median, median);
  }
}

TEST(Stats, EmptyIsAnError) { EXPECT_THROW(activation_stats(std::vector<double>{}), Error); }

TEST(Trend, MonotoneLists) {
  EXPECT_DOUBLE_EQ(trend_score(std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(trend_score(std::vector<double>{0.1, 0.2, 0.3}), 1.0);
  EXPECT_EQ(trend_score(std::vector<double>{2, 2, 2}), 0.0);
  EXPECT_THROW(trend_score(std::vector<double>{1, 2}), Error);
}

TEST(Trend, TiesMatchCountingRanks) {
  Rng rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> v(3 + rng.below(30));
    for (auto& x : v) x = static_cast<double>(rng.below(5));
    EXPECT_NEAR(trend_score(v), oracle::spearman(v), 1e-12);
  }
}

TEST(Csv, ActivationRoundTrip) {
  const fs::path path = fs::temp_directory_path() / "dwgl-test-act.csv";
  const std::vector<double> v = {1.5, 0.0, 1e-7, 3.25};
  write_activation_csv(path, v);
  EXPECT_EQ(read_text(path).substr(0, 11), "index,norm\n");
  const auto back = read_activation_csv(path);
  ASSERT_EQ(back.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(back[i], v[i]);
  write_text(path, "index,norm\n1,0.5\n3,0.2\n");
  EXPECT_THROW(read_activation_csv(path), Error);
  write_text(path, "k,v\n");
  EXPECT_THROW(read_activation_csv(path), Error);
  fs::remove(path);
}

TEST(Csv, HistoryAppendsAndParses) {
  const fs::path path = fs::temp_directory_path() / "dwgl-test-history.csv";
  fs::remove(path);
  const std::vector<HistoryRecord> a = {{1, "train", 2.25, 0.5, 0.125}, {1, "heldout", 2.5, 0.5, 0.1}};
  const std::vector<HistoryRecord> b = {{2, "train", 1.0, 0.25, 0.75}};
  append_history(path, a);
  append_history(path, b);
  const auto back = read_history(path);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[0], a[0]);
  EXPECT_EQ(back[2], b[0]);
  EXPECT_EQ(read_text(path).rfind(kHistoryHeader, 0), 0u);
  fs::remove(path);
}

TEST(Svg, IsWellFormedAndCarriesTheTitle) {
  const std::vector<double> v = {3, 2, 1, 0};
  const std::string svg = activation_svg(v, "s1 & <conv>");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("s1 &amp; &lt;conv&gt;"), std::string::npos);
  EXPECT_EQ(svg.find("nan"), std::string::npos);
}
