#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "slimsched/accprior.hpp"

using namespace slimsched;

namespace {

// Exhaustive reference: all rows at minimal distance over the prefix; exact
// hits are averaged, otherwise the lexicographically smallest row wins.
double brute_prior(const std::vector<std::pair<WidthTuple, double>>& rows, const std::vector<double>& prefix) {
  std::vector<double> d(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double s = 0;
    for (std::size_t i = 0; i < prefix.size(); ++i) s += std::pow(rows[r].first[i] - prefix[i], 2);
    d[r] = s;
  }
  const double best = *std::min_element(d.begin(), d.end());
  std::vector<std::pair<WidthTuple, double>> ties;
  for (std::size_t r = 0; r < rows.size(); ++r)
    if (d[r] == best) ties.push_back(rows[r]);
  if (best == 0.0) {
    double s = 0;
    for (auto& t : ties) s += t.second;
    return s / ties.size();
  }
  return std::min_element(ties.begin(), ties.end(), [](auto& a, auto& b) { return a.first < b.first; })->second;
}

std::vector<std::pair<WidthTuple, double>> published_rows() {
  return {{{0.25, 0.25, 0.25, 0.25}, 0.7030}, {{0.50, 0.50, 0.50, 0.50}, 0.7299}, {{0.75, 0.75, 0.75, 0.75}, 0.7493},
          {{1.00, 1.00, 1.00, 1.00}, 0.7643}, {{1.00, 0.75, 0.50, 0.25}, 0.7135}, {{0.75, 1.00, 0.25, 0.50}, 0.7233},
          {{0.50, 0.25, 1.00, 0.75}, 0.7453}, {{0.25, 0.50, 0.75, 1.00}, 0.7533}};
}

}  // namespace

TEST(AccuracyTable, PublishedUniformWidths) {
  const auto t = AccuracyTable::published();
  EXPECT_EQ(t.size(), 8u);
  EXPECT_EQ(t.exact_lookup({0.25, 0.25, 0.25, 0.25}), 0.7030);
  EXPECT_EQ(t.exact_lookup({0.50, 0.50, 0.50, 0.50}), 0.7299);
  EXPECT_EQ(t.exact_lookup({0.75, 0.75, 0.75, 0.75}), 0.7493);
  EXPECT_EQ(t.exact_lookup({1.00, 1.00, 1.00, 1.00}), 0.7643);
}

TEST(AccuracyTable, PublishedMixedWidths) {
  const auto t = AccuracyTable::published();
  EXPECT_EQ(t.exact_lookup({1.00, 0.75, 0.50, 0.25}), 0.7135);
  EXPECT_EQ(t.exact_lookup({0.75, 1.00, 0.25, 0.50}), 0.7233);
  EXPECT_EQ(t.exact_lookup({0.50, 0.25, 1.00, 0.75}), 0.7453);
  EXPECT_EQ(t.exact_lookup({0.25, 0.50, 0.75, 1.00}), 0.7533);
  EXPECT_FALSE(t.exact_lookup({0.25, 0.25, 0.25, 0.50}).has_value());
}

TEST(AccuracyTable, AllValuesAreFractions) {
  const auto t = AccuracyTable::published();
  EXPECT_GE(t.min_value(), 0.0);
  EXPECT_LE(t.max_value(), 1.0);
  EXPECT_DOUBLE_EQ(t.min_value(), 0.7030);
  EXPECT_DOUBLE_EQ(t.max_value(), 0.7643);
  AccuracyTable bad;
  EXPECT_THROW(bad.insert({1, 1, 1, 1}, 1.2), ConfigError);
  EXPECT_THROW(bad.insert({0, 1, 1, 1}, 0.5), ConfigError);
}

TEST(PriorLookup, FullTupleIsExact) {
  const auto t = AccuracyTable::published();
  const std::vector<double> q{0.50, 0.25, 1.00, 0.75};
  EXPECT_EQ(t.prior_lookup(q), 0.7453);
}

TEST(PriorLookup, PrefixAveragesExactMatches) {
  const auto t = AccuracyTable::published();
  const std::vector<double> q{0.25};
  EXPECT_NEAR(t.prior_lookup(q), 0.72815, 1e-12);
  EXPECT_NEAR(t.prior_lookup(q), brute_prior(published_rows(), q), 1e-15);
}

TEST(PriorLookup, NearestUniformNeighbour) {
  const auto t = AccuracyTable::published();
  const std::vector<double> q{0.60, 0.60, 0.60, 0.60};
  EXPECT_EQ(t.prior_lookup(q), 0.7299);
  EXPECT_EQ(brute_prior(published_rows(), q), 0.7299);
}

TEST(PriorLookup, TieBreaksLexicographically) {
  AccuracyTable t;
  t.insert({0.75, 0.25, 0.25, 0.25}, 0.60);
  t.insert({0.25, 0.75, 0.25, 0.25}, 0.70);
  // (0.5, 0.5) is equidistant from both prefixes; (0.25, 0.75, ...) sorts first
  const std::vector<double> q{0.5, 0.5};
  EXPECT_EQ(t.prior_lookup(q), 0.70);
}

TEST(PriorLookup, AgreesWithBruteForceOnEveryPrefix) {
  const auto t = AccuracyTable::published();
  const auto rows = published_rows();
  const std::vector<double> grid{0.25, 0.5, 0.75, 1.0, 0.4, 0.6, 0.9};
  Rng rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.index(4);
    std::vector<double> q(n);
    for (auto& x : q) x = grid[rng.index(grid.size())];
    ASSERT_NEAR(t.prior_lookup(q), brute_prior(rows, q), 1e-15);
  }
}

TEST(PriorLookup, RejectsBadPrefix) {
  const auto t = AccuracyTable::published();
  EXPECT_THROW(t.prior_lookup(std::vector<double>{}), PreconditionError);
  EXPECT_THROW(t.prior_lookup(std::vector<double>(5, 0.5)), PreconditionError);
}

TEST(CenteredPrior, Examples) {
  const auto t = AccuracyTable::published();
  // 5.8819 / 8; quoted to five places as 0.73524
  EXPECT_NEAR(t.top1_mean(), 0.7352375, 1e-15);
  EXPECT_NEAR(t.top1_mean(), 0.73524, 5e-6);
  EXPECT_NEAR(t.centered_prior(t.top1_mean(), true), 0.0, 1e-15);
  EXPECT_EQ(t.centered_prior(0.7030, false), 0.7030);
  EXPECT_NEAR(t.centered_prior(0.7643, true), 0.0290625, 1e-15);
  EXPECT_NEAR(t.centered_prior(0.7643, true), 0.02906, 5e-6);
}

TEST(CenteredPrior, MeanOverride) {
  auto t = AccuracyTable::published();
  t.set_top1_mean_override(0.7);
  EXPECT_NEAR(t.centered_prior(0.75, true), 0.05, 1e-15);
}

TEST(AccuracyTable, ParseCsvWithComments) {
  std::istringstream in("# header\n0.25,0.25,0.25,0.25,0.7030  # floor\n\n1,1,1,1,0.7643\n");
  const auto t = AccuracyTable::parse(in);
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.exact_lookup({1, 1, 1, 1}), 0.7643);
  std::istringstream bad("0.25,0.25,0.25,0.7030\n");
  EXPECT_THROW(AccuracyTable::parse(bad), ConfigError);
  std::istringstream empty("# nothing\n");
  EXPECT_THROW(AccuracyTable::parse(empty), ConfigError);
}

TEST(AccuracyTable, ShippedCsvMatchesPublished) {
  const auto t = AccuracyTable::load(std::string(SLIMSCHED_SOURCE_DIR) + "/data/accuracy_table.csv");
  EXPECT_EQ(t.entries(), AccuracyTable::published().entries());
}

TEST(Correctness, BernoulliFrequencyMatchesPrior) {
  const auto t = AccuracyTable::published();
  Rng rng(21);
  const std::vector<WidthRatio> w(4, WidthRatio(0.25));
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += t.sample_correctness(w, rng);
  const double p = 0.7030;
  EXPECT_NEAR(static_cast<double>(hits) / n, p, 5 * std::sqrt(p * (1 - p) / n));
}
