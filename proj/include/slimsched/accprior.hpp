#pragma once

// Width-combination accuracy table: exact and nearest-neighbour lookup,
// optional zero-mean centering, and Bernoulli correctness sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "slimsched/core.hpp"

namespace slimsched {

using WidthTuple = std::array<double, kNumSegments>;

class AccuracyTable {
 public:
  AccuracyTable() = default;

  // The eight published SlimResNet / CIFAR-100 top-1 rows.
  static AccuracyTable published() {
    AccuracyTable t;
    t.insert({0.25, 0.25, 0.25, 0.25}, 0.7030);
    t.insert({0.50, 0.50, 0.50, 0.50}, 0.7299);
    t.insert({0.75, 0.75, 0.75, 0.75}, 0.7493);
    t.insert({1.00, 1.00, 1.00, 1.00}, 0.7643);
    t.insert({1.00, 0.75, 0.50, 0.25}, 0.7135);
    t.insert({0.75, 1.00, 0.25, 0.50}, 0.7233);
    t.insert({0.50, 0.25, 1.00, 0.75}, 0.7453);
    t.insert({0.25, 0.50, 0.75, 1.00}, 0.7533);
    return t;
  }

  // Rows of `w1,w2,w3,w4,top1_fraction`; '#' starts a comment.
  static AccuracyTable parse(std::istream& in, const std::string& origin = "<stream>") {
    AccuracyTable t;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream fields(line);
      WidthTuple w{};
      double acc = 0.0;
      for (auto& x : w) fields >> x;
      fields >> acc;
      std::string extra;
      if (fields.fail() || (fields >> extra))
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 5 comma-separated numbers");
      t.insert(w, acc);
    }
    if (t.empty()) throw ConfigError(origin + ": accuracy table has no rows");
    return t;
  }

  static AccuracyTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open accuracy table " + path);
    return parse(in, path);
  }

  void insert(const WidthTuple& widths, double accuracy) {
    if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ConfigError("accuracy outside [0, 1]");
    for (double w : widths)
      if (!(w > 0.0 && w <= 1.0)) throw ConfigError("table width outside (0, 1]");
    entries_[widths] = accuracy;
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::map<WidthTuple, double>& entries() const { return entries_; }

  double top1_mean() const {
    if (mean_override_) return *mean_override_;
    double sum = 0.0;
    for (const auto& [_, acc] : entries_) sum += acc;
    return entries_.empty() ? 0.0 : sum / static_cast<double>(entries_.size());
  }
  void set_top1_mean_override(std::optional<double> m) { mean_override_ = m; }

  double min_value() const {
    double m = 1.0;
    for (const auto& [_, acc] : entries_) m = std::min(m, acc);
    return m;
  }
  double max_value() const {
    double m = 0.0;
    for (const auto& [_, acc] : entries_) m = std::max(m, acc);
    return m;
  }

  std::optional<double> exact_lookup(const WidthTuple& widths) const {
    auto it = entries_.find(widths);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  // Nearest neighbour over the first n = prefix.size() components. Several
  // rows at distance zero are averaged; otherwise the lexicographically
  // smallest of the equidistant rows wins (map order is lexicographic).
  double prior_lookup(std::span<const double> prefix) const {
    if (prefix.empty() || prefix.size() > kNumSegments)
      throw PreconditionError("prior_lookup: prefix length must be in [1, 4]");
    if (entries_.empty()) throw PreconditionError("prior_lookup: empty table");
    double best = std::numeric_limits<double>::infinity();
    double best_value = 0.0;
    double exact_sum = 0.0;
    int exact_count = 0;
    for (const auto& [tuple, acc] : entries_) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < prefix.size(); ++i) d2 += (tuple[i] - prefix[i]) * (tuple[i] - prefix[i]);
      if (d2 == 0.0) {
        exact_sum += acc;
        ++exact_count;
      }
      if (d2 < best) {
        best = d2;
        best_value = acc;
      }
    }
    return exact_count > 0 ? exact_sum / exact_count : best_value;
  }

  double prior_lookup(std::span<const WidthRatio> prefix) const {
    std::vector<double> v;
    for (auto w : prefix) v.push_back(w.value);
    return prior_lookup(std::span<const double>(v));
  }

  double centered_prior(double p, bool enabled) const { return enabled ? p - top1_mean() : p; }

  bool sample_correctness(std::span<const WidthRatio> widths, Rng& rng) const {
    return rng.bernoulli(prior_lookup(widths));
  }

 private:
  std::map<WidthTuple, double> entries_;
  std::optional<double> mean_override_;
};

}  // namespace slimsched
