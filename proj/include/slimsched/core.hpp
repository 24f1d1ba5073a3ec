#pragma once

// Domain vocabulary shared by every slimsched module: widths, requests,
// batch keys, instances, scheduler knobs, metrics, and seeded random streams.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

namespace slimsched {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument to an operation (violated precondition).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EmptyMetricsError : public Error {
 public:
  EmptyMetricsError() : Error("empty metrics: no samples") {}
};

using Seconds = double;
using Bytes = double;
using Watts = double;
using Joules = double;

inline constexpr int kNumSegments = 4;

struct WidthRatio {
  double value = 1.0;

  constexpr WidthRatio() = default;
  constexpr explicit WidthRatio(double v) : value(v) {}

  constexpr auto operator<=>(const WidthRatio&) const = default;
  constexpr double squared() const { return value * value; }
};

// The slimming set: finite, strictly increasing, every member in (0, 1].
class WidthSet {
 public:
  WidthSet() : WidthSet({0.25, 0.50, 0.75, 1.00}) {}

  explicit WidthSet(std::vector<double> values) {
    if (values.empty()) throw ConfigError("width set must not be empty");
    for (std::size_t i = 0; i < values.size(); ++i) {
      double v = values[i];
      if (!std::isfinite(v) || v <= 0.0 || v > 1.0)
        throw ConfigError("width " + std::to_string(v) + " outside (0, 1]");
      if (i > 0 && v <= values[i - 1])
        throw ConfigError("width set must be strictly increasing");
      widths_.emplace_back(v);
    }
  }

  std::size_t size() const { return widths_.size(); }
  WidthRatio operator[](std::size_t i) const { return widths_.at(i); }
  auto begin() const { return widths_.begin(); }
  auto end() const { return widths_.end(); }
  WidthRatio narrowest() const { return widths_.front(); }
  WidthRatio widest() const { return widths_.back(); }

  std::optional<std::size_t> index_of(WidthRatio w) const {
    auto it = std::find(widths_.begin(), widths_.end(), w);
    if (it == widths_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - widths_.begin());
  }
  bool contains(WidthRatio w) const { return index_of(w).has_value(); }

  std::vector<double> values() const {
    std::vector<double> out;
    for (auto w : widths_) out.push_back(w.value);
    return out;
  }

  bool operator==(const WidthSet&) const = default;

 private:
  std::vector<WidthRatio> widths_;
};

struct BatchKey {
  int segment = 0;
  WidthRatio w_req;
  std::optional<WidthRatio> w_prev;

  bool operator==(const BatchKey&) const = default;
  friend bool operator<(const BatchKey& a, const BatchKey& b) {
    auto prev = [](const BatchKey& k) {
      return std::pair{k.w_prev.has_value(), k.w_prev ? k.w_prev->value : 0.0};
    };
    return std::tuple{a.segment, a.w_req.value, prev(a)} <
           std::tuple{b.segment, b.w_req.value, prev(b)};
  }
};

// One image flowing through the four segments. width_history holds the widths
// already executed, so history.size() == segment and w_prev == history.back().
struct Request {
  std::uint64_t id = 0;
  int segment = 0;
  WidthRatio w_req;
  std::optional<WidthRatio> w_prev;
  std::vector<WidthRatio> width_history;
  Seconds t_arrival = 0.0;
  Seconds t_enqueue = 0.0;
  std::uint64_t block = 0;  // routing decision that bound the current stage

  BatchKey key() const { return BatchKey{segment, w_req, w_prev}; }

  bool valid() const {
    if (segment < 0 || segment >= kNumSegments) return false;
    if (width_history.size() != static_cast<std::size_t>(segment)) return false;
    if ((segment == 0) != !w_prev.has_value()) return false;
    if (segment > 0 && *w_prev != width_history.back()) return false;
    return t_arrival >= 0.0 && t_enqueue >= t_arrival;
  }
};

struct InstanceState {
  std::uint64_t index = 0;  // creation order on its server; best-fit tie-break
  int segment = 0;
  WidthRatio width;
  int device = 0;
  bool busy = false;
  Seconds t_last = 0.0;
  Bytes resident_bytes = 0.0;
};

struct SchedulerKnobs {
  double r = 500.0;           // requests / second
  int B_max = 8;
  Bytes M_max = 4.0e9;
  double U_blk = 0.95;        // fraction
  Seconds t_idle = 2.0;
  int Q_th = 16;
  int N_new = 2;
  WidthSet widths;
  Seconds load_time = 0.05;   // simulated instance load latency
  Seconds unload_period = 0.1;

  void validate() const {
    if (!(r > 0.0)) throw ConfigError("knobs.r: must be positive");
    if (B_max < 1) throw ConfigError("knobs.B_max: must be >= 1");
    if (!(M_max > 0.0)) throw ConfigError("knobs.M_max: must be positive");
    if (!(U_blk > 0.0 && U_blk <= 1.0)) throw ConfigError("knobs.U_blk: must lie in (0, 1]");
    if (!(t_idle > 0.0)) throw ConfigError("knobs.t_idle: must be positive");
    if (Q_th < 1) throw ConfigError("knobs.Q_th: must be >= 1");
    if (N_new < 0) throw ConfigError("knobs.N_new: must be >= 0");
    if (load_time < 0.0) throw ConfigError("knobs.load_time: must be >= 0");
    if (!(unload_period > 0.0)) throw ConfigError("knobs.unload_period: must be positive");
  }
};

// ---------------------------------------------------------------------------
// statistics

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Arithmetic mean and population standard deviation (divide by n).
inline MeanStd mean_std(std::span<const double> samples) {
  if (samples.empty()) throw EmptyMetricsError();
  double sum = 0.0;
  for (double x : samples) sum += x;
  const double n = static_cast<double>(samples.size());
  const double mean = sum / n;
  double ss = 0.0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  return {mean, samples.size() < 2 ? 0.0 : std::sqrt(ss / n)};
}

// Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample (1-based),
// with p = 0 mapping to the minimum.
inline double percentile(std::span<const double> samples, double p) {
  if (samples.empty()) throw EmptyMetricsError();
  if (!(p >= 0.0 && p <= 100.0)) throw PreconditionError("percentile p outside [0, 100]");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

inline double population_variance(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(xs.size());
}

struct MetricsRecord {
  std::vector<double> latency_samples;        // seconds, per request
  std::vector<double> energy_samples;         // joules, per routed block
  std::vector<double> util_variance_samples;  // per telemetry tick
  std::uint64_t completed = 0;
  std::uint64_t correct = 0;
  Seconds wall_span = 0.0;
  // width chosen per routed block (index into the width set)
  std::vector<std::uint64_t> width_histogram;
  std::vector<std::uint64_t> server_histogram;  // requests routed per server

  double accuracy() const {
    return completed == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(completed);
  }
  double throughput_per_second() const {
    return wall_span > 0.0 ? static_cast<double>(completed) / wall_span : 0.0;
  }

  // Associative merge of independent episodes.
  void merge(const MetricsRecord& o) {
    latency_samples.insert(latency_samples.end(), o.latency_samples.begin(), o.latency_samples.end());
    energy_samples.insert(energy_samples.end(), o.energy_samples.begin(), o.energy_samples.end());
    util_variance_samples.insert(util_variance_samples.end(), o.util_variance_samples.begin(),
                                 o.util_variance_samples.end());
    completed += o.completed;
    correct += o.correct;
    wall_span += o.wall_span;
    auto add = [](std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
      if (a.size() < b.size()) a.resize(b.size(), 0);
      for (std::size_t i = 0; i < b.size(); ++i) a[i] += b[i];
    };
    add(width_histogram, o.width_histogram);
    add(server_histogram, o.server_histogram);
  }

  bool operator==(const MetricsRecord&) const = default;
};

// ---------------------------------------------------------------------------
// randomness
//
// mt19937_64 output is fixed by the standard; the distributions below are
// written out by hand because the std:: ones are implementation-defined.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent named stream derived from a master seed.
  static Rng substream(std::uint64_t master, std::string_view name) {
    return Rng(splitmix64(master ^ splitmix64(fnv1a64(name))));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  bool bernoulli(double p) { return uniform() < p; }

  std::size_t index(std::size_t n) {
    return std::min(static_cast<std::size_t>(uniform() * static_cast<double>(n)), n - 1);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace slimsched
