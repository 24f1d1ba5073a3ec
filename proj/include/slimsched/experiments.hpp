#pragma once

// Experiment drivers shared by the CLI and the tests: baseline and policy
// runs, the single-device load sweep, the run-vs-baseline comparison, and the
// CSV / JSON writers for their outputs.
//
// Every CSV starts with a provenance comment line
//   # config_hash=<16 hex> seed=<master seed>
// followed by a header row. Numbers are printed in shortest round-trip form,
// so the same run always gives the same bytes.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "slimsched/config.hpp"
#include "slimsched/core.hpp"
#include "slimsched/ppo.hpp"
#include "slimsched/router.hpp"
#include "slimsched/simkernel.hpp"

namespace slimsched {

inline std::string fmt_num(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return ec == std::errc{} ? std::string(buf, end) : std::string("nan");
}

struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
};

inline Provenance provenance(const ExperimentConfig& c) { return {config_hash(c), c.seed}; }

inline void write_provenance(std::ostream& os, const Provenance& p) {
  os << "# config_hash=" << p.config_hash << " seed=" << p.seed << "\n";
}

// ---------------------------------------------------------------------------
// runs

inline MetricsRecord run_random_baseline(const EpisodeSetup& setup, std::uint64_t seed) {
  RandomRouter router(setup.cluster.devices.size(), setup.knobs.widths.size(), setup.group_sizes,
                      Rng::substream(seed, "policy"));
  return run_episode(router, setup);
}

// The summary rows of the result tables: accuracy, latency, energy,
// utilization variance and completion throughput.
struct SummaryRow {
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
};

inline std::vector<SummaryRow> summarize(const MetricsRecord& m) {
  std::vector<SummaryRow> rows;
  rows.push_back({"accuracy_pct", 100.0 * m.accuracy(), 0.0});
  auto add = [&](const char* name, const std::vector<double>& xs) {
    if (xs.empty()) {
      rows.push_back({name, std::nan(""), std::nan("")});
      return;
    }
    const MeanStd s = mean_std(xs);
    rows.push_back({name, s.mean, s.std});
  };
  add("latency_s", m.latency_samples);
  add("energy_j", m.energy_samples);
  add("util_variance", m.util_variance_samples);
  rows.push_back({"throughput_completed", static_cast<double>(m.completed), 0.0});
  rows.push_back({"throughput_per_s", m.throughput_per_second(), 0.0});
  rows.push_back({"wall_span_s", m.wall_span, 0.0});
  return rows;
}

inline void write_summary_csv(std::ostream& os, const MetricsRecord& m, const Provenance& p) {
  write_provenance(os, p);
  os << "metric,mean,std\n";
  for (const auto& r : summarize(m)) os << r.metric << "," << fmt_num(r.mean) << "," << fmt_num(r.std) << "\n";
}

inline void write_histogram_csv(std::ostream& os, const MetricsRecord& m, const WidthSet& widths,
                                const Provenance& p) {
  write_provenance(os, p);
  os << "kind,index,label,count\n";
  for (std::size_t i = 0; i < m.width_histogram.size(); ++i)
    os << "width," << i << "," << fmt_num(widths[i].value) << "," << m.width_histogram[i] << "\n";
  for (std::size_t i = 0; i < m.server_histogram.size(); ++i)
    os << "server," << i << "," << i << "," << m.server_histogram[i] << "\n";
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows, const Provenance& p) {
  write_provenance(os, p);
  os << "time,server,queue,power_w,util,vram_used,resident\n";
  for (const auto& r : rows)
    os << fmt_num(r.time) << "," << r.server << "," << r.queue << "," << fmt_num(r.power) << "," << fmt_num(r.util)
       << "," << fmt_num(r.vram_used) << "," << fmt_num(r.resident) << "\n";
}

inline void write_curves_csv(std::ostream& os, const std::vector<TrainingCurveRow>& rows, const Provenance& p) {
  write_provenance(os, p);
  os << "update,mean_reward,l_clip,l_v,entropy,epsilon\n";
  for (const auto& r : rows)
    os << r.update << "," << fmt_num(r.mean_reward) << "," << fmt_num(r.l_clip) << "," << fmt_num(r.l_v) << ","
       << fmt_num(r.entropy) << "," << fmt_num(r.epsilon) << "\n";
}

// Raw record of one run, enough to recompute every summary statistic.
inline nlohmann::json run_record_json(const MetricsRecord& m, const Provenance& p, const std::string& router) {
  return {{"config_hash", p.config_hash},
          {"seed", p.seed},
          {"router", router},
          {"latency_samples", m.latency_samples},
          {"energy_samples", m.energy_samples},
          {"util_variance_samples", m.util_variance_samples},
          {"completed", m.completed},
          {"correct", m.correct},
          {"wall_span", m.wall_span},
          {"width_histogram", m.width_histogram},
          {"server_histogram", m.server_histogram}};
}

struct RunRecord {
  std::string label;
  std::string router;
  std::uint64_t seed = 0;
  MetricsRecord metrics;
};

inline RunRecord run_record_from_json(const nlohmann::json& j, std::string label) {
  RunRecord r;
  r.label = std::move(label);
  try {
    r.router = j.at("router").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.metrics.latency_samples = j.at("latency_samples").get<std::vector<double>>();
    r.metrics.energy_samples = j.at("energy_samples").get<std::vector<double>>();
    r.metrics.util_variance_samples = j.at("util_variance_samples").get<std::vector<double>>();
    r.metrics.completed = j.at("completed").get<std::uint64_t>();
    r.metrics.correct = j.at("correct").get<std::uint64_t>();
    r.metrics.wall_span = j.at("wall_span").get<double>();
    r.metrics.width_histogram = j.at("width_histogram").get<std::vector<std::uint64_t>>();
    r.metrics.server_histogram = j.at("server_histogram").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("run record " + r.label + ": " + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// comparison

struct CompareRow {
  std::string label;
  double latency_mean = 0.0, latency_std = 0.0;
  double energy_mean = 0.0, energy_std = 0.0;
  double accuracy_pct = 0.0;
  double completed = 0.0;
  double per_second = 0.0;
  double wall_span = 0.0;
  // percent change relative to the baseline
  double d_latency = 0.0, d_energy = 0.0, d_accuracy = 0.0, d_throughput = 0.0;
};

inline double pct_change(double x, double base) { return base == 0.0 ? (x == 0.0 ? 0.0 : std::nan("")) : 100.0 * (x - base) / base; }

inline std::vector<CompareRow> compare_runs(const RunRecord& baseline, const std::vector<RunRecord>& runs) {
  auto row_of = [](const RunRecord& r) {
    CompareRow c;
    c.label = r.label;
    const MeanStd l = mean_std(r.metrics.latency_samples);
    const MeanStd e = mean_std(r.metrics.energy_samples);
    c.latency_mean = l.mean;
    c.latency_std = l.std;
    c.energy_mean = e.mean;
    c.energy_std = e.std;
    c.accuracy_pct = 100.0 * r.metrics.accuracy();
    c.completed = static_cast<double>(r.metrics.completed);
    c.per_second = r.metrics.throughput_per_second();
    c.wall_span = r.metrics.wall_span;
    return c;
  };
  const CompareRow base = row_of(baseline);
  std::vector<CompareRow> out{base};
  for (const auto& r : runs) {
    if (r.seed != baseline.seed)
      throw ConfigError("run " + r.label + " used seed " + std::to_string(r.seed) + " but the baseline used " +
                        std::to_string(baseline.seed) + "; runs on different workloads are not comparable");
    CompareRow c = row_of(r);
    c.d_latency = pct_change(c.latency_mean, base.latency_mean);
    c.d_energy = pct_change(c.energy_mean, base.energy_mean);
    c.d_accuracy = pct_change(c.accuracy_pct, base.accuracy_pct);
    c.d_throughput = pct_change(c.per_second, base.per_second);
    out.push_back(c);
  }
  return out;
}

inline void write_compare_csv(std::ostream& os, const std::vector<CompareRow>& rows, const Provenance& p) {
  write_provenance(os, p);
  os << "run,latency_mean_s,latency_std_s,energy_mean_j,energy_std_j,accuracy_pct,completed,throughput_per_s,"
        "wall_span_s,d_latency_pct,d_energy_pct,d_accuracy_pct,d_throughput_pct\n";
  for (const auto& r : rows)
    os << r.label << "," << fmt_num(r.latency_mean) << "," << fmt_num(r.latency_std) << "," << fmt_num(r.energy_mean)
       << "," << fmt_num(r.energy_std) << "," << fmt_num(r.accuracy_pct) << "," << fmt_num(r.completed) << ","
       << fmt_num(r.per_second) << "," << fmt_num(r.wall_span) << "," << fmt_num(r.d_latency) << ","
       << fmt_num(r.d_energy) << "," << fmt_num(r.d_accuracy) << "," << fmt_num(r.d_throughput) << "\n";
}

// ---------------------------------------------------------------------------
// single-device load sweep
//
// For each width the arrival-event rate is fixed so that the largest batch in
// the grid offers sweep.load_max of the device's compute capacity; each event
// brings `b` requests and B_max = b, so offered load grows linearly with b.
// The same arrival stream is reused across the grid (common random numbers).

struct SweepRow {
  double width = 0.0;
  int batch = 0;
  double offered_load = 0.0;  // nominal compute fraction
  double utilization = 0.0;   // measured: compute-busy time / wall span
  double mean_latency = 0.0;  // seconds, end to end over the four segments
  double mean_power = 0.0;    // watts, energy / wall span
  std::uint64_t completed = 0;
};

inline SweepRow run_sweep_point(const EpisodeSetup& single, std::size_t width_index, int batch, double event_rate,
                                Seconds horizon, double offered) {
  EpisodeSetup s = single;
  s.workload.rate = event_rate;
  s.workload.burst = batch;
  s.workload.horizon = horizon;
  s.workload.max_requests = 0;
  s.workload.width_demand.assign(s.knobs.widths.size(), 0.0);
  s.workload.width_demand[width_index] = 1.0;
  s.knobs.B_max = batch;
  s.options.trace = false;
  FixedRouter router(0, width_index, batch);
  Simulator sim(s, router);
  sim.run();
  const auto& m = sim.metrics();
  const auto& dev = sim.servers().at(0).device_state;
  SweepRow r;
  r.width = s.knobs.widths[width_index].value;
  r.batch = batch;
  r.offered_load = offered;
  r.completed = m.completed;
  if (m.wall_span > 0.0) {
    r.utilization = std::min(1.0, dev.total_busy / m.wall_span);
    r.mean_power = dev.energy_accum / m.wall_span;
  }
  if (!m.latency_samples.empty()) r.mean_latency = mean_std(m.latency_samples).mean;
  return r;
}

inline std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, std::size_t device) {
  EpisodeSetup base = make_setup(cfg);
  if (device >= base.cluster.devices.size())
    throw ConfigError("sweep: device index " + std::to_string(device) + " out of range (cluster has " +
                      std::to_string(base.cluster.devices.size()) + ")");
  DeviceSpec dev = base.cluster.devices[device];
  dev.id = 0;
  base.cluster.devices = {dev};
  const int bmax = cfg.sweep.batches.back();
  base.knobs.B_max = bmax;
  validate_setup(base);

  std::vector<SweepRow> rows;
  for (std::size_t wi = 0; wi < base.knobs.widths.size(); ++wi) {
    const WidthRatio w = base.knobs.widths[wi];
    double work = 0.0;  // compute seconds per request over all segments
    for (const auto& seg : base.cluster.profiles) work += dev.kappa * seg.compute_weight * w.squared();
    const double rate = cfg.sweep.load_max / (static_cast<double>(bmax) * work);
    const Seconds horizon = static_cast<double>(cfg.sweep.bursts) / rate;
    for (int b : cfg.sweep.batches) {
      const double offered = rate * static_cast<double>(b) * work;
      rows.push_back(run_sweep_point(base, wi, b, rate, horizon, offered));
    }
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows, const Provenance& p) {
  write_provenance(os, p);
  os << "width,batch,offered_load,utilization,mean_latency_s,mean_power_w,completed\n";
  for (const auto& r : rows)
    os << fmt_num(r.width) << "," << r.batch << "," << fmt_num(r.offered_load) << "," << fmt_num(r.utilization) << ","
       << fmt_num(r.mean_latency) << "," << fmt_num(r.mean_power) << "," << r.completed << "\n";
}

// Mean latency over rows at utilization >= hi divided by the mean over rows at
// utilization <= lo, for one width. NaN if either side has no rows.
inline double knee_ratio(const std::vector<SweepRow>& rows, double width, double lo = 0.70, double hi = 0.95) {
  double sum_lo = 0.0, sum_hi = 0.0;
  int n_lo = 0, n_hi = 0;
  for (const auto& r : rows) {
    if (r.width != width) continue;
    if (r.utilization <= lo) {
      sum_lo += r.mean_latency;
      ++n_lo;
    }
    if (r.utilization >= hi) {
      sum_hi += r.mean_latency;
      ++n_hi;
    }
  }
  if (n_lo == 0 || n_hi == 0) return std::nan("");
  return (sum_hi / n_hi) / (sum_lo / n_lo);
}

}  // namespace slimsched
