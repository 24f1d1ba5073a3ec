#pragma once

// Parametric cost model of one simulated GPU.
//
//   service time   T = t0 + kappa * c_s * b * w^2
//   parameters     P_s * w^2
//   activations    a_s * b * w^2
//   power          p_idle + (p_peak - p_idle) * u
//
// A batch first pays the dispatch overhead t0, which overlaps with whatever
// else the device is doing, and then its compute part, which runs on a single
// serial stream: compute waits for earlier compute to finish. On an idle
// device a batch therefore takes exactly T. Utilization is the compute-busy
// fraction of a trailing window.

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "slimsched/core.hpp"

namespace slimsched {

struct DeviceSpec {
  int id = 0;
  std::string name = "gpu";
  Seconds t0 = 0.002;
  double kappa = 0.001;  // seconds per work unit
  Watts p_idle = 60.0;
  Watts p_peak = 250.0;
  Bytes vram_total = 11.0e9;
  Bytes m_max = 4.0e9;
  Seconds util_window = 1.0;

  void validate() const {
    const std::string at = "cluster.devices[" + std::to_string(id) + "].";
    if (!(p_idle > 0.0 && p_idle <= p_peak)) throw ConfigError(at + "power: need 0 < p_idle <= p_peak");
    if (!(t0 >= 0.0)) throw ConfigError(at + "t0: must be >= 0");
    if (!(kappa > 0.0)) throw ConfigError(at + "kappa: must be positive");
    if (!(vram_total > 0.0)) throw ConfigError(at + "vram_total: must be positive");
    if (!(m_max > 0.0)) throw ConfigError(at + "m_max: must be positive");
    if (m_max > vram_total) throw ConfigError(at + "m_max: exceeds vram_total");
    if (!(util_window > 0.0)) throw ConfigError(at + "util_window: must be positive");
  }

  bool operator==(const DeviceSpec&) const = default;
};

struct SegmentProfile {
  double compute_weight = 1.0;  // work units per image at full width
  Bytes param_base = 8.0e6;     // bytes at full width
  Bytes act_base = 4.0e6;       // bytes per image at full width

  bool operator==(const SegmentProfile&) const = default;
};

using SegmentProfiles = std::array<SegmentProfile, kNumSegments>;

inline SegmentProfiles default_segment_profiles() {
  return {SegmentProfile{1.0, 8.0e6, 4.0e6}, SegmentProfile{1.5, 16.0e6, 3.0e6},
          SegmentProfile{2.0, 32.0e6, 2.0e6}, SegmentProfile{1.0, 8.0e6, 1.0e6}};
}

// Two fast devices and one slow one.
inline std::vector<DeviceSpec> default_cluster() {
  DeviceSpec fast{0, "fast0", 0.002, 0.0010, 60.0, 250.0, 11.0e9, 4.0e9, 1.0};
  DeviceSpec fast1 = fast;
  fast1.id = 1;
  fast1.name = "fast1";
  DeviceSpec slow{2, "slow", 0.003, 0.0025, 50.0, 165.0, 6.0e9, 4.0e9, 1.0};
  return {fast, fast1, slow};
}

inline Seconds service_time(const DeviceSpec& dev, const SegmentProfile& seg, WidthRatio w, int batch) {
  if (batch < 1) throw PreconditionError("service_time: batch size must be >= 1");
  return dev.t0 + dev.kappa * seg.compute_weight * batch * w.squared();
}

inline Bytes param_bytes(const SegmentProfile& seg, WidthRatio w) { return seg.param_base * w.squared(); }

inline Bytes activation_bytes(const SegmentProfile& seg, WidthRatio w, int batch) {
  if (batch < 1) throw PreconditionError("activation_bytes: batch size must be >= 1");
  return seg.act_base * batch * w.squared();
}

inline Watts power_draw(const DeviceSpec& dev, double u) {
  if (!(u >= 0.0 && u <= 1.0)) throw PreconditionError("power_draw: utilization outside [0, 1]");
  return dev.p_idle + (dev.p_peak - dev.p_idle) * u;
}

struct BusyInterval {
  Seconds start = 0.0;
  Seconds end = 0.0;
};

struct DeviceState {
  // Trailing-window history of the device stream. Intervals are appended in
  // start order and never overlap, since the device runs one batch at a time.
  std::vector<BusyInterval> busy_intervals;
  Bytes vram_used = 0.0;
  Joules energy_accum = 0.0;
  Watts last_power_sample = 0.0;
  Seconds power_since = 0.0;  // time last_power_sample took effect
  Seconds busy_until = 0.0;  // end of the last batch in the device stream
  Seconds total_busy = 0.0;  // over the whole run

  static DeviceState fresh(const DeviceSpec& dev) {
    DeviceState s;
    s.last_power_sample = dev.p_idle;
    return s;
  }

  // Queues a batch's compute behind earlier compute, after its overhead, and
  // returns the compute interval. The batch finishes at its end.
  BusyInterval submit(Seconds now, Seconds overhead, Seconds compute) {
    BusyInterval iv{std::max(now + overhead, busy_until), 0.0};
    iv.end = iv.start + compute;
    busy_until = iv.end;
    busy_intervals.push_back(iv);
    total_busy += compute;
    return iv;
  }

  void prune(Seconds now, Seconds window) {
    const Seconds lo = now - window;
    auto first_live = std::find_if(busy_intervals.begin(), busy_intervals.end(),
                                   [lo](const BusyInterval& iv) { return iv.end >= lo; });
    busy_intervals.erase(busy_intervals.begin(), first_live);
  }
};

inline double utilization(const DeviceState& state, Seconds now, Seconds window) {
  if (now < 0.0) throw PreconditionError("utilization: negative time");
  const Seconds lo = now - window;
  double busy = 0.0;
  for (const auto& iv : state.busy_intervals) {
    const double overlap = std::min(iv.end, now) - std::max(iv.start, lo);
    if (overlap > 0.0) busy += overlap;
  }
  return std::clamp(busy / window, 0.0, 1.0);
}

inline Joules accumulate_energy(DeviceState& state, Watts power, Seconds dt) {
  if (dt < 0.0) throw PreconditionError("accumulate_energy: negative interval");
  const Joules added = power * dt;
  state.energy_accum += added;
  return added;
}

// Closes the current constant-power segment at `now` and starts a new one at
// the power implied by the utilization observed now.
inline Watts resample_power(const DeviceSpec& dev, DeviceState& state, Seconds now) {
  accumulate_energy(state, state.last_power_sample, now - state.power_since);
  state.power_since = now;
  state.prune(now, dev.util_window);
  state.last_power_sample = power_draw(dev, utilization(state, now, dev.util_window));
  return state.last_power_sample;
}

}  // namespace slimsched
