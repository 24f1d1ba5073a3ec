#pragma once

// Deterministic discrete-event engine. Drives Poisson arrivals through a
// router and the per-server greedy executors, chaining every request through
// the four segments and collecting latency, energy, utilization-variance and
// correctness metrics.
//
// Events are processed in (time, seq) order, seq being assigned monotonically,
// so identical seeds and configurations give bit-identical runs.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <variant>
#include <vector>

#include "slimsched/accprior.hpp"
#include "slimsched/core.hpp"
#include "slimsched/devmodel.hpp"
#include "slimsched/greedy.hpp"
#include "slimsched/router.hpp"

namespace slimsched {

struct ClusterConfig {
  std::vector<DeviceSpec> devices = default_cluster();
  SegmentProfiles profiles = default_segment_profiles();

  bool operator==(const ClusterConfig&) const = default;
};

struct WorkloadSpec {
  double rate = 500.0;                 // Poisson arrival events per second
  Seconds horizon = 25.0;              // arrivals stop at this time
  std::uint64_t max_requests = 0;      // 0: unlimited
  std::vector<double> width_demand;    // over the width set; empty: uniform
  int burst = 1;                       // requests per arrival event
  std::uint64_t seed = 1;

  void validate(const WidthSet& widths) const {
    if (!(rate > 0.0)) throw ConfigError("workload.rate: must be positive");
    if (!(horizon >= 0.0)) throw ConfigError("workload.horizon: must be >= 0");
    if (burst < 1) throw ConfigError("workload.burst: must be >= 1");
    if (!width_demand.empty()) {
      if (width_demand.size() != widths.size())
        throw ConfigError("workload.width_demand: needs one probability per width");
      double sum = 0.0;
      for (double p : width_demand) {
        if (!(p >= 0.0)) throw ConfigError("workload.width_demand: negative probability");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("workload.width_demand: must sum to 1");
    }
  }

  bool operator==(const WorkloadSpec&) const = default;
};

// Arrival instants of a Poisson process with i.i.d. Exponential(rate) gaps,
// truncated at the horizon (and at max_requests arrival events if set).
inline std::vector<Seconds> generate_arrivals(const WorkloadSpec& spec, Rng& rng) {
  std::vector<Seconds> times;
  Seconds t = 0.0;
  while (true) {
    t += rng.exponential(spec.rate);
    if (t >= spec.horizon) break;
    if (spec.max_requests > 0 && times.size() >= spec.max_requests) break;
    times.push_back(t);
  }
  return times;
}

inline double util_variance(std::span<const double> utils) { return population_variance(utils); }

struct Completion {
  std::uint64_t id = 0;
  std::array<WidthRatio, kNumSegments> widths{};
  Seconds t_arrival = 0.0;
  Seconds t_completion = 0.0;

  Seconds latency() const { return t_completion - t_arrival; }
};

inline std::variant<Request, Completion> advance_segment(const Request& req, WidthRatio executed, Seconds now) {
  if (req.segment < kNumSegments - 1) {
    Request next = req;
    next.segment = req.segment + 1;
    next.w_prev = executed;
    next.width_history.push_back(executed);
    next.w_req = executed;
    next.t_enqueue = now;
    return next;
  }
  Completion c;
  c.id = req.id;
  for (int s = 0; s < kNumSegments - 1; ++s) c.widths[s] = req.width_history.at(s);
  c.widths[kNumSegments - 1] = executed;
  c.t_arrival = req.t_arrival;
  c.t_completion = now;
  return c;
}

struct SimOptions {
  Seconds router_cadence = 0.01;    // minimum spacing of router ticks
  Seconds telemetry_period = 0.05;
  bool check_invariants = false;    // verify conservation and VRAM after every event
  bool trace = false;               // collect per-tick telemetry rows
  bool power_trace = false;         // collect every constant-power segment
  Seconds stall_timeout = 3600.0;   // no progress for this long with work left: error

  bool operator==(const SimOptions&) const = default;
};

struct EpisodeSetup {
  ClusterConfig cluster;
  SchedulerKnobs knobs;
  WorkloadSpec workload;
  AccuracyTable table = AccuracyTable::published();
  std::vector<int> group_sizes{1, 2, 4, 8};
  SimOptions options;
};

struct TraceRow {
  Seconds time = 0.0;
  int server = 0;
  std::size_t queue = 0;
  Watts power = 0.0;
  double util = 0.0;
  Bytes vram_used = 0.0;
  Bytes resident = 0.0;
};

struct PowerSegment {
  int server = 0;
  Seconds from = 0.0;
  Seconds to = 0.0;
  Watts power = 0.0;
};

inline void validate_setup(const EpisodeSetup& setup) {
  setup.knobs.validate();
  setup.workload.validate(setup.knobs.widths);
  if (setup.cluster.devices.empty()) throw ConfigError("cluster.devices: at least one device required");
  if (setup.group_sizes.empty()) throw ConfigError("ppo.group_sizes: must not be empty");
  for (int g : setup.group_sizes)
    if (g < 1) throw ConfigError("ppo.group_sizes: every group size must be >= 1");
  if (setup.table.empty()) throw ConfigError("accuracy table is empty");
  const WidthRatio widest = setup.knobs.widths.widest();
  for (const auto& dev : setup.cluster.devices) {
    dev.validate();
    for (const auto& seg : setup.cluster.profiles) {
      if (!(seg.compute_weight > 0.0 && seg.param_base > 0.0 && seg.act_base > 0.0))
        throw ConfigError("cluster.segments: every profile value must be positive");
      if (param_bytes(seg, widest) > dev.m_max)
        throw ConfigError("cluster.devices[" + std::to_string(dev.id) + "].m_max: cannot hold one full-width instance");
      if (dev.m_max + activation_bytes(seg, widest, setup.knobs.B_max) > dev.vram_total)
        throw ConfigError("cluster.devices[" + std::to_string(dev.id) +
                          "].m_max: no room left for a full batch of activations");
    }
  }
}

class Simulator {
 public:
  enum class EventKind { Arrival, RouterTick, BatchComplete, InstanceReady, UtilSample, UnloaderTick };

  Simulator(const EpisodeSetup& setup, Router& router)
      : setup_(setup),
        router_(&router),
        widths_(setup.knobs.widths),
        width_rng_(Rng::substream(setup.workload.seed, "widths")),
        correctness_rng_(Rng::substream(setup.workload.seed, "correctness")) {
    validate_setup(setup_);
    for (std::size_t i = 0; i < setup_.cluster.devices.size(); ++i)
      servers_.push_back(ServerState::make(static_cast<int>(i), setup_.cluster.devices[i], setup_.knobs,
                                           setup_.cluster.profiles));
    Rng arrival_rng = Rng::substream(setup_.workload.seed, "arrivals");
    arrival_times_ = generate_arrivals(setup_.workload, arrival_rng);
    metrics_.width_histogram.assign(widths_.size(), 0);
    metrics_.server_histogram.assign(servers_.size(), 0);

    if (!arrival_times_.empty()) push(arrival_times_[0], EventKind::Arrival);
    push(setup_.options.telemetry_period, EventKind::UtilSample);
    for (std::size_t s = 0; s < servers_.size(); ++s)
      push(setup_.knobs.unload_period, EventKind::UnloaderTick, static_cast<std::int64_t>(s));
  }

  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  bool done() const { return events_.empty(); }
  Seconds now() const { return now_; }

  // Processes one event; false once the episode has drained.
  bool step() {
    if (events_.empty()) return false;
    Event ev = events_.top();
    events_.pop();
    if (ev.time < now_) throw Error("event ordering violated");
    now_ = ev.time;
    switch (ev.kind) {
      case EventKind::Arrival: on_arrival(); break;
      case EventKind::RouterTick: on_router_tick(); break;
      case EventKind::BatchComplete: on_batch_complete(static_cast<std::uint64_t>(ev.a)); break;
      case EventKind::InstanceReady: on_instance_ready(static_cast<int>(ev.a), static_cast<std::uint64_t>(ev.b)); break;
      case EventKind::UtilSample: on_util_sample(); break;
      case EventKind::UnloaderTick: on_unloader_tick(static_cast<int>(ev.a)); break;
    }
    if (work_remaining() && now_ - last_progress_ > setup_.options.stall_timeout)
      throw Error("simulation stalled: no dispatch or completion for " +
                  std::to_string(setup_.options.stall_timeout) + " s");
    if (setup_.options.check_invariants) check_invariants();
    if (events_.empty()) finish();
    return true;
  }

  void run() {
    while (step()) {
    }
  }

  GlobalState snapshot_state() {
    GlobalState st;
    st.c_done = static_cast<double>(metrics_.completed);
    double queued = static_cast<double>(pending_.size());
    for (auto& s : servers_) {
      resample(s);
      const double q = static_cast<double>(s.queue.size());
      queued += q;
      st.per_server.push_back({q, s.device_state.last_power_sample, utilization(s.device_state, now_, s.device.util_window)});
    }
    st.q_fifo = queued;
    return st;
  }

  const MetricsRecord& metrics() const { return metrics_; }
  const std::vector<ServerState>& servers() const { return servers_; }
  const std::vector<TraceRow>& trace() const { return trace_; }
  const std::vector<PowerSegment>& power_trace() const { return power_trace_; }
  std::uint64_t arrivals() const { return arrivals_; }
  std::uint64_t in_flight() const { return in_flight_; }
  std::uint64_t queued() const {
    std::uint64_t q = pending_.size();
    for (const auto& s : servers_) q += s.queue.size();
    return q;
  }
  std::size_t arrival_events() const { return arrival_times_.size(); }
  double max_vram_fraction() const { return max_vram_fraction_; }
  std::uint64_t events_processed() const { return seq_; }

  void check_invariants() const {
    if (arrivals_ != metrics_.completed + queued() + in_flight_)
      throw Error("conservation violated at t=" + std::to_string(now_));
    for (const auto& s : servers_) {
      if (s.resident_bytes() > s.knobs.M_max) throw Error("VRAM budget exceeded on server " + std::to_string(s.id));
      if (s.device_state.vram_used > s.device.vram_total + 1e-6)
        throw Error("VRAM total exceeded on server " + std::to_string(s.id));
    }
  }

 private:
  struct Event {
    Seconds time = 0.0;
    std::uint64_t seq = 0;
    EventKind kind = EventKind::Arrival;
    std::int64_t a = 0;
    std::int64_t b = 0;
  };
  struct Later {
    bool operator()(const Event& x, const Event& y) const {
      return x.time != y.time ? x.time > y.time : x.seq > y.seq;
    }
  };
  struct Block {
    Seconds decided = 0.0;
    std::size_t remaining = 0;
    std::size_t size = 0;
    double prior_sum = 0.0;
  };

  void push(Seconds t, EventKind kind, std::int64_t a = 0, std::int64_t b = 0) {
    events_.push(Event{t, seq_++, kind, a, b});
  }

  bool work_remaining() const {
    return next_arrival_ < arrival_times_.size() || arrivals_ > metrics_.completed;
  }

  void resample(ServerState& s) {
    const Watts before = s.device_state.last_power_sample;
    const Seconds since = s.device_state.power_since;
    resample_power(s.device, s.device_state, now_);
    if (setup_.options.power_trace && now_ > since) power_trace_.push_back({s.id, since, now_, before});
  }

  WidthRatio sample_demand_width() {
    const auto& demand = setup_.workload.width_demand;
    if (demand.empty()) return widths_[width_rng_.index(widths_.size())];
    const double u = width_rng_.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < demand.size(); ++i) {
      acc += demand[i];
      if (u < acc) return widths_[i];
    }
    return widths_.widest();
  }

  void schedule_router_tick() {
    if (tick_scheduled_) return;
    tick_scheduled_ = true;
    const Seconds t = last_tick_ ? std::max(now_, *last_tick_ + setup_.options.router_cadence) : now_;
    push(t, EventKind::RouterTick);
  }

  void on_arrival() {
    for (int i = 0; i < setup_.workload.burst; ++i) {
      Request r;
      r.id = next_request_id_++;
      r.segment = 0;
      r.w_req = sample_demand_width();
      r.t_arrival = now_;
      r.t_enqueue = now_;
      pending_.push_back(std::move(r));
      ++arrivals_;
    }
    ++next_arrival_;
    if (next_arrival_ < arrival_times_.size()) push(arrival_times_[next_arrival_], EventKind::Arrival);
    schedule_router_tick();
  }

  void on_router_tick() {
    tick_scheduled_ = false;
    last_tick_ = now_;
    while (!pending_.empty()) {
      const GlobalState state = snapshot_state();
      const std::uint64_t block_id = next_block_id_++;
      const RoutingDecision d = router_->decide(state, block_id);
      if (d.server >= servers_.size()) throw Error("router chose server out of range");
      if (d.width_index && *d.width_index >= widths_.size()) throw Error("router chose width out of range");
      if (d.group < 1) throw Error("router chose an empty group");

      const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(d.group), pending_.size());
      Block blk;
      blk.decided = now_;
      blk.remaining = take;
      blk.size = take;
      blocks_[block_id] = blk;

      auto& server = servers_[d.server];
      for (std::size_t i = 0; i < take; ++i) {
        Request r = std::move(pending_.front());
        pending_.pop_front();
        if (d.width_index) r.w_req = widths_[*d.width_index];
        if (i == 0) ++metrics_.width_histogram[*widths_.index_of(r.w_req)];
        r.t_enqueue = now_;
        r.block = block_id;
        server.queue.push_back(std::move(r));
      }
      metrics_.server_histogram[d.server] += take;
      try_dispatch(server);
    }
  }

  void try_dispatch(ServerState& server) {
    while (!server.queue.empty()) {
      DispatchResult res = dispatch_step(server, now_);
      for (const auto& l : res.loaded)
        push(l.ready_at, EventKind::InstanceReady, server.id, static_cast<std::int64_t>(l.index));
      if (!res.dispatched) break;
      const std::uint64_t id = next_dispatch_id_++;
      in_flight_ += res.dispatched->batch.size();
      push(res.dispatched->end, EventKind::BatchComplete, static_cast<std::int64_t>(id));
      dispatches_.emplace(id, std::move(*res.dispatched));
      last_progress_ = now_;
    }
    resample(server);
    max_vram_fraction_ = std::max(max_vram_fraction_, server.resident_bytes() / server.knobs.M_max);
  }

  void on_batch_complete(std::uint64_t id) {
    auto node = dispatches_.extract(id);
    Dispatch& d = node.mapped();
    auto& server = servers_[d.server];
    complete_batch(server, d, now_);
    in_flight_ -= d.batch.size();
    last_progress_ = now_;

    std::vector<std::uint64_t> finished_blocks;
    for (const Request& r : d.batch) {
      auto outcome = advance_segment(r, d.executed_width, now_);
      double contribution = 0.0;
      if (auto* next = std::get_if<Request>(&outcome)) {
        contribution = setup_.table.prior_lookup(std::span<const WidthRatio>(next->width_history));
        pending_.push_back(std::move(*next));
      } else {
        const auto& c = std::get<Completion>(outcome);
        const bool correct = setup_.table.sample_correctness(c.widths, correctness_rng_);
        ++metrics_.completed;
        if (correct) ++metrics_.correct;
        metrics_.latency_samples.push_back(c.latency());
        metrics_.wall_span = now_;
        contribution = correct ? 1.0 : 0.0;
      }
      Block& blk = blocks_.at(r.block);
      blk.prior_sum += contribution;
      if (--blk.remaining == 0) finished_blocks.push_back(r.block);
    }
    for (auto b : finished_blocks) finish_block(b);
    if (!pending_.empty()) schedule_router_tick();
    try_dispatch(server);
  }

  void finish_block(std::uint64_t block_id) {
    auto node = blocks_.extract(block_id);
    const Block& blk = node.mapped();
    BlockOutcome out;
    out.block_id = block_id;
    out.latency = now_ - blk.decided;
    out.requests = blk.size;
    out.accuracy_prior = blk.prior_sum / static_cast<double>(blk.size);
    double power = 0.0;
    for (auto& s : servers_) {
      resample(s);
      power += s.device_state.last_power_sample;
      out.utils.push_back(utilization(s.device_state, now_, s.device.util_window));
    }
    out.mean_power = power / static_cast<double>(servers_.size());
    metrics_.energy_samples.push_back(out.mean_power * out.latency);
    router_->on_block_complete(out);
  }

  void on_instance_ready(int server, std::uint64_t index) {
    mark_ready(servers_[server], index, now_);
    try_dispatch(servers_[server]);
  }

  void on_util_sample() {
    std::vector<double> utils;
    for (auto& s : servers_) {
      s.sample_utilization(now_);
      resample(s);
      utils.push_back(*s.latest_util);
      if (setup_.options.trace)
        trace_.push_back({now_, s.id, s.queue.size(), s.device_state.last_power_sample, *s.latest_util,
                          s.device_state.vram_used, s.resident_bytes()});
    }
    metrics_.util_variance_samples.push_back(util_variance(utils));
    for (auto& s : servers_) try_dispatch(s);
    if (work_remaining()) push(now_ + setup_.options.telemetry_period, EventKind::UtilSample);
  }

  void on_unloader_tick(int server) {
    auto& s = servers_[server];
    if (!unloader_step(s, now_).empty()) try_dispatch(s);
    if (work_remaining()) push(now_ + setup_.knobs.unload_period, EventKind::UnloaderTick, server);
  }

  void finish() {
    for (auto& s : servers_) resample(s);
  }

  EpisodeSetup setup_;
  Router* router_;
  WidthSet widths_;
  Rng width_rng_;
  Rng correctness_rng_;
  std::vector<ServerState> servers_;
  std::vector<Seconds> arrival_times_;
  std::size_t next_arrival_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> events_;
  std::uint64_t seq_ = 0;
  Seconds now_ = 0.0;
  Seconds last_progress_ = 0.0;
  std::deque<Request> pending_;
  std::map<std::uint64_t, Dispatch> dispatches_;
  std::map<std::uint64_t, Block> blocks_;
  bool tick_scheduled_ = false;
  std::optional<Seconds> last_tick_;
  std::uint64_t next_request_id_ = 0;
  std::uint64_t next_block_id_ = 0;
  std::uint64_t next_dispatch_id_ = 0;
  std::uint64_t arrivals_ = 0;
  std::uint64_t in_flight_ = 0;
  double max_vram_fraction_ = 0.0;
  MetricsRecord metrics_;
  std::vector<TraceRow> trace_;
  std::vector<PowerSegment> power_trace_;
};

inline MetricsRecord run_episode(Router& router, const EpisodeSetup& setup) {
  Simulator sim(setup, router);
  sim.run();
  return sim.metrics();
}

}  // namespace slimsched
