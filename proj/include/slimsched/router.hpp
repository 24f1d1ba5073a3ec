#pragma once

// Cluster-level routing interface. A router looks at the global telemetry
// snapshot and binds the next group of routable requests to a server, and
// optionally to a width for their next segment.

#include <cstdint>
#include <optional>
#include <vector>

#include "slimsched/core.hpp"

namespace slimsched {

struct ServerTelemetry {
  double queue = 0.0;  // requests waiting in the server's FIFO
  Watts power = 0.0;
  double util = 0.0;  // fraction in [0, 1]

  bool operator==(const ServerTelemetry&) const = default;
};

// Observation: [q_fifo, c_done, q_1, P_1, U_1, ..., q_N, P_N, U_N].
struct GlobalState {
  double q_fifo = 0.0;
  double c_done = 0.0;
  std::vector<ServerTelemetry> per_server;

  std::size_t dim() const { return 2 + 3 * per_server.size(); }

  std::vector<double> to_vector() const {
    std::vector<double> v{q_fifo, c_done};
    v.reserve(dim());
    for (const auto& s : per_server) {
      v.push_back(s.queue);
      v.push_back(s.power);
      v.push_back(s.util);
    }
    return v;
  }

  bool operator==(const GlobalState&) const = default;
};

inline std::size_t state_dim(std::size_t servers) { return 2 + 3 * servers; }

struct ActionTriple {
  std::size_t srv = 0;
  std::size_t w = 0;
  std::size_t g = 0;

  bool operator==(const ActionTriple&) const = default;
};

struct RoutingDecision {
  std::size_t server = 0;
  std::optional<std::size_t> width_index;  // empty: keep each request's width
  int group = 1;                           // requests bound by this decision
};

// What the simulator reports once every request of a routed block has
// finished the stage it was routed for.
struct BlockOutcome {
  std::uint64_t block_id = 0;
  Seconds latency = 0.0;  // decision to last stage completion
  Watts mean_power = 0.0;
  std::vector<double> utils;
  double accuracy_prior = 0.0;
  std::size_t requests = 0;
};

class Router {
 public:
  virtual ~Router() = default;
  virtual RoutingDecision decide(const GlobalState& state, std::uint64_t block_id) = 0;
  virtual void on_block_complete(const BlockOutcome&) {}
};

// Uniform over every head; ignores the state.
inline ActionTriple random_router(const GlobalState& /*state*/, std::size_t servers, std::size_t widths,
                                  std::size_t groups, Rng& rng) {
  ActionTriple a;
  a.srv = rng.index(servers);
  a.w = rng.index(widths);
  a.g = rng.index(groups);
  return a;
}

// Baseline: uniform random server and group size. Widths stay as the workload
// sampled them unless keep_width is off.
class RandomRouter final : public Router {
 public:
  RandomRouter(std::size_t servers, std::size_t widths, std::vector<int> group_sizes, Rng rng,
               bool keep_width = true)
      : servers_(servers), widths_(widths), groups_(std::move(group_sizes)), rng_(rng), keep_width_(keep_width) {}

  RoutingDecision decide(const GlobalState& state, std::uint64_t) override {
    const ActionTriple a = random_router(state, servers_, widths_, groups_.size(), rng_);
    RoutingDecision d;
    d.server = a.srv;
    if (!keep_width_) d.width_index = a.w;
    d.group = groups_.at(a.g);
    return d;
  }

 private:
  std::size_t servers_;
  std::size_t widths_;
  std::vector<int> groups_;
  Rng rng_;
  bool keep_width_;
};

class FixedRouter final : public Router {
 public:
  FixedRouter(std::size_t server, std::optional<std::size_t> width_index, int group)
      : decision_{server, width_index, group} {}

  RoutingDecision decide(const GlobalState&, std::uint64_t) override { return decision_; }

 private:
  RoutingDecision decision_;
};

}  // namespace slimsched
