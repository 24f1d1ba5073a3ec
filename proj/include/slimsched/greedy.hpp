#pragma once

// Per-server best-fit greedy executor for a segmented slimmable backbone.
//
// The executor peeks the FIFO head key (segment, w_req, w_prev), gathers up
// to B_max requests with that key, and hands them to the free instance of the
// same segment with the smallest width >= w_req. When no such instance exists
// it loads one (VRAM budget and utilization gated) and, if the key's backlog
// has reached Q_th, up to N_new of them. A failed dispatch puts the batch back
// at the queue front in its original order. Idle instances are unloaded after
// t_idle.

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "slimsched/core.hpp"
#include "slimsched/devmodel.hpp"

namespace slimsched {

// FIFO of requests with an index per batch key, so batch formation does not
// rescan the whole queue. Order is kept by a position counter that grows at
// the back and shrinks at the front.
class RequestQueue {
 public:
  bool empty() const { return order_.empty(); }
  std::size_t size() const { return order_.size(); }

  void push_back(Request r) { insert(back_++, std::move(r)); }

  // Re-inserts `batch` ahead of everything else, keeping its internal order.
  void push_front(std::vector<Request> batch) {
    for (auto it = batch.rbegin(); it != batch.rend(); ++it) insert(--front_, std::move(*it));
  }

  const Request& head() const { return order_.begin()->second; }
  BatchKey head_key() const { return head().key(); }

  std::size_t count(const BatchKey& key) const {
    auto it = by_key_.find(key);
    return it == by_key_.end() ? 0 : it->second.size();
  }

  // Removes and returns the first `limit` requests carrying `key`, oldest first.
  std::vector<Request> take(const BatchKey& key, int limit) {
    std::vector<Request> out;
    auto it = by_key_.find(key);
    if (it == by_key_.end()) return out;
    auto& positions = it->second;
    while (!positions.empty() && static_cast<int>(out.size()) < limit) {
      auto pos = *positions.begin();
      positions.erase(positions.begin());
      auto node = order_.find(pos);
      out.push_back(std::move(node->second));
      order_.erase(node);
    }
    if (positions.empty()) by_key_.erase(it);
    return out;
  }

  std::vector<Request> to_vector() const {
    std::vector<Request> out;
    for (const auto& [_, r] : order_) out.push_back(r);
    return out;
  }

 private:
  void insert(std::int64_t pos, Request r) {
    by_key_[r.key()].insert(pos);
    order_.emplace(pos, std::move(r));
  }

  std::map<std::int64_t, Request> order_;
  std::map<BatchKey, std::set<std::int64_t>> by_key_;
  std::int64_t back_ = 0;
  std::int64_t front_ = 0;
};

inline std::vector<Request> form_batch(RequestQueue& queue, const BatchKey& key, int B_max) {
  return queue.take(key, B_max);
}

// Free instance of `segment` with the minimal width >= w_req; ties go to the
// lowest creation index.
template <typename Instances>
auto find_free_best_fit(Instances& instances, int segment, WidthRatio w_req)
    -> decltype(&*std::begin(instances)) {
  decltype(&*std::begin(instances)) best = nullptr;
  for (auto& inst : instances) {
    if (inst.busy || inst.segment != segment || inst.width < w_req) continue;
    if (best == nullptr || inst.width < best->width ||
        (inst.width == best->width && inst.index < best->index))
      best = &inst;
  }
  return best;
}

struct ServerState {
  int id = 0;
  RequestQueue queue;
  std::vector<InstanceState> instances;
  DeviceSpec device;
  DeviceState device_state;
  SchedulerKnobs knobs;  // M_max follows device.m_max
  SegmentProfiles profiles = default_segment_profiles();
  std::optional<double> latest_util;
  std::uint64_t next_instance_index = 0;
  // Instances currently loading, keyed by instance index, with ready time.
  std::map<std::uint64_t, Seconds> loading;

  static ServerState make(int id, const DeviceSpec& dev, SchedulerKnobs knobs, const SegmentProfiles& profiles) {
    ServerState s;
    s.id = id;
    s.device = dev;
    s.device_state = DeviceState::fresh(dev);
    knobs.M_max = dev.m_max;
    s.knobs = std::move(knobs);
    s.profiles = profiles;
    return s;
  }

  Bytes resident_bytes() const {
    Bytes total = 0.0;
    for (const auto& i : instances) total += i.resident_bytes;
    return total;
  }

  // instances stay sorted by index: appended in creation order, erased stably
  InstanceState* find_instance(std::uint64_t index) {
    auto it = std::lower_bound(instances.begin(), instances.end(), index,
                               [](const InstanceState& i, std::uint64_t x) { return i.index < x; });
    return it != instances.end() && it->index == index ? &*it : nullptr;
  }

  void sample_utilization(Seconds now) {
    device_state.prune(now, device.util_window);
    latest_util = utilization(device_state, now, device.util_window);
  }
};

inline bool can_load(const ServerState& server, int segment, WidthRatio w) {
  const Bytes bytes = param_bytes(server.profiles.at(segment), w);
  if (server.device_state.vram_used + bytes > server.knobs.M_max) return false;
  if (server.latest_util && *server.latest_util >= server.knobs.U_blk) return false;
  return true;
}

struct LoadedInstance {
  std::uint64_t index = 0;
  Seconds ready_at = 0.0;
};

// Loads one (segment, w) instance if can_load allows it. The instance stays
// busy for knobs.load_time; the caller schedules its readiness.
inline std::optional<LoadedInstance> load_instance(ServerState& server, int segment, WidthRatio w, Seconds now) {
  if (!can_load(server, segment, w)) return std::nullopt;
  InstanceState inst;
  inst.index = server.next_instance_index++;
  inst.segment = segment;
  inst.width = w;
  inst.device = server.device.id;
  inst.busy = true;
  inst.t_last = now;
  inst.resident_bytes = param_bytes(server.profiles.at(segment), w);
  server.device_state.vram_used += inst.resident_bytes;
  server.instances.push_back(inst);
  const Seconds ready = now + server.knobs.load_time;
  server.loading[inst.index] = ready;
  return LoadedInstance{inst.index, ready};
}

// Loading finished: the instance becomes free.
inline void mark_ready(ServerState& server, std::uint64_t index, Seconds now) {
  server.loading.erase(index);
  if (auto* inst = server.find_instance(index)) {
    inst->busy = false;
    inst->t_last = now;
  }
}

// Opportunistic scale-up for `key`: when the key's backlog reaches Q_th, load
// up to N_new instances, each gated by can_load.
inline std::vector<LoadedInstance> scale_up(ServerState& server, const BatchKey& key, std::size_t backlog,
                                            Seconds now) {
  std::vector<LoadedInstance> loaded;
  if (backlog < static_cast<std::size_t>(server.knobs.Q_th)) return loaded;
  for (int i = 0; i < server.knobs.N_new; ++i) {
    auto inst = load_instance(server, key.segment, key.w_req, now);
    if (!inst) break;
    loaded.push_back(*inst);
  }
  return loaded;
}

struct Dispatch {
  int server = 0;
  std::uint64_t instance = 0;
  std::vector<Request> batch;
  WidthRatio executed_width;
  Seconds submitted = 0.0;
  Seconds start = 0.0;
  Seconds end = 0.0;
  Bytes activation = 0.0;
};

struct DispatchResult {
  std::optional<Dispatch> dispatched;
  std::vector<LoadedInstance> loaded;
};

// One pass of the executor loop. Precondition: queue non-empty.
inline DispatchResult dispatch_step(ServerState& server, Seconds now) {
  DispatchResult result;
  if (server.queue.empty()) return result;
  const BatchKey key = server.queue.head_key();
  const std::size_t backlog = server.queue.count(key);
  std::vector<Request> batch = form_batch(server.queue, key, server.knobs.B_max);
  server.sample_utilization(now);

  InstanceState* inst = find_free_best_fit(server.instances, key.segment, key.w_req);
  if (inst == nullptr) {
    result.loaded = scale_up(server, key, backlog, now);
    if (result.loaded.empty()) {
      // A single load, unless an instance able to serve the key is already
      // on its way in.
      const bool pending = std::any_of(server.loading.begin(), server.loading.end(), [&](const auto& entry) {
        const auto* l = server.find_instance(entry.first);
        return l && l->segment == key.segment && l->width >= key.w_req;
      });
      if (!pending)
        if (auto one = load_instance(server, key.segment, key.w_req, now)) result.loaded.push_back(*one);
    }
    inst = find_free_best_fit(server.instances, key.segment, key.w_req);
  }

  const int b = static_cast<int>(batch.size());
  const auto& profile = server.profiles.at(key.segment);
  const Bytes act = activation_bytes(profile, key.w_req, b);
  if (inst == nullptr || server.device_state.vram_used + act > server.device.vram_total) {
    server.queue.push_front(std::move(batch));
    return result;
  }

  inst->busy = true;
  server.device_state.vram_used += act;
  const Seconds duration = service_time(server.device, profile, key.w_req, b);
  const BusyInterval iv = server.device_state.submit(now, server.device.t0, duration - server.device.t0);

  Dispatch d;
  d.server = server.id;
  d.instance = inst->index;
  d.batch = std::move(batch);
  d.executed_width = key.w_req;
  d.submitted = now;
  d.start = iv.start;
  d.end = iv.end;
  d.activation = act;
  result.dispatched = std::move(d);
  return result;
}

inline void complete_batch(ServerState& server, const Dispatch& d, Seconds now) {
  server.device_state.vram_used -= d.activation;
  if (auto* inst = server.find_instance(d.instance)) {
    inst->busy = false;
    inst->t_last = now;
  }
}

inline std::vector<InstanceState> unloader_step(ServerState& server, Seconds now) {
  std::vector<InstanceState> removed;
  std::erase_if(server.instances, [&](const InstanceState& i) {
    if (i.busy || now - i.t_last < server.knobs.t_idle) return false;
    server.device_state.vram_used -= i.resident_bytes;
    removed.push_back(i);
    return true;
  });
  return removed;
}

}  // namespace slimsched
