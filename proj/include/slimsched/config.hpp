#pragma once

// Experiment configuration: one JSON document holding the cluster, scheduler
// knobs, workload, reward weights, exploration schedule, PPO hyperparameters,
// training/sweep settings and the master seed. Every field is optional and
// falls back to the defaults of the corresponding struct. Unknown fields are
// rejected so that typos do not silently run the defaults.

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "slimsched/accprior.hpp"
#include "slimsched/core.hpp"
#include "slimsched/devmodel.hpp"
#include "slimsched/ppo.hpp"
#include "slimsched/simkernel.hpp"

namespace slimsched {

struct SweepSettings {
  std::vector<int> batches{1, 2, 4, 8, 16, 24, 32, 40, 48, 56, 64};
  double load_max = 1.15;  // offered compute load at the largest batch
  int bursts = 300;        // expected arrival events per grid point

  void validate() const {
    if (batches.empty()) throw ConfigError("sweep.batches: must not be empty");
    for (std::size_t i = 0; i < batches.size(); ++i) {
      if (batches[i] < 1) throw ConfigError("sweep.batches: entries must be >= 1");
      if (i > 0 && batches[i] <= batches[i - 1]) throw ConfigError("sweep.batches: must be strictly increasing");
    }
    if (!(load_max > 0.0)) throw ConfigError("sweep.load_max: must be positive");
    if (bursts < 1) throw ConfigError("sweep.bursts: must be >= 1");
  }
  bool operator==(const SweepSettings&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string accuracy_table;  // CSV path, relative to the config file; empty: published table
  ClusterConfig cluster;
  SchedulerKnobs knobs;
  WorkloadSpec workload;
  SimOptions simulation;
  RewardWeights reward;
  ExplorationSchedule exploration;
  PpoHyper ppo;
  TrainingOptions training;
  SweepSettings sweep;

  std::filesystem::path base_dir;  // where relative paths resolve; not serialized

  bool operator==(const ExperimentConfig& o) const {
    return seed == o.seed && accuracy_table == o.accuracy_table && cluster == o.cluster &&
           knobs_equal(knobs, o.knobs) && workload == o.workload && simulation == o.simulation &&
           reward == o.reward && exploration == o.exploration && ppo == o.ppo &&
           training.updates == o.training.updates && training.episode_horizon == o.training.episode_horizon &&
           sweep == o.sweep;
  }

 private:
  static bool knobs_equal(const SchedulerKnobs& a, const SchedulerKnobs& b) {
    return a.r == b.r && a.B_max == b.B_max && a.M_max == b.M_max && a.U_blk == b.U_blk && a.t_idle == b.t_idle &&
           a.Q_th == b.Q_th && a.N_new == b.N_new && a.widths == b.widths && a.load_time == b.load_time &&
           a.unload_period == b.unload_period;
  }
};

namespace detail {

// Reads typed fields out of one JSON object, collecting "path: reason" errors
// instead of stopping at the first.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (!obj_.is_object()) errors_.push_back(path_ + ": expected an object");
  }

  ~FieldReader() {
    if (!obj_.is_object()) return;
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key())) errors_.push_back(join(it.key()) + ": unknown field");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!type_ok<T>(v)) {
      errors_.push_back(join(key) + ": expected " + type_name<T>());
      return;
    }
    out = v.get<T>();
  }

  // Nested object or array; returns nullptr when absent.
  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return nullptr;
    return &obj_.at(key);
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <typename T>
  static bool type_ok(const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      return v.is_boolean();
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v.is_string();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    } else if constexpr (std::is_integral_v<T>) {
      return v.is_number_integer();
    } else if constexpr (std::is_floating_point_v<T>) {
      return v.is_number();
    } else {
      // vectors
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!type_ok<typename T::value_type>(e)) return false;
      return true;
    }
  }

  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) return "a non-negative integer";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else return "an array of " + type_name<typename T::value_type>().substr(2) + "s";
  }

  const nlohmann::json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline void check(std::vector<std::string>& errors, const std::function<void()>& validate) {
  try {
    validate();
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  std::vector<std::string> errors;
  {
    detail::FieldReader root(j, "", errors);
    root.get("seed", c.seed);
    root.get("accuracy_table", c.accuracy_table);

    if (const auto* cl = root.child("cluster")) {
      detail::FieldReader r(*cl, "cluster", errors);
      if (const auto* devs = r.child("devices")) {
        if (!devs->is_array() || devs->empty()) {
          errors.push_back("cluster.devices: expected a non-empty array");
        } else {
          c.cluster.devices.clear();
          for (std::size_t i = 0; i < devs->size(); ++i) {
            DeviceSpec d;
            d.id = static_cast<int>(i);
            d.name = "gpu" + std::to_string(i);
            detail::FieldReader dr((*devs)[i], "cluster.devices[" + std::to_string(i) + "]", errors);
            dr.get("name", d.name);
            dr.get("t0", d.t0);
            dr.get("kappa", d.kappa);
            dr.get("p_idle", d.p_idle);
            dr.get("p_peak", d.p_peak);
            dr.get("vram_total", d.vram_total);
            dr.get("m_max", d.m_max);
            dr.get("util_window", d.util_window);
            c.cluster.devices.push_back(d);
          }
        }
      }
      if (const auto* segs = r.child("segments")) {
        if (!segs->is_array() || segs->size() != static_cast<std::size_t>(kNumSegments)) {
          errors.push_back("cluster.segments: expected an array of exactly 4 profiles");
        } else {
          for (std::size_t i = 0; i < segs->size(); ++i) {
            detail::FieldReader sr((*segs)[i], "cluster.segments[" + std::to_string(i) + "]", errors);
            sr.get("compute_weight", c.cluster.profiles[i].compute_weight);
            sr.get("param_base", c.cluster.profiles[i].param_base);
            sr.get("act_base", c.cluster.profiles[i].act_base);
          }
        }
      }
    }

    if (const auto* kn = root.child("knobs")) {
      detail::FieldReader r(*kn, "knobs", errors);
      r.get("r", c.knobs.r);
      r.get("B_max", c.knobs.B_max);
      r.get("M_max", c.knobs.M_max);
      r.get("U_blk", c.knobs.U_blk);
      r.get("t_idle", c.knobs.t_idle);
      r.get("Q_th", c.knobs.Q_th);
      r.get("N_new", c.knobs.N_new);
      r.get("load_time", c.knobs.load_time);
      r.get("unload_period", c.knobs.unload_period);
      std::vector<double> widths = c.knobs.widths.values();
      r.get("widths", widths);
      try {
        c.knobs.widths = WidthSet(widths);
      } catch (const ConfigError& e) {
        errors.push_back(std::string("knobs.widths: ") + e.what());
      }
    }

    if (const auto* wl = root.child("workload")) {
      detail::FieldReader r(*wl, "workload", errors);
      r.get("rate", c.workload.rate);
      r.get("horizon", c.workload.horizon);
      r.get("max_requests", c.workload.max_requests);
      r.get("width_demand", c.workload.width_demand);
      r.get("burst", c.workload.burst);
    }

    if (const auto* sm = root.child("simulation")) {
      detail::FieldReader r(*sm, "simulation", errors);
      r.get("router_cadence", c.simulation.router_cadence);
      r.get("telemetry_period", c.simulation.telemetry_period);
      r.get("stall_timeout", c.simulation.stall_timeout);
    }

    if (const auto* rw = root.child("reward")) {
      detail::FieldReader r(*rw, "reward", errors);
      r.get("alpha", c.reward.alpha);
      r.get("beta", c.reward.beta);
      r.get("gamma", c.reward.gamma);
      r.get("delta", c.reward.delta);
      r.get("bonus", c.reward.bonus);
      r.get("center_prior", c.reward.center_prior);
    }

    if (const auto* ex = root.child("exploration")) {
      detail::FieldReader r(*ex, "exploration", errors);
      r.get("eps_min", c.exploration.eps_min);
      r.get("eps_max", c.exploration.eps_max);
      r.get("T_dec", c.exploration.T_dec);
    }

    if (const auto* pp = root.child("ppo")) {
      detail::FieldReader r(*pp, "ppo", errors);
      r.get("clip", c.ppo.clip);
      r.get("c_v", c.ppo.c_v);
      r.get("c_H", c.ppo.c_H);
      r.get("epochs", c.ppo.epochs);
      r.get("lr", c.ppo.lr);
      r.get("window", c.ppo.window);
      r.get("max_grad_norm", c.ppo.max_grad_norm);
      r.get("hidden", c.ppo.hidden);
      r.get("group_sizes", c.ppo.group_sizes);
    }

    if (const auto* tr = root.child("training")) {
      detail::FieldReader r(*tr, "training", errors);
      r.get("updates", c.training.updates);
      r.get("episode_horizon", c.training.episode_horizon);
    }

    if (const auto* sw = root.child("sweep")) {
      detail::FieldReader r(*sw, "sweep", errors);
      r.get("batches", c.sweep.batches);
      r.get("load_max", c.sweep.load_max);
      r.get("bursts", c.sweep.bursts);
    }
  }

  c.workload.seed = c.seed;
  c.training.seed = c.seed;
  if (errors.empty()) {
    detail::check(errors, [&] { c.knobs.validate(); });
    detail::check(errors, [&] { c.workload.validate(c.knobs.widths); });
    for (const auto& d : c.cluster.devices) detail::check(errors, [&] { d.validate(); });
    detail::check(errors, [&] {
      if (!(c.simulation.router_cadence >= 0.0)) throw ConfigError("simulation.router_cadence: must be >= 0");
      if (!(c.simulation.telemetry_period > 0.0)) throw ConfigError("simulation.telemetry_period: must be positive");
      if (!(c.simulation.stall_timeout > 0.0)) throw ConfigError("simulation.stall_timeout: must be positive");
    });
    detail::check(errors, [&] { c.reward.validate(); });
    detail::check(errors, [&] { c.exploration.validate(); });
    detail::check(errors, [&] { c.ppo.validate(); });
    detail::check(errors, [&] {
      if (c.training.updates < 0) throw ConfigError("training.updates: must be >= 0");
      if (!(c.training.episode_horizon > 0.0)) throw ConfigError("training.episode_horizon: must be positive");
    });
    detail::check(errors, [&] { c.sweep.validate(); });
  }
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json devices = nlohmann::json::array();
  for (const auto& d : c.cluster.devices)
    devices.push_back({{"name", d.name},
                       {"t0", d.t0},
                       {"kappa", d.kappa},
                       {"p_idle", d.p_idle},
                       {"p_peak", d.p_peak},
                       {"vram_total", d.vram_total},
                       {"m_max", d.m_max},
                       {"util_window", d.util_window}});
  nlohmann::json segments = nlohmann::json::array();
  for (const auto& s : c.cluster.profiles)
    segments.push_back({{"compute_weight", s.compute_weight}, {"param_base", s.param_base}, {"act_base", s.act_base}});
  return {
      {"seed", c.seed},
      {"accuracy_table", c.accuracy_table},
      {"cluster", {{"devices", devices}, {"segments", segments}}},
      {"knobs",
       {{"r", c.knobs.r},
        {"B_max", c.knobs.B_max},
        {"M_max", c.knobs.M_max},
        {"U_blk", c.knobs.U_blk},
        {"t_idle", c.knobs.t_idle},
        {"Q_th", c.knobs.Q_th},
        {"N_new", c.knobs.N_new},
        {"widths", c.knobs.widths.values()},
        {"load_time", c.knobs.load_time},
        {"unload_period", c.knobs.unload_period}}},
      {"workload",
       {{"rate", c.workload.rate},
        {"horizon", c.workload.horizon},
        {"max_requests", c.workload.max_requests},
        {"width_demand", c.workload.width_demand},
        {"burst", c.workload.burst}}},
      {"simulation",
       {{"router_cadence", c.simulation.router_cadence},
        {"telemetry_period", c.simulation.telemetry_period},
        {"stall_timeout", c.simulation.stall_timeout}}},
      {"reward",
       {{"alpha", c.reward.alpha},
        {"beta", c.reward.beta},
        {"gamma", c.reward.gamma},
        {"delta", c.reward.delta},
        {"bonus", c.reward.bonus},
        {"center_prior", c.reward.center_prior}}},
      {"exploration", {{"eps_min", c.exploration.eps_min}, {"eps_max", c.exploration.eps_max}, {"T_dec", c.exploration.T_dec}}},
      {"ppo",
       {{"clip", c.ppo.clip},
        {"c_v", c.ppo.c_v},
        {"c_H", c.ppo.c_H},
        {"epochs", c.ppo.epochs},
        {"lr", c.ppo.lr},
        {"window", c.ppo.window},
        {"max_grad_norm", c.ppo.max_grad_norm},
        {"hidden", c.ppo.hidden},
        {"group_sizes", c.ppo.group_sizes}}},
      {"training", {{"updates", c.training.updates}, {"episode_horizon", c.training.episode_horizon}}},
      {"sweep", {{"batches", c.sweep.batches}, {"load_max", c.sweep.load_max}, {"bursts", c.sweep.bursts}}},
  };
}

inline ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig c = config_from_json(j);
  c.base_dir = base_dir;
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// FNV-1a over the canonical serialization (keys sorted, shortest round-trip
// doubles), as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
  return buf;
}

inline AccuracyTable load_table(const ExperimentConfig& c) {
  if (c.accuracy_table.empty()) return AccuracyTable::published();
  std::filesystem::path p = c.accuracy_table;
  if (p.is_relative() && !c.base_dir.empty()) p = c.base_dir / p;
  return AccuracyTable::load(p.string());
}

inline EpisodeSetup make_setup(const ExperimentConfig& c) {
  EpisodeSetup s;
  s.cluster = c.cluster;
  s.knobs = c.knobs;
  s.workload = c.workload;
  s.workload.seed = c.seed;
  s.table = load_table(c);
  s.group_sizes = c.ppo.group_sizes;
  s.options = c.simulation;
  validate_setup(s);
  return s;
}

}  // namespace slimsched
