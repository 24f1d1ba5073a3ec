// slimsched command line: simulate, train, sweep, compare.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "slimsched/config.hpp"
#include "slimsched/experiments.hpp"
#include "slimsched/neural.hpp"
#include "slimsched/ppo.hpp"

namespace fs = std::filesystem;
using namespace slimsched;

namespace {

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void print_summary(const MetricsRecord& m, const std::string& title) {
  std::printf("%s\n", title.c_str());
  std::printf("  %-22s %14s %14s\n", "metric", "mean", "std");
  for (const auto& r : summarize(m)) std::printf("  %-22s %14.6g %14.6g\n", r.metric.c_str(), r.mean, r.std);
}

struct SimulateArgs {
  std::string config, router = "random", checkpoint, out;
  std::optional<std::uint64_t> seed;
  bool trace = false;
};

int cmd_simulate(const SimulateArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  EpisodeSetup setup = make_setup(cfg);
  setup.options.trace = a.trace;
  const Provenance prov = provenance(cfg);

  std::optional<PpoRouter> ppo;
  RandomRouter random(setup.cluster.devices.size(), setup.knobs.widths.size(), setup.group_sizes,
                      Rng::substream(cfg.seed, "policy"));
  Router* router = &random;
  if (a.router == "ppo") {
    if (a.checkpoint.empty()) throw ConfigError("--router ppo needs --checkpoint");
    auto [params, norm] = policy_from_json(read_json(a.checkpoint));
    const MlpShape want = policy_shape(setup, cfg.ppo);
    if (params.shape.servers != want.servers || params.shape.widths != want.widths ||
        params.shape.groups != want.groups)
      throw ConfigError("checkpoint shape does not match the configured cluster / widths / groups");
    ppo.emplace(params, norm, setup.knobs.widths, setup.group_sizes, ExplorationSchedule{}, RewardWeights{},
                setup.table, Rng::substream(cfg.seed, "policy-eval"));
    ppo->set_evaluation(0.0);
    router = &*ppo;
  }

  Simulator sim(setup, *router);
  sim.run();
  const MetricsRecord& m = sim.metrics();

  const fs::path dir = a.out.empty() ? fs::path("run-" + a.router + "-" + std::to_string(cfg.seed)) : fs::path(a.out);
  fs::create_directories(dir);
  {
    auto f = open_out(dir / "summary.csv");
    write_summary_csv(f, m, prov);
  }
  {
    auto f = open_out(dir / "histogram.csv");
    write_histogram_csv(f, m, setup.knobs.widths, prov);
  }
  {
    auto f = open_out(dir / "record.json");
    f << run_record_json(m, prov, a.router).dump() << "\n";
  }
  if (a.trace) {
    auto f = open_out(dir / "trace.csv");
    write_trace_csv(f, sim.trace(), prov);
  }
  print_summary(m, "simulate router=" + a.router + " seed=" + std::to_string(cfg.seed) + " config_hash=" +
                       prov.config_hash);
  std::printf("  widths chosen:");
  for (std::size_t i = 0; i < m.width_histogram.size(); ++i)
    std::printf(" %g:%llu", setup.knobs.widths[i].value, static_cast<unsigned long long>(m.width_histogram[i]));
  std::printf("\n  requests per server:");
  for (std::size_t i = 0; i < m.server_histogram.size(); ++i)
    std::printf(" %zu:%llu", i, static_cast<unsigned long long>(m.server_histogram[i]));
  std::printf("\n  outputs in %s\n", dir.string().c_str());
  return 0;
}

int cmd_train(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = load_config(config);
  if (seed) cfg.seed = *seed;
  cfg.training.seed = cfg.seed;
  const EpisodeSetup setup = make_setup(cfg);
  const Provenance prov = provenance(cfg);
  const fs::path dir(out);
  fs::create_directories(dir);

  std::printf("training %d updates, window %zu, seed %llu\n", cfg.training.updates, cfg.ppo.window,
              static_cast<unsigned long long>(cfg.seed));
  const int every = std::max(1, cfg.training.updates / 20);
  TrainingResult res =
      train(setup, cfg.ppo, cfg.reward, cfg.exploration, cfg.training, [&](const TrainingCurveRow& r) {
        if (r.update % every == 0 || r.update + 1 == cfg.training.updates)
          std::printf("  update %5d  reward %10.5f  L_clip %9.5f  L_V %9.5f  H %6.3f  eps %.3f\n", r.update,
                      r.mean_reward, r.l_clip, r.l_v, r.entropy, r.epsilon);
      });

  nlohmann::json ck = to_json(res.params, res.normalizer);
  ck["config_hash"] = prov.config_hash;
  ck["seed"] = prov.seed;
  ck["steps"] = res.steps;
  ck["reward"] = to_json(cfg)["reward"];
  ck["exploration"] = to_json(cfg)["exploration"];
  {
    auto f = open_out(dir / "checkpoint.json");
    f << ck.dump(1) << "\n";
  }
  {
    auto f = open_out(dir / "curves.csv");
    write_curves_csv(f, res.curves, prov);
  }
  {
    auto f = open_out(dir / "config.json");
    f << to_json(cfg).dump(2) << "\n";
  }
  if (res.diverged) {
    std::fprintf(stderr, "training diverged at %s\nlast good checkpoint written to %s\n", res.diverged->c_str(),
                 (dir / "checkpoint.json").string().c_str());
    return 3;
  }
  std::printf("checkpoint and curves written to %s\n", dir.string().c_str());
  return 0;
}

int cmd_sweep(const std::string& config, std::size_t device, const std::string& out) {
  const ExperimentConfig cfg = load_config(config);
  const auto rows = run_sweep(cfg, device);
  auto f = open_out(out);
  write_sweep_csv(f, rows, provenance(cfg));
  std::printf("%zu sweep points written to %s\n", rows.size(), out.c_str());
  for (double w : cfg.knobs.widths.values())
    std::printf("  width %.2f: latency(U>=0.95) / latency(U<=0.70) = %.2f\n", w, knee_ratio(rows, w));
  return 0;
}

int cmd_compare(const std::string& config, const std::string& baseline, const std::vector<std::string>& ppo_runs,
                const std::string& out) {
  const ExperimentConfig cfg = load_config(config);
  auto load_run = [](const std::string& dir) {
    return run_record_from_json(read_json(fs::path(dir) / "record.json"), fs::path(dir).filename().string());
  };
  const RunRecord base = load_run(baseline);
  std::vector<RunRecord> runs;
  for (const auto& r : ppo_runs) runs.push_back(load_run(r));
  const auto rows = compare_runs(base, runs);

  std::printf("%-20s %12s %12s %12s %12s %9s %10s %10s %10s %10s %10s\n", "run", "lat_mean_s", "lat_std_s",
              "E_mean_J", "E_std_J", "acc_%", "completed", "wall_s", "dLat_%", "dE_%", "dAcc_%");
  for (const auto& r : rows)
    std::printf("%-20s %12.6g %12.6g %12.6g %12.6g %9.3f %10.0f %10.3f %10.2f %10.2f %10.2f\n", r.label.c_str(),
                r.latency_mean, r.latency_std, r.energy_mean, r.energy_std, r.accuracy_pct, r.completed, r.wall_span,
                r.d_latency, r.d_energy, r.d_accuracy);
  if (!out.empty()) {
    auto f = open_out(out);
    write_compare_csv(f, rows, provenance(cfg));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slimsched: width-aware PPO routing over a simulated GPU cluster"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "run one episode with the random baseline or a trained policy");
  s->add_option("--config", sim.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  s->add_option("--router", sim.router, "random | ppo")->check(CLI::IsMember({"random", "ppo"}));
  s->add_option("--checkpoint", sim.checkpoint, "policy checkpoint for --router ppo")->check(CLI::ExistingFile);
  s->add_option("--seed", sim.seed, "override the master seed");
  s->add_flag("--trace", sim.trace, "also write per-tick telemetry to trace.csv");
  s->add_option("--out", sim.out, "output directory (default run-<router>-<seed>)");

  std::string t_config, t_out;
  std::optional<std::uint64_t> t_seed;
  auto* t = app.add_subcommand("train", "train a PPO router and write checkpoint + curves");
  t->add_option("--config", t_config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("--out", t_out, "output directory")->required();
  t->add_option("--seed", t_seed, "override the master seed");

  std::string w_config, w_out;
  std::size_t w_device = 0;
  auto* w = app.add_subcommand("sweep", "single-device load sweep over widths x batch sizes");
  w->add_option("--config", w_config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  w->add_option("--device", w_device, "device index in the config's cluster")->required();
  w->add_option("--out", w_out, "output CSV")->required();

  std::string c_config, c_base, c_out;
  std::vector<std::string> c_runs;
  auto* c = app.add_subcommand("compare", "percentage deltas of policy runs against a baseline run");
  c->add_option("--config", c_config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  c->add_option("--baseline-run", c_base, "baseline run directory")->required()->check(CLI::ExistingDirectory);
  c->add_option("--ppo-run", c_runs, "policy run directories")->required()->check(CLI::ExistingDirectory);
  c->add_option("--out", c_out, "also write the report as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*s) return cmd_simulate(sim);
    if (*t) return cmd_train(t_config, t_out, t_seed);
    if (*w) return cmd_sweep(w_config, w_device, w_out);
    if (*c) return cmd_compare(c_config, c_base, c_runs, c_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
