#pragma once

// Factored PPO router.
//
// The policy picks (server, width, group) from three categorical heads of a
// shared MLP. The server head is mixed with a uniform distribution,
//   pi~_srv = (1 - eps_t) pi_srv + eps_t / N,
// and that same mixture (with the eps_t recorded at collection time) enters
// the importance ratio. Rewards are one-step: R_t = r_t, A_t = R_t - V_old.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "slimsched/core.hpp"
#include "slimsched/neural.hpp"
#include "slimsched/router.hpp"
#include "slimsched/simkernel.hpp"

namespace slimsched {

struct ExplorationSchedule {
  double eps_min = 0.05;
  double eps_max = 0.3;
  double T_dec = 20000.0;  // decisions

  void validate() const {
    if (!(0.0 <= eps_min && eps_min <= eps_max && eps_max <= 1.0))
      throw ConfigError("exploration: need 0 <= eps_min <= eps_max <= 1");
    if (!(T_dec > 0.0)) throw ConfigError("exploration.T_dec: must be positive");
  }
  bool operator==(const ExplorationSchedule&) const = default;
};

inline double epsilon_at(const ExplorationSchedule& s, double t) {
  if (t < 0.0) throw PreconditionError("epsilon_at: negative step");
  return std::max(s.eps_min, s.eps_max + (t / s.T_dec) * (s.eps_min - s.eps_max));
}

struct RewardWeights {
  double alpha = 1.0;
  double beta = 1.0;    // per second of latency
  double gamma = 0.01;  // per joule
  double delta = 1.0;
  double bonus = 0.0;
  bool center_prior = false;

  void validate() const {
    for (double x : {alpha, beta, gamma, delta})
      if (!(std::isfinite(x) && x >= 0.0)) throw ConfigError("reward: alpha, beta, gamma, delta must be finite and >= 0");
    if (!std::isfinite(bonus)) throw ConfigError("reward.bonus: must be finite");
  }
  bool operator==(const RewardWeights&) const = default;
};

// r = alpha p - beta L - gamma (P_mean L) - delta Var(U) + b
inline double compute_reward(double prior, Seconds latency, Watts mean_power, std::span<const double> utils,
                             const RewardWeights& w) {
  for (double u : utils)
    if (!(u >= 0.0 && u <= 1.0)) throw PreconditionError("compute_reward: utilization must be a fraction");
  const Joules energy = mean_power * latency;
  return w.alpha * prior - w.beta * latency - w.gamma * energy - w.delta * util_variance(utils) + w.bonus;
}

inline double mixed_server_logprob(std::span<const double> probs_srv, std::size_t srv, double eps) {
  const double n = static_cast<double>(probs_srv.size());
  return std::log((1.0 - eps) * probs_srv[srv] + eps / n);
}

struct PolicyHeads {
  ForwardTape tape;
  Categorical srv, w, g;
};

inline PolicyHeads evaluate_heads(const PolicyParams& params, std::span<const double> input) {
  PolicyHeads h;
  h.tape = forward(params, input);
  h.srv = softmax_logprob_entropy(h.tape.logits_srv);
  h.w = softmax_logprob_entropy(h.tape.logits_w);
  h.g = softmax_logprob_entropy(h.tape.logits_g);
  return h;
}

inline double joint_logprob(const Categorical& srv, const Categorical& w, const Categorical& g, const ActionTriple& a,
                            double eps) {
  return mixed_server_logprob(srv.probs, a.srv, eps) + w.logprobs[a.w] + g.logprobs[a.g];
}

struct ActionSample {
  ActionTriple action;
  double logprob = 0.0;
  double value = 0.0;
};

inline ActionSample select_action(const PolicyParams& params, std::span<const double> input, double eps, Rng& rng) {
  const PolicyHeads h = evaluate_heads(params, input);
  std::vector<double> mixed(h.srv.probs.size());
  for (std::size_t i = 0; i < mixed.size(); ++i)
    mixed[i] = (1.0 - eps) * h.srv.probs[i] + eps / static_cast<double>(mixed.size());
  ActionSample s;
  s.action.srv = sample_categorical(mixed, rng);
  s.action.w = sample_categorical(h.w.probs, rng);
  s.action.g = sample_categorical(h.g.probs, rng);
  s.logprob = joint_logprob(h.srv, h.w, h.g, s.action, eps);
  s.value = h.tape.value;
  return s;
}

struct Transition {
  std::vector<double> state;  // normalized policy input at decision time
  ActionTriple action;
  double logprob_old = 0.0;
  double value_old = 0.0;
  double reward = 0.0;
  double epsilon_used = 0.0;
};

// A = R - V_old, standardized over the batch (population sigma). A single
// transition is returned unnormalized.
inline std::vector<double> advantages(std::span<const Transition> batch, double eps = 1e-8) {
  std::vector<double> a;
  for (const auto& t : batch) a.push_back(t.reward - t.value_old);
  if (a.size() < 2) return a;
  const MeanStd ms = mean_std(a);
  for (auto& x : a) x = (x - ms.mean) / (ms.std + eps);
  return a;
}

struct PpoHyper {
  double clip = 0.2;
  double c_v = 0.5;
  double c_H = 0.01;
  int epochs = 3;
  double lr = 3e-4;
  std::size_t window = 256;
  double max_grad_norm = 0.5;
  std::size_t hidden = 64;
  std::vector<int> group_sizes{1, 2, 4, 8};

  void validate() const {
    if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("ppo.clip: must lie in (0, 1)");
    if (!(c_v >= 0.0)) throw ConfigError("ppo.c_v: must be >= 0");
    if (!(c_H >= 0.0)) throw ConfigError("ppo.c_H: must be >= 0");
    if (epochs < 0) throw ConfigError("ppo.epochs: must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("ppo.lr: must be positive");
    if (window < 1) throw ConfigError("ppo.window: must be >= 1");
    if (!(max_grad_norm > 0.0)) throw ConfigError("ppo.max_grad_norm: must be positive");
    if (hidden < 1) throw ConfigError("ppo.hidden: must be >= 1");
    if (group_sizes.empty()) throw ConfigError("ppo.group_sizes: must not be empty");
    for (int g : group_sizes)
      if (g < 1) throw ConfigError("ppo.group_sizes: entries must be >= 1");
  }
  bool operator==(const PpoHyper&) const = default;
};

struct LossTerms {
  double l_clip = 0.0;
  double l_v = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

struct LossEvaluation {
  LossTerms terms;
  std::vector<double> ratios;
};

// Clipped surrogate, value loss, summed head entropies and
//   J = -L_clip + c_v L_V - c_H H,
// each a batch mean. With `grads` set, dJ/dtheta is accumulated into it.
inline LossEvaluation ppo_losses(const PolicyParams& params, std::span<const Transition> batch,
                                 std::span<const double> adv, const PpoHyper& hp, GradientBuffer* grads = nullptr) {
  if (batch.empty()) throw PreconditionError("ppo_losses: empty batch");
  LossEvaluation out;
  const double m = static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& tr = batch[i];
    const PolicyHeads h = evaluate_heads(params, tr.state);
    const double eps = tr.epsilon_used;
    const double logp = joint_logprob(h.srv, h.w, h.g, tr.action, eps);
    const double ratio = std::exp(logp - tr.logprob_old);
    out.ratios.push_back(ratio);
    const double a = adv[i];
    const double clipped = std::clamp(ratio, 1.0 - hp.clip, 1.0 + hp.clip);
    const bool unclipped_active = ratio * a <= clipped * a;
    const double surrogate = std::min(ratio * a, clipped * a);
    const double v_err = tr.reward - h.tape.value;
    const double ent = h.srv.entropy + h.w.entropy + h.g.entropy;
    out.terms.l_clip += surrogate / m;
    out.terms.l_v += 0.5 * v_err * v_err / m;
    out.terms.entropy += ent / m;

    if (grads == nullptr) continue;
    OutputGrad seed;
    // d(-L_clip)/d logp
    const double d_logp = unclipped_active ? -(a * ratio) / m : 0.0;
    const double mixed = (1.0 - eps) * h.srv.probs[tr.action.srv] + eps / static_cast<double>(h.srv.probs.size());
    auto entropy_grad = [&](const Categorical& c, std::vector<double>& d) {
      // d(-c_H H)/d logit_j = c_H p_j (log p_j + H) / m
      for (std::size_t j = 0; j < c.probs.size(); ++j) d[j] += hp.c_H * c.probs[j] * (c.logprobs[j] + c.entropy) / m;
    };
    seed.srv.assign(h.srv.probs.size(), 0.0);
    seed.w.assign(h.w.probs.size(), 0.0);
    seed.g.assign(h.g.probs.size(), 0.0);
    const std::size_t as = tr.action.srv;
    const double pa = h.srv.probs[as];
    for (std::size_t j = 0; j < seed.srv.size(); ++j)
      seed.srv[j] += d_logp * (1.0 - eps) * pa * ((j == as ? 1.0 : 0.0) - h.srv.probs[j]) / mixed;
    for (std::size_t j = 0; j < seed.w.size(); ++j)
      seed.w[j] += d_logp * ((j == tr.action.w ? 1.0 : 0.0) - h.w.probs[j]);
    for (std::size_t j = 0; j < seed.g.size(); ++j)
      seed.g[j] += d_logp * ((j == tr.action.g ? 1.0 : 0.0) - h.g.probs[j]);
    entropy_grad(h.srv, seed.srv);
    entropy_grad(h.w, seed.w);
    entropy_grad(h.g, seed.g);
    seed.value = -hp.c_v * v_err / m;
    backward(params, h.tape, seed, *grads);
  }
  out.terms.total = -out.terms.l_clip + hp.c_v * out.terms.l_v - hp.c_H * out.terms.entropy;
  return out;
}

class UpdateDiverged : public Error {
 public:
  using Error::Error;
};

// K full-batch epochs of clip_grad_norm + Adam on J, ratios taken against the
// logprob_old recorded at collection. Returns the per-epoch losses (measured
// before each step). On a non-finite loss or gradient the parameters are
// restored and UpdateDiverged is thrown.
inline std::vector<LossTerms> update(PolicyParams& params, Adam& adam, std::span<const Transition> batch,
                                     const PpoHyper& hp) {
  std::vector<LossTerms> trace;
  if (hp.epochs == 0 || batch.empty()) return trace;
  const std::vector<double> adv = advantages(batch);
  const PolicyParams backup = params;
  for (int k = 0; k < hp.epochs; ++k) {
    GradientBuffer grads = PolicyParams::zeros(params.shape);
    const LossEvaluation ev = ppo_losses(params, batch, adv, hp, &grads);
    const double gnorm = global_norm(grads);
    if (!std::isfinite(ev.terms.total) || !std::isfinite(gnorm)) {
      params = backup;
      throw UpdateDiverged("non-finite PPO loss at epoch " + std::to_string(k) + ": J=" +
                           std::to_string(ev.terms.total) + " L_clip=" + std::to_string(ev.terms.l_clip) +
                           " L_V=" + std::to_string(ev.terms.l_v) + " |g|=" + std::to_string(gnorm));
    }
    clip_grad_norm(grads, hp.max_grad_norm);
    adam.step(params, grads, hp.lr);
    trace.push_back(ev.terms);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// router

class PpoRouter final : public Router {
 public:
  PpoRouter(PolicyParams params, RunningNormalizer normalizer, WidthSet widths, std::vector<int> group_sizes,
            ExplorationSchedule schedule, RewardWeights weights, AccuracyTable table, Rng rng)
      : params_(std::move(params)),
        normalizer_(std::move(normalizer)),
        widths_(std::move(widths)),
        groups_(std::move(group_sizes)),
        schedule_(schedule),
        weights_(weights),
        table_(std::move(table)),
        rng_(rng) {}

  // Evaluation: frozen normalizer, fixed eps (0 by default), nothing recorded.
  void set_evaluation(double eps = 0.0) {
    evaluation_eps_ = eps;
    normalizer_.frozen = true;
    recording_ = false;
  }

  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }
  std::size_t recorded() const { return recorded_; }
  std::size_t pending() const { return pending_.size(); }
  double step() const { return static_cast<double>(step_); }
  void set_step(std::uint64_t s) { step_ = s; }
  double current_epsilon() const {
    return evaluation_eps_ ? *evaluation_eps_ : epsilon_at(schedule_, static_cast<double>(step_));
  }

  std::vector<Transition> take_completed() {
    recorded_ = pending_.size();
    return std::exchange(completed_, {});
  }

  const PolicyParams& params() const { return params_; }
  PolicyParams& params() { return params_; }
  const RunningNormalizer& normalizer() const { return normalizer_; }

  RoutingDecision decide(const GlobalState& state, std::uint64_t block_id) override {
    const std::vector<double> raw = state.to_vector();
    if (raw.size() != params_.shape.input) throw PreconditionError("ppo router: state dimension mismatch");
    for (const auto& s : state.per_server)
      if (!(s.util >= 0.0 && s.util <= 1.0)) throw PreconditionError("ppo router: utilization must be a fraction");
    normalizer_.update(raw);
    std::vector<double> x = normalizer_.normalize(raw);
    const double eps = current_epsilon();
    const ActionSample s = select_action(params_, x, eps, rng_);
    if (!evaluation_eps_) ++step_;
    if (recording_) {
      Transition t;
      t.state = std::move(x);
      t.action = s.action;
      t.logprob_old = s.logprob;
      t.value_old = s.value;
      t.epsilon_used = eps;
      pending_.emplace(block_id, std::move(t));
      ++recorded_;
    }
    return RoutingDecision{s.action.srv, s.action.w, groups_.at(s.action.g)};
  }

  void on_block_complete(const BlockOutcome& out) override {
    auto it = pending_.find(out.block_id);
    const double prior = table_.centered_prior(out.accuracy_prior, weights_.center_prior);
    const double r = compute_reward(prior, out.latency, out.mean_power, out.utils, weights_);
    reward_sum_ += r;
    ++reward_count_;
    if (it == pending_.end()) return;
    it->second.reward = r;
    completed_.push_back(std::move(it->second));
    pending_.erase(it);
  }

  // Mean reward over every block completed since the last call.
  double drain_mean_reward() {
    const double m = reward_count_ ? reward_sum_ / static_cast<double>(reward_count_) : 0.0;
    reward_sum_ = 0.0;
    reward_count_ = 0;
    return m;
  }

 private:
  PolicyParams params_;
  RunningNormalizer normalizer_;
  WidthSet widths_;
  std::vector<int> groups_;
  ExplorationSchedule schedule_;
  RewardWeights weights_;
  AccuracyTable table_;
  Rng rng_;
  std::optional<double> evaluation_eps_;
  bool recording_ = false;
  std::uint64_t step_ = 0;
  std::size_t recorded_ = 0;
  std::map<std::uint64_t, Transition> pending_;
  std::vector<Transition> completed_;
  double reward_sum_ = 0.0;
  std::uint64_t reward_count_ = 0;
};

inline MlpShape policy_shape(const EpisodeSetup& setup, const PpoHyper& hp) {
  MlpShape s;
  s.servers = setup.cluster.devices.size();
  s.input = state_dim(s.servers);
  s.hidden = hp.hidden;
  s.widths = setup.knobs.widths.size();
  s.groups = hp.group_sizes.size();
  return s;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainingCurveRow {
  int update = 0;
  double mean_reward = 0.0;
  double l_clip = 0.0;
  double l_v = 0.0;
  double entropy = 0.0;
  double epsilon = 0.0;
};

struct TrainingResult {
  PolicyParams params;
  RunningNormalizer normalizer;
  std::vector<TrainingCurveRow> curves;
  std::uint64_t steps = 0;
  std::optional<std::string> diverged;  // set when an update went non-finite; params are the last good ones
};

struct TrainingOptions {
  int updates = 100;
  Seconds episode_horizon = 10.0;
  std::uint64_t seed = 1;
};

// Alternates collection under a frozen snapshot with PPO updates. Collection
// records `window` decisions, then keeps simulating without recording until
// every recorded block has its reward; the episode restarts when it drains.
inline TrainingResult train(const EpisodeSetup& base, const PpoHyper& hp, const RewardWeights& weights,
                            const ExplorationSchedule& schedule, const TrainingOptions& opts,
                            const std::function<void(const TrainingCurveRow&)>& on_update = {}) {
  hp.validate();
  weights.validate();
  schedule.validate();
  const MlpShape shape = policy_shape(base, hp);
  Rng init_rng = Rng::substream(opts.seed, "init");
  PolicyParams params = PolicyParams::init(shape, init_rng);
  PpoRouter router(params, RunningNormalizer::make(shape.input), base.knobs.widths, hp.group_sizes, schedule, weights,
                   base.table, Rng::substream(opts.seed, "policy"));
  Adam adam(shape);
  TrainingResult result;

  int episode = 0;
  auto new_episode = [&]() {
    EpisodeSetup s = base;
    s.workload.horizon = opts.episode_horizon;
    s.workload.seed = Rng::substream(opts.seed, "train-episode-" + std::to_string(episode++)).next_u64();
    return std::make_unique<Simulator>(s, router);
  };
  std::unique_ptr<Simulator> sim;
  if (opts.updates > 0) sim = new_episode();

  for (int u = 0; u < opts.updates; ++u) {
    std::vector<Transition> batch;
    router.drain_mean_reward();
    while (batch.size() < hp.window) {
      router.set_recording(true);
      const std::size_t want = hp.window - batch.size();
      while (router.recorded() < want && sim->step()) {
      }
      router.set_recording(false);
      while (router.pending() > 0 && sim->step()) {
      }
      auto got = router.take_completed();
      batch.insert(batch.end(), std::make_move_iterator(got.begin()), std::make_move_iterator(got.end()));
      if (sim->done()) sim = new_episode();
    }
    if (batch.size() > hp.window) batch.resize(hp.window);
    TrainingCurveRow row;
    row.update = u;
    row.epsilon = router.current_epsilon();
    double rsum = 0.0;
    for (const auto& t : batch) rsum += t.reward;
    row.mean_reward = rsum / static_cast<double>(batch.size());
    std::vector<LossTerms> trace;
    try {
      trace = update(router.params(), adam, batch, hp);
    } catch (const UpdateDiverged& e) {
      result.diverged = "update " + std::to_string(u) + ": " + e.what();
      break;
    }
    if (!trace.empty()) {
      row.l_clip = trace.back().l_clip;
      row.l_v = trace.back().l_v;
      row.entropy = trace.back().entropy;
    }
    result.curves.push_back(row);
    if (on_update) on_update(row);
  }
  result.params = router.params();
  result.normalizer = router.normalizer();
  result.normalizer.frozen = true;
  result.steps = static_cast<std::uint64_t>(router.step());
  return result;
}

inline MetricsRecord evaluate_policy(const EpisodeSetup& setup, const PolicyParams& params,
                                     const RunningNormalizer& normalizer, const std::vector<int>& group_sizes,
                                     std::uint64_t policy_seed, double eps = 0.0) {
  PpoRouter router(params, normalizer, setup.knobs.widths, group_sizes, ExplorationSchedule{}, RewardWeights{},
                   setup.table, Rng::substream(policy_seed, "policy-eval"));
  router.set_evaluation(eps);
  return run_episode(router, setup);
}

}  // namespace slimsched
