#pragma once

// Shared tanh MLP with three categorical heads (server, width, group) and a
// scalar value head, plus the numerical pieces PPO needs: stable softmax,
// categorical sampling, hand-written reverse mode, gradient-norm clipping,
// Adam, running input normalization, and a JSON checkpoint format.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "slimsched/core.hpp"

namespace slimsched {

struct MlpShape {
  std::size_t input = 11;
  std::size_t hidden = 64;
  std::size_t servers = 3;
  std::size_t widths = 4;
  std::size_t groups = 4;

  bool operator==(const MlpShape&) const = default;
};

// Row-major dense weights: W[o * in + i]. GradientBuffer shares the layout.
struct PolicyParams {
  MlpShape shape;
  std::vector<double> trunk_w, trunk_b;
  std::vector<double> srv_w, srv_b;
  std::vector<double> width_w, width_b;
  std::vector<double> group_w, group_b;
  std::vector<double> value_w, value_b;

  static PolicyParams zeros(const MlpShape& s) {
    PolicyParams p;
    p.shape = s;
    p.trunk_w.assign(s.hidden * s.input, 0.0);
    p.trunk_b.assign(s.hidden, 0.0);
    p.srv_w.assign(s.servers * s.hidden, 0.0);
    p.srv_b.assign(s.servers, 0.0);
    p.width_w.assign(s.widths * s.hidden, 0.0);
    p.width_b.assign(s.widths, 0.0);
    p.group_w.assign(s.groups * s.hidden, 0.0);
    p.group_b.assign(s.groups, 0.0);
    p.value_w.assign(s.hidden, 0.0);
    p.value_b.assign(1, 0.0);
    return p;
  }

  // Glorot-uniform weights, zero biases, value head scaled down by 10.
  static PolicyParams init(const MlpShape& s, Rng& rng) {
    PolicyParams p = zeros(s);
    auto fill = [&rng](std::vector<double>& w, std::size_t fan_in, std::size_t fan_out, double scale) {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& x : w) x = scale * a * (2.0 * rng.uniform() - 1.0);
    };
    fill(p.trunk_w, s.input, s.hidden, 1.0);
    fill(p.srv_w, s.hidden, s.servers, 1.0);
    fill(p.width_w, s.hidden, s.widths, 1.0);
    fill(p.group_w, s.hidden, s.groups, 1.0);
    fill(p.value_w, s.hidden, 1, 0.1);
    return p;
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    f("trunk_w", trunk_w);
    f("trunk_b", trunk_b);
    f("srv_w", srv_w);
    f("srv_b", srv_b);
    f("width_w", width_w);
    f("width_b", width_b);
    f("group_w", group_w);
    f("group_b", group_b);
    f("value_w", value_w);
    f("value_b", value_b);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<PolicyParams*>(this)->for_each_tensor(
        [&f](const char* name, std::vector<double>& t) { f(name, static_cast<const std::vector<double>&>(t)); });
  }

  std::size_t size() const {
    std::size_t n = 0;
    for_each_tensor([&n](const char*, const std::vector<double>& t) { n += t.size(); });
    return n;
  }

  // Flat views, tensor order as in for_each_tensor.
  double& at(std::size_t flat) {
    double* out = nullptr;
    for_each_tensor([&](const char*, std::vector<double>& t) {
      if (out == nullptr) {
        if (flat < t.size()) out = &t[flat];
        else flat -= t.size();
      }
    });
    if (out == nullptr) throw PreconditionError("parameter index out of range");
    return *out;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&ok](const char*, const std::vector<double>& t) {
      for (double x : t) ok = ok && std::isfinite(x);
    });
    return ok;
  }

  void set_zero() {
    for_each_tensor([](const char*, std::vector<double>& t) { std::fill(t.begin(), t.end(), 0.0); });
  }

  bool operator==(const PolicyParams&) const = default;
};

using GradientBuffer = PolicyParams;

struct ForwardTape {
  std::vector<double> input;
  std::vector<double> hidden;  // tanh activations
  std::vector<double> logits_srv, logits_w, logits_g;
  double value = 0.0;
};

namespace detail {
inline void dense(std::span<const double> w, std::span<const double> b, std::span<const double> x,
                  std::vector<double>& out) {
  const std::size_t n_out = b.size(), n_in = x.size();
  out.assign(n_out, 0.0);
  for (std::size_t o = 0; o < n_out; ++o) {
    double acc = b[o];
    const double* row = w.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * x[i];
    out[o] = acc;
  }
}
}  // namespace detail

inline ForwardTape forward(const PolicyParams& p, std::span<const double> s) {
  if (s.size() != p.shape.input)
    throw PreconditionError("forward: state has length " + std::to_string(s.size()) + ", expected " +
                            std::to_string(p.shape.input));
  ForwardTape t;
  t.input.assign(s.begin(), s.end());
  detail::dense(p.trunk_w, p.trunk_b, s, t.hidden);
  for (auto& h : t.hidden) h = std::tanh(h);
  detail::dense(p.srv_w, p.srv_b, t.hidden, t.logits_srv);
  detail::dense(p.width_w, p.width_b, t.hidden, t.logits_w);
  detail::dense(p.group_w, p.group_b, t.hidden, t.logits_g);
  std::vector<double> v;
  detail::dense(p.value_w, p.value_b, t.hidden, v);
  t.value = v[0];
  return t;
}

// d(loss)/d(outputs) for one forward pass.
struct OutputGrad {
  std::vector<double> srv, w, g;
  double value = 0.0;
};

// Accumulates d(loss)/d(theta) into `grads` for one recorded forward pass.
inline void backward(const PolicyParams& p, const ForwardTape& tape, const OutputGrad& seed, GradientBuffer& grads) {
  const auto& s = p.shape;
  if (tape.hidden.size() != s.hidden || tape.input.size() != s.input)
    throw PreconditionError("backward: no matching forward pass recorded");
  if (seed.srv.size() != s.servers || seed.w.size() != s.widths || seed.g.size() != s.groups)
    throw PreconditionError("backward: output gradient shape mismatch");

  std::vector<double> dh(s.hidden, 0.0);
  auto head = [&](const std::vector<double>& w, std::vector<double>& gw, std::vector<double>& gb,
                  std::span<const double> d_out) {
    for (std::size_t o = 0; o < d_out.size(); ++o) {
      const double d = d_out[o];
      if (d == 0.0) continue;
      gb[o] += d;
      for (std::size_t h = 0; h < s.hidden; ++h) {
        gw[o * s.hidden + h] += d * tape.hidden[h];
        dh[h] += d * w[o * s.hidden + h];
      }
    }
  };
  head(p.srv_w, grads.srv_w, grads.srv_b, seed.srv);
  head(p.width_w, grads.width_w, grads.width_b, seed.w);
  head(p.group_w, grads.group_w, grads.group_b, seed.g);
  const double dv[1] = {seed.value};
  head(p.value_w, grads.value_w, grads.value_b, dv);

  for (std::size_t h = 0; h < s.hidden; ++h) {
    const double dpre = dh[h] * (1.0 - tape.hidden[h] * tape.hidden[h]);
    if (dpre == 0.0) continue;
    grads.trunk_b[h] += dpre;
    for (std::size_t i = 0; i < s.input; ++i) grads.trunk_w[h * s.input + i] += dpre * tape.input[i];
  }
}

struct Categorical {
  std::vector<double> probs;
  std::vector<double> logprobs;
  double entropy = 0.0;
};

inline Categorical softmax_logprob_entropy(std::span<const double> logits) {
  Categorical c;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = mx + std::log(z);
  for (double l : logits) {
    const double lp = l - log_z;
    c.logprobs.push_back(lp);
    c.probs.push_back(std::exp(lp));
  }
  for (std::size_t i = 0; i < c.probs.size(); ++i)
    if (c.probs[i] > 0.0) c.entropy -= c.probs[i] * c.logprobs[i];
  return c;
}

// Inverse CDF for a uniform draw u in [0, 1).
inline std::size_t sample_categorical(std::span<const double> probs, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding left u above the final partial sum: last index with mass.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return i;
  return probs.size() - 1;
}

inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  return sample_categorical(probs, rng.uniform());
}

inline double global_norm(const GradientBuffer& g) {
  double ss = 0.0;
  g.for_each_tensor([&ss](const char*, const std::vector<double>& t) {
    for (double x : t) ss += x * x;
  });
  return std::sqrt(ss);
}

// Rescales to max_norm when the global L2 norm exceeds it. Returns the norm
// before clipping.
inline double clip_grad_norm(GradientBuffer& g, double max_norm) {
  if (!(max_norm > 0.0)) throw PreconditionError("clip_grad_norm: max_norm must be positive");
  const double norm = global_norm(g);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    g.for_each_tensor([scale](const char*, std::vector<double>& t) {
      for (auto& x : t) x *= scale;
    });
  }
  return norm;
}

class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit Adam(const MlpShape& shape) : m_(PolicyParams::zeros(shape)), v_(PolicyParams::zeros(shape)) {}

  void step(PolicyParams& params, const GradientBuffer& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    std::vector<std::vector<double>*> ps, ms, vs;
    std::vector<const std::vector<double>*> gs;
    params.for_each_tensor([&](const char*, std::vector<double>& t) { ps.push_back(&t); });
    m_.for_each_tensor([&](const char*, std::vector<double>& t) { ms.push_back(&t); });
    v_.for_each_tensor([&](const char*, std::vector<double>& t) { vs.push_back(&t); });
    grads.for_each_tensor([&](const char*, const std::vector<double>& t) { gs.push_back(&t); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto& p = *ps[k];
      auto& m = *ms[k];
      auto& v = *vs[k];
      const auto& g = *gs[k];
      if (g.size() != p.size()) throw PreconditionError("adam: gradient shape mismatch");
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }

  long steps() const { return t_; }

 private:
  PolicyParams m_, v_;
  long t_ = 0;
};

// Welford running mean/variance of the state features; frozen for evaluation.
struct RunningNormalizer {
  std::vector<double> mean;
  std::vector<double> m2;
  double count = 0.0;
  bool frozen = false;
  double clip = 10.0;

  static RunningNormalizer make(std::size_t dim) {
    RunningNormalizer n;
    n.mean.assign(dim, 0.0);
    n.m2.assign(dim, 0.0);
    return n;
  }

  void update(std::span<const double> x) {
    if (frozen) return;
    count += 1.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double d = x[i] - mean[i];
      mean[i] += d / count;
      m2[i] += d * (x[i] - mean[i]);
    }
  }

  double variance(std::size_t i) const { return count > 1.0 ? m2[i] / count : 1.0; }

  std::vector<double> normalize(std::span<const double> x) const {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = std::clamp((x[i] - mean[i]) / std::sqrt(variance(i) + 1e-8), -clip, clip);
    return out;
  }

  bool operator==(const RunningNormalizer&) const = default;
};

// ---------------------------------------------------------------------------
// checkpoint document

inline nlohmann::json to_json(const MlpShape& s) {
  return {{"input", s.input}, {"hidden", s.hidden}, {"servers", s.servers}, {"widths", s.widths},
          {"groups", s.groups}};
}

inline MlpShape shape_from_json(const nlohmann::json& j) {
  MlpShape s;
  s.input = j.at("input").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.servers = j.at("servers").get<std::size_t>();
  s.widths = j.at("widths").get<std::size_t>();
  s.groups = j.at("groups").get<std::size_t>();
  if (s.input != 2 + 3 * s.servers) throw ConfigError("checkpoint: input dim must equal 2 + 3 * servers");
  return s;
}

inline nlohmann::json to_json(const PolicyParams& p, const RunningNormalizer& norm) {
  nlohmann::json j;
  j["format"] = "slimsched-policy-v1";
  j["shape"] = to_json(p.shape);
  nlohmann::json w;
  p.for_each_tensor([&w](const char* name, const std::vector<double>& t) { w[name] = t; });
  j["weights"] = w;
  j["normalizer"] = {{"mean", norm.mean}, {"m2", norm.m2}, {"count", norm.count}, {"clip", norm.clip}};
  return j;
}

inline std::pair<PolicyParams, RunningNormalizer> policy_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "slimsched-policy-v1") throw ConfigError("checkpoint: unknown format");
  PolicyParams p = PolicyParams::zeros(shape_from_json(j.at("shape")));
  const auto& w = j.at("weights");
  p.for_each_tensor([&w](const char* name, std::vector<double>& t) {
    auto v = w.at(name).get<std::vector<double>>();
    if (v.size() != t.size())
      throw ConfigError(std::string("checkpoint: tensor ") + name + " has " + std::to_string(v.size()) +
                        " values, expected " + std::to_string(t.size()));
    t = std::move(v);
  });
  if (!p.all_finite()) throw ConfigError("checkpoint: non-finite weights");
  RunningNormalizer n;
  const auto& jn = j.at("normalizer");
  n.mean = jn.at("mean").get<std::vector<double>>();
  n.m2 = jn.at("m2").get<std::vector<double>>();
  n.count = jn.at("count").get<double>();
  n.clip = jn.value("clip", 10.0);
  if (n.mean.size() != p.shape.input || n.m2.size() != p.shape.input)
    throw ConfigError("checkpoint: normalizer dimension mismatch");
  n.frozen = true;
  return {std::move(p), std::move(n)};
}

}  // namespace slimsched
