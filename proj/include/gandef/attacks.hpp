#pragma once

// White-box l-infinity attacks: FGSM, BIM and PGD with random restarts.
// The attack loss is the softmax cross-entropy of the classifier logits
// against the ground-truth labels.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gandef/autodiff.hpp"
#include "gandef/error.hpp"
#include "gandef/model.hpp"
#include "gandef/ops.hpp"
#include "gandef/rng.hpp"
#include "gandef/tensor.hpp"

namespace gandef {

enum class AttackKind { Fgsm, Bim, Pgd };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Bim: return "bim";
    case AttackKind::Pgd: return "pgd";
  }
  return "unknown";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::Fgsm;
  if (s == "bim") return AttackKind::Bim;
  if (s == "pgd") return AttackKind::Pgd;
  throw Error(ErrorKind::InvalidConfig, "unknown attack kind " + s);
}

struct AttackConfig {
  AttackKind kind = AttackKind::Fgsm;
  double epsilon = 0.0;
  double step_size = 0.0;
  int iterations = 1;
  bool random_start = false;
  int restarts = 1;  // PGD only; the highest-loss restart wins per example
  std::uint64_t seed = 0;

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

inline AttackConfig fgsm_config(double epsilon) { return {AttackKind::Fgsm, epsilon, epsilon, 1, false, 1, 0}; }

inline AttackConfig bim_config(double epsilon, double step, int iterations) {
  return {AttackKind::Bim, epsilon, step, iterations, false, 1, 0};
}

inline AttackConfig pgd_config(double epsilon, double step, int iterations, std::uint64_t seed = 0, int restarts = 1) {
  return {AttackKind::Pgd, epsilon, step, iterations, true, restarts, seed};
}

/// Enforces the config invariants; FGSM is normalized to one step without a random start.
inline AttackConfig validated(AttackConfig c) {
  require(c.epsilon >= 0.0, ErrorKind::InvalidConfig, "epsilon must be non-negative");
  if (c.kind == AttackKind::Fgsm) {
    c.iterations = 1;
    c.random_start = false;
    c.restarts = 1;
    c.step_size = c.epsilon;
  } else {
    require(c.step_size > 0.0, ErrorKind::InvalidConfig, "iterative attacks need a positive step size");
    require(c.iterations >= 1, ErrorKind::InvalidConfig, "iterations must be positive");
  }
  if (c.kind == AttackKind::Pgd) c.random_start = true;
  if (c.kind == AttackKind::Bim) c.random_start = false;
  require(c.restarts >= 1, ErrorKind::InvalidConfig, "restarts must be positive");
  return c;
}

/// Named presets for the two image scales. The BIM step count is not part of the
/// published settings; 10 matches the common library default.
inline AttackConfig attack_preset(const std::string& name) {
  if (name == "mnist-fgsm" || name == "fashion_mnist-fgsm") return fgsm_config(0.6);
  if (name == "mnist-bim" || name == "fashion_mnist-bim") return bim_config(0.6, 0.1, 10);
  if (name == "mnist-pgd" || name == "fashion_mnist-pgd") return pgd_config(0.6, 0.02, 40);
  if (name == "cifar-fgsm") return fgsm_config(0.06);
  if (name == "cifar-bim") return bim_config(0.06, 0.016, 10);
  if (name == "cifar-pgd") return pgd_config(0.06, 0.016, 20);
  throw Error(ErrorKind::InvalidConfig, "unknown attack preset " + name);
}

/// Preset prefix used by a dataset name.
inline std::string preset_family(const std::string& dataset) {
  if (dataset == "mnist" || dataset == "fashion_mnist") return dataset;
  if (dataset == "cifar10") return "cifar";
  throw Error(ErrorKind::InvalidConfig, "no attack presets for dataset " + dataset);
}

inline Tensor clip_valid(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = std::clamp(v, -1.0, 1.0);
  return out;
}

inline Tensor project_linf(const Tensor& x, const Tensor& origin, double epsilon) {
  require(x.shape() == origin.shape(), ErrorKind::ShapeMismatch, "project_linf");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], origin[i] - epsilon, origin[i] + epsilon);
  return out;
}

/// Input gradient of the summed per-example loss plus the per-example losses.
struct InputGradient {
  Tensor grad;
  std::vector<double> losses;
};

using GradientOracle = std::function<InputGradient(const Tensor& x, std::span<const int> t)>;

/// Oracle backed by a model in eval mode. Parameters are bound as constants so
/// no weight gradients are formed; batches are processed in chunks.
inline GradientOracle model_oracle(const ModelSpec& spec, const ParamSet& params, std::size_t chunk = 256) {
  return [&spec, &params, chunk](const Tensor& x, std::span<const int> t) {
    InputGradient out;
    const std::size_t n = x.dim(0);
    require(t.size() == n, ErrorKind::ShapeMismatch, "labels vs batch");
    out.grad = Tensor(x.shape());
    out.losses.resize(n);
    const std::size_t per = x.size() / n;
    for (std::size_t s = 0; s < n; s += chunk) {
      const std::size_t e = std::min(n, s + chunk);
      Graph g;
      Rng rng(0);
      auto bound = bind_params(g, params, false);
      Var xv = g.variable(x.slice_rows(s, e));
      Var ce = ops::cross_entropy(forward(spec, bound, xv, Mode::Eval, rng), t.subspan(s, e - s));
      g.backward(ops::sum(ce));
      const Tensor& gx = g.grad(xv);
      std::copy(gx.data().begin(), gx.data().end(), out.grad.ptr() + s * per);
      for (std::size_t i = s; i < e; ++i) out.losses[i] = ce.value()[i - s];
    }
    return out;
  };
}

/// Per-example cross-entropy without gradients.
inline std::vector<double> example_losses(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                                          std::span<const int> t, std::size_t chunk = 256) {
  const Tensor logits = predict_logits(spec, params, x, chunk);
  Graph g;
  const Tensor& ce = ops::cross_entropy(g.constant(logits), t).value();
  return {ce.data().begin(), ce.data().end()};
}

namespace detail {

inline Tensor signed_step(const Tensor& x, const Tensor& grad, double step) {
  require(grad.all_finite(), ErrorKind::NonFiniteGradient, "attack input gradient");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
    out[i] += step * s;
  }
  return out;
}

/// BIM-style iterations from `start`, each followed by ball projection and clipping.
inline Tensor iterate(const GradientOracle& oracle, const Tensor& origin, Tensor x, std::span<const int> t,
                      const AttackConfig& c) {
  for (int k = 0; k < c.iterations; ++k) {
    const auto g = oracle(x, t);
    x = clip_valid(project_linf(signed_step(x, g.grad, c.step_size), origin, c.epsilon));
  }
  return x;
}

inline Tensor random_start(const Tensor& origin, double epsilon, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = origin;
  for (auto& v : x.data()) v += uniform(rng, -epsilon, epsilon);
  return clip_valid(x);
}

}  // namespace detail

inline Tensor fgsm(const GradientOracle& oracle, const Tensor& x, std::span<const int> t, const AttackConfig& cfg) {
  const auto c = validated(cfg);
  require(c.kind == AttackKind::Fgsm, ErrorKind::InvalidConfig, "fgsm called with " + to_string(c.kind));
  if (c.epsilon == 0.0) return x;
  return clip_valid(detail::signed_step(x, oracle(x, t).grad, c.epsilon));
}

inline Tensor bim(const GradientOracle& oracle, const Tensor& x, std::span<const int> t, const AttackConfig& cfg) {
  const auto c = validated(cfg);
  require(c.kind == AttackKind::Bim, ErrorKind::InvalidConfig, "bim called with " + to_string(c.kind));
  return detail::iterate(oracle, x, x, t, c);
}

inline Tensor pgd(const GradientOracle& oracle, const Tensor& x, std::span<const int> t, const AttackConfig& cfg) {
  const auto c = validated(cfg);
  require(c.kind == AttackKind::Pgd, ErrorKind::InvalidConfig, "pgd called with " + to_string(c.kind));
  Tensor best;
  std::vector<double> best_loss;
  const std::size_t n = x.dim(0), per = x.size() / n;
  for (int r = 0; r < c.restarts; ++r) {
    Tensor start = detail::random_start(x, c.epsilon, derive_seed(c.seed, static_cast<std::uint64_t>(r)));
    Tensor cand = detail::iterate(oracle, x, std::move(start), t, c);
    if (c.restarts == 1) return cand;
    const auto losses = oracle(cand, t).losses;
    if (r == 0) {
      best = std::move(cand);
      best_loss = losses;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i)
      if (losses[i] > best_loss[i]) {
        best_loss[i] = losses[i];
        std::copy(cand.ptr() + i * per, cand.ptr() + (i + 1) * per, best.ptr() + i * per);
      }
  }
  return best;
}

/// Dispatches on cfg.kind.
inline Tensor generate(const GradientOracle& oracle, const Tensor& x, std::span<const int> t, const AttackConfig& cfg) {
  switch (cfg.kind) {
    case AttackKind::Fgsm: return fgsm(oracle, x, t, cfg);
    case AttackKind::Bim: return bim(oracle, x, t, cfg);
    case AttackKind::Pgd: return pgd(oracle, x, t, cfg);
  }
  throw Error(ErrorKind::InvalidConfig, "attack kind");
}

inline Tensor generate(const ModelSpec& spec, const ParamSet& params, const Tensor& x, std::span<const int> t,
                       const AttackConfig& cfg) {
  return generate(model_oracle(spec, params), x, t, cfg);
}

}  // namespace gandef
