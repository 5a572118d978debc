#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gandef/error.hpp"
#include "gandef/model.hpp"
#include "gandef/tensor.hpp"

namespace gandef {

enum class OptimizerKind { Adam, Momentum };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "momentum"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct OptState {
  OptimizerConfig config;
  std::vector<Tensor> first;   // Adam m, or momentum velocity
  std::vector<Tensor> second;  // Adam v
  std::uint64_t step = 0;
};

inline OptState make_opt_state(const ParamSet& params, const OptimizerConfig& config) {
  OptState s;
  s.config = config;
  for (const auto& t : params.tensors) {
    s.first.emplace_back(t.shape(), 0.0);
    if (config.kind == OptimizerKind::Adam) s.second.emplace_back(t.shape(), 0.0);
  }
  return s;
}

/// One update with learning rate `lr` (the schedule owns lr; config.learning_rate is the base).
/// Throws NonFiniteGradient before touching any parameter if a gradient is not finite.
inline void optimizer_step(ParamSet& params, const Gradients& grads, OptState& state, double lr) {
  require(grads.size() == params.tensors.size() && state.first.size() == params.tensors.size(),
          ErrorKind::ShapeMismatch, "gradient/parameter count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require(grads[i].shape() == params.tensors[i].shape(), ErrorKind::ShapeMismatch, "gradient shape mismatch");
    require(grads[i].all_finite(), ErrorKind::NonFiniteGradient, "gradient of tensor " + std::to_string(i));
  }
  const auto& c = state.config;
  ++state.step;
  if (c.kind == OptimizerKind::Adam) {
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor& w = params.tensors[i];
      Tensor& m = state.first[i];
      Tensor& v = state.second[i];
      const Tensor& g = grads[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] + c.weight_decay * w[j];
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
        w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.epsilon);
      }
    }
  } else {
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor& w = params.tensors[i];
      Tensor& vel = state.first[i];
      const Tensor& g = grads[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        vel[j] = c.momentum * vel[j] + g[j] + c.weight_decay * w[j];
        w[j] -= lr * vel[j];
      }
    }
  }
}

/// base_lr * decay^(number of milestones <= epoch).
inline double lr_schedule(int epoch, double base_lr, double decay_factor, const std::vector<int>& milestones) {
  double lr = base_lr;
  for (int m : milestones)
    if (epoch >= m) lr *= decay_factor;
  return lr;
}

/// Step-decay milestones at 50% and 75% of the run.
inline std::vector<int> default_milestones(int total_epochs) { return {total_epochs / 2, (3 * total_epochs) / 4}; }

/// Classifier optimizer and augmentation settings per dataset.
struct ClassifierSettings {
  OptimizerConfig optimizer;
  double lr_decay = 1.0;
  bool use_milestones = false;
  std::size_t batch_size = 128;
  int epochs = 80;
  double width_shift = 0.0;
  double height_shift = 0.0;
  bool horizontal_flip = false;
};

inline ClassifierSettings classifier_settings(const std::string& dataset) {
  ClassifierSettings s;
  if (dataset == "mnist") {
    s.optimizer = {OptimizerKind::Adam, 1e-4};
  } else if (dataset == "fashion_mnist") {
    s.optimizer = {OptimizerKind::Adam, 0.01};
    s.lr_decay = 0.1;
    s.use_milestones = true;
  } else if (dataset == "cifar10") {
    s.optimizer = {OptimizerKind::Momentum, 0.01};
    s.optimizer.momentum = 0.9;
    s.optimizer.weight_decay = 0.001;
    s.lr_decay = 0.1;
    s.use_milestones = true;
    s.epochs = 350;
    s.width_shift = s.height_shift = 0.1;
    s.horizontal_flip = true;
  } else {
    throw Error(ErrorKind::InvalidConfig, "no classifier settings for dataset " + dataset);
  }
  return s;
}

/// Discriminator optimizer: Adam at 1e-4.
inline OptimizerConfig discriminator_optimizer() { return {OptimizerKind::Adam, 1e-4}; }

}  // namespace gandef
