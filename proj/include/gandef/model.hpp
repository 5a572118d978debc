#pragma once

// Declarative layer sequences for the classifiers and the discriminator,
// weight initialization, and forward evaluation on the autodiff tape.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gandef/autodiff.hpp"
#include "gandef/error.hpp"
#include "gandef/ops.hpp"
#include "gandef/rng.hpp"
#include "gandef/tensor.hpp"

namespace gandef {

enum class LayerKind { Conv2D, MaxPool2D, Relu, Sigmoid, Flatten, Dense, Dropout, GlobalAvgPool };

/// "Default" is Glorot-uniform; "He" is normal(0, sqrt(2/fan_in)).
enum class Init { None, Default, He };

enum class Mode { Train, Eval };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  Padding padding = Padding::Same;
  std::size_t width = 0;  // filters (conv) or units (dense)
  double drop_rate = 0.0;
  Init init = Init::None;

  bool has_params() const { return kind == LayerKind::Conv2D || kind == LayerKind::Dense; }

  static LayerSpec conv(std::size_t k, std::size_t filters, Padding pad, Init init, std::size_t stride = 1) {
    LayerSpec l;
    l.kind = LayerKind::Conv2D;
    l.kernel_h = l.kernel_w = k;
    l.stride_h = l.stride_w = stride;
    l.padding = pad;
    l.width = filters;
    l.init = init;
    return l;
  }
  static LayerSpec maxpool(std::size_t k, std::size_t stride) {
    LayerSpec l;
    l.kind = LayerKind::MaxPool2D;
    l.kernel_h = l.kernel_w = k;
    l.stride_h = l.stride_w = stride;
    return l;
  }
  static LayerSpec dense(std::size_t units, Init init) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.width = units;
    l.init = init;
    return l;
  }
  static LayerSpec dropout(double rate) {
    LayerSpec l;
    l.kind = LayerKind::Dropout;
    l.drop_rate = rate;
    return l;
  }
  static LayerSpec simple(LayerKind kind) {
    LayerSpec l;
    l.kind = kind;
    return l;
  }
};

struct ModelSpec {
  std::string arch_id;
  Shape input_shape;  // per example, without the batch axis
  std::vector<LayerSpec> layers;

  /// Per-example output shape of every layer. Throws ShapeMismatch if the chain breaks.
  std::vector<Shape> layer_shapes() const {
    std::vector<Shape> shapes;
    Shape cur = input_shape;
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::Conv2D: {
          require(cur.size() == 3, ErrorKind::ShapeMismatch, arch_id + ": conv2d expects HWC input");
          const auto gh = detail::axis_geom(cur[0], l.kernel_h, l.stride_h, l.padding);
          const auto gw = detail::axis_geom(cur[1], l.kernel_w, l.stride_w, l.padding);
          cur = {gh.out, gw.out, l.width};
          break;
        }
        case LayerKind::MaxPool2D:
          require(cur.size() == 3 && cur[0] >= l.kernel_h && cur[1] >= l.kernel_w, ErrorKind::ShapeMismatch,
                  arch_id + ": maxpool input too small");
          cur = {(cur[0] - l.kernel_h) / l.stride_h + 1, (cur[1] - l.kernel_w) / l.stride_w + 1, cur[2]};
          break;
        case LayerKind::Flatten:
          cur = {shape_size(cur)};
          break;
        case LayerKind::GlobalAvgPool:
          require(cur.size() == 3, ErrorKind::ShapeMismatch, arch_id + ": global pool expects HWC input");
          cur = {cur[2]};
          break;
        case LayerKind::Dense:
          require(cur.size() == 1, ErrorKind::ShapeMismatch, arch_id + ": dense expects a flat input");
          cur = {l.width};
          break;
        default:
          break;
      }
      shapes.push_back(cur);
    }
    return shapes;
  }

  Shape output_shape() const {
    auto s = layer_shapes();
    return s.empty() ? input_shape : s.back();
  }
};

/// Weights and biases of every parameterized layer, in layer order.
struct ParamSet {
  std::vector<std::size_t> owners;  // layer index of each (weight, bias) pair
  std::vector<Tensor> tensors;      // weight_0, bias_0, weight_1, bias_1, ...

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

/// Gradient per ParamSet tensor, same order and shapes.
using Gradients = std::vector<Tensor>;

inline ModelSpec build_mnist_lenet() {
  ModelSpec m{"mnist_lenet", {28, 28, 1}, {}};
  m.layers = {LayerSpec::conv(5, 32, Padding::Same, Init::Default),
              LayerSpec::maxpool(2, 2),
              LayerSpec::simple(LayerKind::Relu),
              LayerSpec::conv(5, 64, Padding::Same, Init::Default),
              LayerSpec::maxpool(2, 2),
              LayerSpec::simple(LayerKind::Relu),
              LayerSpec::simple(LayerKind::Flatten),
              LayerSpec::dense(1024, Init::Default),
              LayerSpec::simple(LayerKind::Relu),
              LayerSpec::dense(10, Init::Default)};
  return m;
}

inline ModelSpec build_cifar_allcnn() {
  ModelSpec m{"cifar_allcnn", {32, 32, 3}, {}};
  auto relu = LayerSpec::simple(LayerKind::Relu);
  m.layers.push_back(LayerSpec::dropout(0.2));
  for (int i = 0; i < 3; ++i) {
    m.layers.push_back(LayerSpec::conv(3, 96, Padding::Same, Init::He));
    m.layers.push_back(relu);
  }
  m.layers.push_back(LayerSpec::maxpool(2, 2));
  m.layers.push_back(LayerSpec::dropout(0.5));
  for (int i = 0; i < 3; ++i) {
    m.layers.push_back(LayerSpec::conv(3, 192, Padding::Same, Init::He));
    m.layers.push_back(relu);
  }
  m.layers.push_back(LayerSpec::maxpool(2, 2));
  m.layers.push_back(LayerSpec::dropout(0.5));
  m.layers.push_back(LayerSpec::conv(3, 192, Padding::Valid, Init::He));
  m.layers.push_back(relu);
  m.layers.push_back(LayerSpec::conv(1, 192, Padding::Same, Init::He));
  m.layers.push_back(relu);
  m.layers.push_back(LayerSpec::conv(1, 192, Padding::Same, Init::He));
  m.layers.push_back(relu);
  m.layers.push_back(LayerSpec::simple(LayerKind::GlobalAvgPool));
  m.layers.push_back(LayerSpec::dense(10, Init::Default));
  return m;
}

/// Source discriminator over classifier logits of dimension `input_dim`.
inline ModelSpec build_discriminator(std::size_t input_dim = 10) {
  ModelSpec m{"discriminator", {input_dim}, {}};
  auto relu = LayerSpec::simple(LayerKind::Relu);
  m.layers = {LayerSpec::dense(32, Init::Default), relu, LayerSpec::dense(64, Init::Default), relu,
              LayerSpec::dense(32, Init::Default), relu, LayerSpec::dense(1, Init::Default),
              LayerSpec::simple(LayerKind::Sigmoid)};
  return m;
}

/// Fully connected ReLU network, used for small synthetic problems.
inline ModelSpec build_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t outputs) {
  ModelSpec m{"mlp", {input_dim}, {}};
  for (auto h : hidden) {
    m.layers.push_back(LayerSpec::dense(h, Init::Default));
    m.layers.push_back(LayerSpec::simple(LayerKind::Relu));
  }
  m.layers.push_back(LayerSpec::dense(outputs, Init::Default));
  return m;
}

inline ModelSpec build_model(const std::string& arch_id) {
  if (arch_id == "mnist_lenet") return build_mnist_lenet();
  if (arch_id == "cifar_allcnn") return build_cifar_allcnn();
  if (arch_id == "discriminator") return build_discriminator(10);
  throw Error(ErrorKind::UnknownArch, arch_id);
}

/// Draws every weight tensor from its layer's init rule; biases are zero.
inline ParamSet init_parameters(const ModelSpec& spec, std::uint64_t seed) {
  ParamSet p;
  const auto shapes = spec.layer_shapes();
  Shape in = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.has_params()) {
      Shape wshape;
      double fan_in = 0, fan_out = 0;
      if (l.kind == LayerKind::Conv2D) {
        wshape = {l.kernel_h, l.kernel_w, in[2], l.width};
        fan_in = double(l.kernel_h * l.kernel_w * in[2]);
        fan_out = double(l.kernel_h * l.kernel_w * l.width);
      } else {
        wshape = {in[0], l.width};
        fan_in = double(in[0]);
        fan_out = double(l.width);
      }
      Tensor w(wshape);
      Rng rng(derive_seed(seed, i));
      if (l.init == Init::He) {
        const double sd = std::sqrt(2.0 / fan_in);
        for (auto& v : w.data()) v = sd * standard_normal(rng);
      } else {
        const double lim = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : w.data()) v = uniform(rng, -lim, lim);
      }
      p.owners.push_back(i);
      p.tensors.push_back(std::move(w));
      p.tensors.emplace_back(Shape{l.width}, 0.0);
    }
    in = shapes[i];
  }
  return p;
}

/// Parameter leaves of one model on one graph.
struct BoundParams {
  std::vector<Var> vars;
};

inline BoundParams bind_params(Graph& g, const ParamSet& p, bool trainable) {
  BoundParams b;
  for (const auto& t : p.tensors) b.vars.push_back(g.parameter(t, trainable));
  return b;
}

inline Gradients collect_gradients(const Graph& g, const BoundParams& b) {
  Gradients out;
  out.reserve(b.vars.size());
  for (Var v : b.vars) out.push_back(g.grad(v));
  return out;
}

/// Applies the layer sequence to a batch Var of shape (N, input_shape...).
/// `rng` drives dropout masks in Train mode.
inline Var forward(const ModelSpec& spec, const BoundParams& params, Var x, Mode mode, Rng& rng) {
  const Shape& xs = x.shape();
  require(xs.size() == spec.input_shape.size() + 1 && std::equal(spec.input_shape.begin(), spec.input_shape.end(), xs.begin() + 1),
          ErrorKind::ShapeMismatch, spec.arch_id + " expects batch of " + shape_str(spec.input_shape) + ", got " + shape_str(xs));
  std::size_t slot = 0;
  Var h = x;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv2D:
        h = ops::conv2d(h, params.vars.at(slot), params.vars.at(slot + 1), {l.stride_h, l.stride_w, l.padding});
        slot += 2;
        break;
      case LayerKind::Dense:
        h = ops::dense(h, params.vars.at(slot), params.vars.at(slot + 1));
        slot += 2;
        break;
      case LayerKind::MaxPool2D:
        h = ops::maxpool2d(h, {l.kernel_h, l.kernel_w, l.stride_h, l.stride_w});
        break;
      case LayerKind::Relu:
        h = ops::relu(h);
        break;
      case LayerKind::Sigmoid:
        h = ops::sigmoid(h);
        break;
      case LayerKind::Flatten:
        h = ops::flatten(h);
        break;
      case LayerKind::GlobalAvgPool:
        h = ops::global_avg_pool(h);
        break;
      case LayerKind::Dropout:
        h = ops::dropout(h, l.drop_rate, rng, mode == Mode::Train);
        break;
    }
  }
  return h;
}

/// Logits for a whole batch outside any caller-owned graph. Eval mode is deterministic;
/// Train mode draws dropout masks from `seed`.
inline Tensor forward_model(const ModelSpec& spec, const ParamSet& params, const Tensor& batch, Mode mode,
                            std::uint64_t seed = 0) {
  Graph g;
  Rng rng(seed);
  const auto bound = bind_params(g, params, false);
  return forward(spec, bound, g.constant(batch), mode, rng).value();
}

/// Eval-mode logits computed in chunks of `chunk` examples to bound memory.
inline Tensor predict_logits(const ModelSpec& spec, const ParamSet& params, const Tensor& batch,
                             std::size_t chunk = 256) {
  const std::size_t n = batch.dim(0);
  Tensor out;
  for (std::size_t s = 0; s < n; s += chunk) {
    Tensor part = forward_model(spec, params, batch.slice_rows(s, std::min(n, s + chunk)), Mode::Eval);
    out = out.empty() ? std::move(part) : concat_rows(out, part);
  }
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t k = logits.shape().back(), n = logits.size() / k;
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = logits.ptr() + r * k;
    out[r] = static_cast<int>(std::max_element(z, z + k) - z);
  }
  return out;
}

}  // namespace gandef
