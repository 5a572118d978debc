#pragma once

// Central-difference gradient oracle and the per-primitive gradient check
// suite run by `gandef gradcheck` and the test binaries.

#include <array>
#include <chrono>
#include <memory>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gandef/autodiff.hpp"
#include "gandef/error.hpp"
#include "gandef/ops.hpp"
#include "gandef/rng.hpp"
#include "gandef/tensor.hpp"

namespace gandef {

using ScalarFn = std::function<double(const Tensor&)>;

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i.
inline Tensor finite_difference_gradient(const ScalarFn& f, const Tensor& x, double h) {
  require(h > 0.0, ErrorKind::InvalidAttribute, "finite-difference step must be positive");
  Tensor grad(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    require(std::isfinite(fp) && std::isfinite(fm), ErrorKind::NonFiniteValue,
            "objective not finite near coordinate " + std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch, "relative_error");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Builds one primitive application on the given input Vars.
using PrimitiveBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Max relative error between the analytic and central-difference gradients of
/// sum(w * op(inputs)) with respect to every input, for random projection weights w.
inline double check_primitive_instance(const PrimitiveBuilder& build, const std::vector<Tensor>& inputs, Rng& rng,
                                       double h = 1e-4) {
  Tensor weights;
  {
    Graph probe;
    std::vector<Var> vs;
    for (const auto& t : inputs) vs.push_back(probe.constant(t));
    weights = Tensor(build(probe, vs).shape());
    for (auto& w : weights.data()) w = uniform(rng, -1.0, 1.0);
  }

  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  Var out = build(g, vars);
  g.backward(ops::sum(ops::multiply(out, g.constant(weights))));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    ScalarFn f = [&](const Tensor& xk) {
      Graph fg;
      std::vector<Var> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(fg.constant(j == k ? xk : inputs[j]));
      const Tensor& y = build(fg, vs).value();
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += weights[i] * y[i];
      return s;
    };
    const Tensor numeric = finite_difference_gradient(f, inputs[k], h);
    worst = std::max(worst, relative_error(g.grad(vars[k]), numeric));
  }
  return worst;
}

struct GradcheckResult {
  std::string primitive;
  int instances = 0;
  double max_relative_error = 0.0;
  bool pass = false;
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

/// Random values with |v| >= margin.
inline Tensor away_from_zero(Shape shape, Rng& rng, double margin = 1e-2) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    const double m = uniform(rng, margin, 1.0);
    v = uniform01(rng) < 0.5 ? -m : m;
  }
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); }

}  // namespace detail

/// Generated inputs for one random instance of a primitive.
struct PrimitiveCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<PrimitiveBuilder(Rng&)> builder;
};

inline std::vector<PrimitiveCase> primitive_catalog() {
  using detail::away_from_zero;
  using detail::pick;
  using detail::random_tensor;
  std::vector<PrimitiveCase> cases;
  auto unary = [](auto fn) {
    return [fn](Rng&) -> PrimitiveBuilder { return [fn](Graph&, const std::vector<Var>& v) { return fn(v[0]); }; };
  };
  auto binary = [](auto fn) {
    return [fn](Rng&) -> PrimitiveBuilder {
      return [fn](Graph&, const std::vector<Var>& v) { return fn(v[0], v[1]); };
    };
  };
  auto same_pair = [](Rng& rng) {
    Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
    return std::vector<Tensor>{random_tensor(s, rng), random_tensor(s, rng)};
  };
  auto matrix = [](Rng& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 4), pick(rng, 1, 6)}, rng)}; };

  cases.push_back({"add", same_pair, binary([](Var a, Var b) { return ops::add(a, b); })});
  cases.push_back({"subtract", same_pair, binary([](Var a, Var b) { return ops::subtract(a, b); })});
  cases.push_back({"multiply", same_pair, binary([](Var a, Var b) { return ops::multiply(a, b); })});
  cases.push_back({"scalar-multiply", matrix, [](Rng& rng) -> PrimitiveBuilder {
                     const double c = uniform(rng, -2.0, 2.0);
                     return [c](Graph&, const std::vector<Var>& v) { return ops::scale(v[0], c); };
                   }});
  cases.push_back({"matmul",
                   [](Rng& rng) {
                     const auto m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
                     return std::vector<Tensor>{random_tensor({m, k}, rng), random_tensor({k, n}, rng)};
                   },
                   binary([](Var a, Var b) { return ops::matmul(a, b); })});
  cases.push_back({"dense",
                   [](Rng& rng) {
                     const auto m = pick(rng, 1, 4), k = pick(rng, 1, 6), n = pick(rng, 1, 5);
                     return std::vector<Tensor>{random_tensor({m, k}, rng), random_tensor({k, n}, rng),
                                                random_tensor({n}, rng)};
                   },
                   [](Rng&) -> PrimitiveBuilder {
                     return [](Graph&, const std::vector<Var>& v) { return ops::dense(v[0], v[1], v[2]); };
                   }});
  {
    // Geometry is drawn once per instance and shared by inputs() and builder() via a captured slot.
    auto geo = std::make_shared<std::pair<Conv2DAttrs, std::array<std::size_t, 6>>>();
    cases.push_back({"conv2d",
                     [geo](Rng& rng) {
                       const auto n = pick(rng, 1, 2), h = pick(rng, 3, 6), w = pick(rng, 3, 6), c = pick(rng, 1, 3);
                       const auto k = pick(rng, 1, 3), oc = pick(rng, 1, 3);
                       Conv2DAttrs a;
                       a.stride_h = pick(rng, 1, 2);
                       a.stride_w = pick(rng, 1, 2);
                       a.padding = rng() % 2 ? Padding::Same : Padding::Valid;
                       *geo = {a, {n, h, w, c, k, oc}};
                       return std::vector<Tensor>{random_tensor({n, h, w, c}, rng), random_tensor({k, k, c, oc}, rng),
                                                  random_tensor({oc}, rng)};
                     },
                     [geo](Rng&) -> PrimitiveBuilder {
                       const Conv2DAttrs a = geo->first;
                       return [a](Graph&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], a); };
                     }});
  }
  {
    auto attrs = std::make_shared<Pool2DAttrs>();
    cases.push_back({"maxpool2d",
                     [attrs](Rng& rng) {
                       Pool2DAttrs a;
                       a.window_h = a.window_w = pick(rng, 1, 3);
                       a.stride_h = a.stride_w = pick(rng, 1, 2);
                       *attrs = a;
                       const Shape s{pick(rng, 1, 2), pick(rng, a.window_h, 6), pick(rng, a.window_w, 6),
                                     pick(rng, 1, 3)};
                       // Distinct values spaced >= 1e-2 apart keep every window away from ties.
                       Tensor t(s);
                       std::vector<std::size_t> order = permutation(t.size(), rng);
                       for (std::size_t i = 0; i < t.size(); ++i)
                         t[i] = -1.0 + 0.02 * static_cast<double>(order[i]) + uniform(rng, 0.0, 0.005);
                       return std::vector<Tensor>{t};
                     },
                     [attrs](Rng&) -> PrimitiveBuilder {
                       const Pool2DAttrs a = *attrs;
                       return [a](Graph&, const std::vector<Var>& v) { return ops::maxpool2d(v[0], a); };
                     }});
  }
  cases.push_back({"global-average-pool",
                   [](Rng& rng) {
                     return std::vector<Tensor>{
                         random_tensor({pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3)}, rng)};
                   },
                   unary([](Var x) { return ops::global_avg_pool(x); })});
  cases.push_back({"flatten",
                   [](Rng& rng) {
                     return std::vector<Tensor>{
                         random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 2)}, rng)};
                   },
                   unary([](Var x) { return ops::flatten(x); })});
  cases.push_back({"relu", [](Rng& rng) { return std::vector<Tensor>{away_from_zero({pick(rng, 1, 4), pick(rng, 1, 6)}, rng)}; },
                   unary([](Var x) { return ops::relu(x); })});
  cases.push_back({"sigmoid",
                   [](Rng& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 4), pick(rng, 1, 6)}, rng, -4, 4)}; },
                   unary([](Var x) { return ops::sigmoid(x); })});
  cases.push_back({"softmax",
                   [](Rng& rng) { return std::vector<Tensor>{random_tensor({pick(rng, 1, 4), pick(rng, 2, 6)}, rng, -3, 3)}; },
                   unary([](Var x) { return ops::softmax(x); })});
  cases.push_back({"dropout", matrix, [](Rng& rng) -> PrimitiveBuilder {
                     const double rate = uniform(rng, 0.0, 0.8);
                     const std::uint64_t seed = rng();
                     return [rate, seed](Graph&, const std::vector<Var>& v) {
                       Rng local(seed);
                       return ops::dropout(v[0], rate, local, true);
                     };
                   }});
  cases.push_back({"euclidean-norm",
                   [](Rng& rng) { return std::vector<Tensor>{away_from_zero({pick(rng, 1, 4), pick(rng, 1, 6)}, rng, 0.1)}; },
                   unary([](Var x) { return ops::l2_norm(x); })});
  {
    auto labels = std::make_shared<std::vector<int>>();
    cases.push_back({"cross-entropy-from-logits",
                     [labels](Rng& rng) {
                       const auto n = pick(rng, 1, 5), k = pick(rng, 2, 10);
                       labels->resize(n);
                       for (auto& t : *labels) t = static_cast<int>(rng() % k);
                       return std::vector<Tensor>{random_tensor({n, k}, rng, -5, 5)};
                     },
                     [labels](Rng&) -> PrimitiveBuilder {
                       auto l = *labels;
                       return [l](Graph&, const std::vector<Var>& v) { return ops::cross_entropy(v[0], l); };
                     }});
  }
  {
    auto targets = std::make_shared<std::vector<double>>();
    cases.push_back({"binary-cross-entropy",
                     [targets](Rng& rng) {
                       const auto n = pick(rng, 1, 8);
                       targets->resize(n);
                       for (auto& s : *targets) s = static_cast<double>(rng() % 2);
                       return std::vector<Tensor>{random_tensor({n, 1}, rng, 0.05, 0.95)};
                     },
                     [targets](Rng&) -> PrimitiveBuilder {
                       auto t = *targets;
                       return [t](Graph&, const std::vector<Var>& v) { return ops::binary_cross_entropy(v[0], t); };
                     }});
  }
  cases.push_back({"sign", [](Rng& rng) { return std::vector<Tensor>{away_from_zero({pick(rng, 1, 4), pick(rng, 1, 6)}, rng)}; },
                   unary([](Var x) { return ops::sign(x); })});
  cases.push_back({"clip",
                   [](Rng& rng) {
                     // Values on a grid offset from the clip bounds (+-0.5) by at least 1e-2.
                     Tensor t({pick(rng, 1, 4), pick(rng, 1, 6)});
                     for (auto& v : t.data()) {
                       v = uniform(rng, -1.0, 1.0);
                       if (std::abs(std::abs(v) - 0.5) < 1e-2) v += 0.05;
                     }
                     return std::vector<Tensor>{t};
                   },
                   unary([](Var x) { return ops::clip(x, -0.5, 0.5); })});
  cases.push_back({"mean-reduce", matrix, unary([](Var x) { return ops::mean(x); })});
  return cases;
}

/// Runs every catalog primitive over `instances` random cases.
inline std::vector<GradcheckResult> run_gradcheck_suite(int instances = 100, std::uint64_t seed = 7,
                                                        double tolerance = 1e-4, double h = 1e-4) {
  std::vector<GradcheckResult> results;
  for (const auto& c : primitive_catalog()) {
    Rng rng(derive_seed(seed, std::hash<std::string>{}(c.name)));
    GradcheckResult r{c.name, instances, 0.0, true};
    for (int i = 0; i < instances; ++i) {
      const auto inputs = c.inputs(rng);
      const auto build = c.builder(rng);
      r.max_relative_error = std::max(r.max_relative_error, check_primitive_instance(build, inputs, rng, h));
    }
    r.pass = r.max_relative_error < tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace gandef
