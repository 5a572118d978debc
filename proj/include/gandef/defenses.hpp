#pragma once

// Training objectives and procedures for the seven classifiers: Vanilla, the
// logit-regularized baselines (CLP, CLS), ZK-GanDef, FGSM-Adv, PGD-Adv and
// PGD-GanDef.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gandef/attacks.hpp"
#include "gandef/autodiff.hpp"
#include "gandef/data.hpp"
#include "gandef/error.hpp"
#include "gandef/model.hpp"
#include "gandef/ops.hpp"
#include "gandef/optim.hpp"

namespace gandef {

// ---- losses -----------------------------------------------------------------

/// Mean softmax cross-entropy over the batch.
inline Var vanilla_loss(Var logits, std::span<const int> t) { return ops::mean(ops::cross_entropy(logits, t)); }

namespace detail {

inline Var norm_penalty(Var z, bool squared) {
  Var n = ops::l2_norm(z);
  return ops::mean(squared ? ops::multiply(n, n) : n);
}

}  // namespace detail

/// CE(z1, t1) + CE(z2, t2) + lambda * batch-mean ||z1 - z2||.
inline Var clp_loss(Var z1, std::span<const int> t1, Var z2, std::span<const int> t2, double lambda,
                    bool squared = false) {
  Var ce = ops::add(vanilla_loss(z1, t1), vanilla_loss(z2, t2));
  return ops::add(ce, ops::scale(detail::norm_penalty(ops::subtract(z1, z2), squared), lambda));
}

/// CE(z, t) + lambda * batch-mean ||z||.
inline Var cls_loss(Var z, std::span<const int> t, double lambda, bool squared = false) {
  return ops::add(vanilla_loss(z, t), ops::scale(detail::norm_penalty(z, squared), lambda));
}

struct GanValue {
  Var objective;           // classifier_loss - gamma * discriminator_loss
  Var classifier_loss;     // mean CE of logits against t
  Var discriminator_loss;  // mean BCE of discriminator output against s
};

/// `d_prob` is the discriminator's probability that each example is perturbed.
inline GanValue gandef_value(Var logits, Var d_prob, std::span<const int> t, std::span<const double> s,
                             double gamma) {
  GanValue v;
  v.classifier_loss = vanilla_loss(logits, t);
  v.discriminator_loss = ops::mean(ops::binary_cross_entropy(d_prob, s));
  v.objective = ops::subtract(v.classifier_loss, ops::scale(v.discriminator_loss, gamma));
  return v;
}

// ---- configuration ------------------------------------------------------------

enum class DefenseKind { Vanilla, Clp, Cls, ZkGanDef, FgsmAdv, PgdAdv, PgdGanDef };

inline const std::vector<DefenseKind>& all_defenses() {
  static const std::vector<DefenseKind> v{DefenseKind::Vanilla,  DefenseKind::Clp,    DefenseKind::Cls,
                                          DefenseKind::ZkGanDef, DefenseKind::FgsmAdv, DefenseKind::PgdAdv,
                                          DefenseKind::PgdGanDef};
  return v;
}

inline std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::Vanilla: return "vanilla";
    case DefenseKind::Clp: return "clp";
    case DefenseKind::Cls: return "cls";
    case DefenseKind::ZkGanDef: return "zk_gandef";
    case DefenseKind::FgsmAdv: return "fgsm_adv";
    case DefenseKind::PgdAdv: return "pgd_adv";
    case DefenseKind::PgdGanDef: return "pgd_gandef";
  }
  return "unknown";
}

inline std::string display_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::Vanilla: return "Vanilla";
    case DefenseKind::Clp: return "CLP";
    case DefenseKind::Cls: return "CLS";
    case DefenseKind::ZkGanDef: return "ZK-GanDef";
    case DefenseKind::FgsmAdv: return "FGSM-Adv";
    case DefenseKind::PgdAdv: return "PGD-Adv";
    case DefenseKind::PgdGanDef: return "PGD-GanDef";
  }
  return "unknown";
}

inline DefenseKind defense_from_string(const std::string& s) {
  for (auto k : all_defenses())
    if (to_string(k) == s) return k;
  throw Error(ErrorKind::InvalidConfig, "unknown defense " + s);
}

inline bool uses_discriminator(DefenseKind k) { return k == DefenseKind::ZkGanDef || k == DefenseKind::PgdGanDef; }
inline bool uses_attack(DefenseKind k) {
  return k == DefenseKind::FgsmAdv || k == DefenseKind::PgdAdv || k == DefenseKind::PgdGanDef;
}

struct DefenseConfig {
  DefenseKind kind = DefenseKind::Vanilla;
  double lambda = 0.4;
  double gamma = 2.0;
  double sigma = 1.0;
  int inner = 3;                 // discriminator updates per classifier update
  bool inner_full_pass = false;  // count `inner` in passes over the data instead of batches
  int epochs = 10;
  std::size_t batch_size = 128;
  std::size_t steps_per_epoch = 0;  // 0: training-set size / batch size
  OptimizerConfig classifier_optimizer{OptimizerKind::Adam, 1e-4};
  double lr_decay = 1.0;
  std::vector<int> milestones;
  OptimizerConfig discriminator_optimizer{OptimizerKind::Adam, 1e-4};
  bool squared_norm = false;
  double width_shift = 0.0;
  double height_shift = 0.0;
  bool horizontal_flip = false;
  std::vector<double> noise_mask;  // optional per-feature noise scale (last axis)
  AttackConfig attack;             // full-knowledge kinds only
  std::uint64_t seed = 0;
};

/// Paper defaults for a defense on a dataset: classifier optimizer, schedule,
/// augmentation and, for full-knowledge kinds, the dataset's attack preset.
inline DefenseConfig make_defense_config(DefenseKind kind, const std::string& dataset, int epochs = 10) {
  DefenseConfig c;
  c.kind = kind;
  c.epochs = epochs;
  const auto s = classifier_settings(dataset);
  c.classifier_optimizer = s.optimizer;
  c.lr_decay = s.lr_decay;
  if (s.use_milestones) c.milestones = default_milestones(epochs);
  c.batch_size = s.batch_size;
  c.width_shift = s.width_shift;
  c.height_shift = s.height_shift;
  c.horizontal_flip = s.horizontal_flip;
  c.discriminator_optimizer = discriminator_optimizer();
  if (kind == DefenseKind::FgsmAdv) c.attack = attack_preset(preset_family(dataset) + "-fgsm");
  if (kind == DefenseKind::PgdAdv || kind == DefenseKind::PgdGanDef)
    c.attack = attack_preset(preset_family(dataset) + "-pgd");
  return c;
}

inline void validate(const DefenseConfig& c) {
  require(c.lambda >= 0.0, ErrorKind::InvalidConfig, "lambda must be non-negative");
  require(c.gamma >= 0.0, ErrorKind::InvalidConfig, "gamma must be non-negative");
  require(c.sigma >= 0.0, ErrorKind::InvalidConfig, "sigma must be non-negative");
  require(c.inner >= 1, ErrorKind::InvalidConfig, "inner iterations must be at least 1");
  require(c.epochs >= 1, ErrorKind::InvalidConfig, "epochs must be at least 1");
  require(c.batch_size >= 2 && c.batch_size % 2 == 0, ErrorKind::OddBatchSize,
          "batch size must be even, got " + std::to_string(c.batch_size));
}

// ---- records ------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double classifier_loss = 0.0;  // mean over the epoch's steps of the classifier objective
  double discriminator_loss = std::numeric_limits<double>::quiet_NaN();  // GAN kinds only
  double seconds = 0.0;
  bool diverged = false;
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;  // classifier objective per optimization step
  std::vector<double> step_cross_entropy;  // GAN kinds: the CE part of each classifier step
  bool diverged = false;
  std::string note;

  std::vector<double> classifier_losses() const {
    std::vector<double> v;
    for (const auto& e : epochs) v.push_back(e.classifier_loss);
    return v;
  }
  std::vector<double> epoch_seconds() const {
    std::vector<double> v;
    for (const auto& e : epochs) v.push_back(e.seconds);
    return v;
  }
};

inline nlohmann::json to_json(const EpochRecord& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"seconds", e.seconds}, {"diverged", e.diverged}};
  j["classifier_loss"] = std::isfinite(e.classifier_loss) ? nlohmann::json(e.classifier_loss) : nlohmann::json();
  j["discriminator_loss"] =
      std::isfinite(e.discriminator_loss) ? nlohmann::json(e.discriminator_loss) : nlohmann::json();
  return j;
}

/// One JSON object per completed epoch.
inline void write_train_record(const TrainRecord& r, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::IoFailure, "cannot write " + path);
  for (const auto& e : r.epochs) os << to_json(e).dump() << '\n';
}

struct TrainResult {
  ModelSpec classifier_spec;
  ParamSet classifier;
  ModelSpec discriminator_spec;
  ParamSet discriminator;  // empty unless the defense uses one
  TrainRecord record;
};

// ---- single optimization steps --------------------------------------------------

/// Losses seen by one step, measured before the update.
struct StepLosses {
  double classifier = 0.0;
  double discriminator = std::numeric_limits<double>::quiet_NaN();
};

/// One classifier update on mean CE. A non-finite loss skips the update.
inline StepLosses classifier_ce_step(const ModelSpec& spec, ParamSet& params, OptState& opt, const Tensor& x,
                                     std::span<const int> t, double lr, std::uint64_t dropout_seed) {
  Graph g;
  Rng rng(dropout_seed);
  auto bound = bind_params(g, params, true);
  Var loss = vanilla_loss(forward(spec, bound, g.constant(x), Mode::Train, rng), t);
  StepLosses out{loss.value().item()};
  if (!std::isfinite(out.classifier)) return out;
  g.backward(loss);
  optimizer_step(params, collect_gradients(g, bound), opt, lr);
  return out;
}

/// One CLS update on an already perturbed batch.
inline StepLosses cls_step(const ModelSpec& spec, ParamSet& params, OptState& opt, const Tensor& x_hat,
                           std::span<const int> t, double lambda, bool squared, double lr, std::uint64_t dropout_seed) {
  Graph g;
  Rng rng(dropout_seed);
  auto bound = bind_params(g, params, true);
  Var loss = cls_loss(forward(spec, bound, g.constant(x_hat), Mode::Train, rng), t, lambda, squared);
  StepLosses out{loss.value().item()};
  if (!std::isfinite(out.classifier)) return out;
  g.backward(loss);
  optimizer_step(params, collect_gradients(g, bound), opt, lr);
  return out;
}

/// One CLP update on two already perturbed batches.
inline StepLosses clp_step(const ModelSpec& spec, ParamSet& params, OptState& opt, const Tensor& x1,
                           std::span<const int> t1, const Tensor& x2, std::span<const int> t2, double lambda,
                           bool squared, double lr, std::uint64_t dropout_seed) {
  Graph g;
  Rng rng(dropout_seed);
  auto bound = bind_params(g, params, true);
  Var z1 = forward(spec, bound, g.constant(x1), Mode::Train, rng);
  Var z2 = forward(spec, bound, g.constant(x2), Mode::Train, rng);
  Var loss = clp_loss(z1, t1, z2, t2, lambda, squared);
  StepLosses out{loss.value().item()};
  if (!std::isfinite(out.classifier)) return out;
  g.backward(loss);
  optimizer_step(params, collect_gradients(g, bound), opt, lr);
  return out;
}

/// Discriminator update with the classifier frozen: minimize mean BCE of D(C(x)) against s.
inline StepLosses discriminator_step(const ModelSpec& cspec, const ParamSet& cparams, const ModelSpec& dspec,
                                     ParamSet& dparams, OptState& dopt, const LabeledBatch& b, double lr,
                                     std::uint64_t dropout_seed) {
  Graph g;
  Rng rng(dropout_seed);
  auto cb = bind_params(g, cparams, false);
  auto db = bind_params(g, dparams, true);
  Var z = forward(cspec, cb, g.constant(b.x), Mode::Train, rng);
  Var p = forward(dspec, db, z, Mode::Train, rng);
  Var loss = ops::mean(ops::binary_cross_entropy(p, b.s));
  StepLosses out{std::numeric_limits<double>::quiet_NaN(), loss.value().item()};
  if (!std::isfinite(out.discriminator)) return out;
  g.backward(loss);
  optimizer_step(dparams, collect_gradients(g, db), dopt, lr);
  return out;
}

/// Classifier update with the discriminator frozen: minimize CE - gamma * BCE.
/// `classifier` in the result is the full objective J.
inline StepLosses gan_classifier_step(const ModelSpec& cspec, ParamSet& cparams, OptState& copt,
                                      const ModelSpec& dspec, const ParamSet& dparams, const LabeledBatch& b,
                                      double gamma, double lr, std::uint64_t dropout_seed) {
  Graph g;
  Rng rng(dropout_seed);
  auto cb = bind_params(g, cparams, true);
  auto db = bind_params(g, dparams, false);
  Var z = forward(cspec, cb, g.constant(b.x), Mode::Train, rng);
  Var p = forward(dspec, db, z, Mode::Train, rng);
  GanValue v = gandef_value(z, p, b.t, b.s, gamma);
  StepLosses out{v.objective.value().item(), v.discriminator_loss.value().item()};
  if (!std::isfinite(out.classifier)) return out;
  g.backward(v.objective);
  optimizer_step(cparams, collect_gradients(g, cb), copt, lr);
  return out;
}

// ---- training loops -------------------------------------------------------------

namespace detail {

enum Stream : std::uint64_t { kSampler = 1, kClassifierInit, kDiscriminatorInit, kNoise, kDropout, kAttack, kDiscSampler, kAugment };

inline std::uint64_t stream_seed(std::uint64_t seed, Stream s, std::uint64_t step, std::uint64_t sub = 0) {
  return derive_seed(derive_seed(seed, s), step * 64 + sub);
}

inline Tensor maybe_augment(const Tensor& x, const DefenseConfig& c, std::uint64_t seed) {
  if (x.rank() != 4 || (c.width_shift == 0.0 && c.height_shift == 0.0 && !c.horizontal_flip)) return x;
  return augment_shift_flip(x, c.width_shift, c.height_shift, c.horizontal_flip, seed);
}

}  // namespace detail

/// Runs any defense. Epoch = steps_per_epoch optimization steps (global
/// iterations for the GAN kinds). Divergence stops training and is flagged.
inline TrainResult train_defense(const ModelSpec& spec, const Dataset& train, const DefenseConfig& cfg) {
  validate(cfg);
  require(train.size() > 0, ErrorKind::InvalidConfig, "empty training set");
  using Clock = std::chrono::steady_clock;
  const auto& c = cfg;
  TrainResult r;
  r.classifier_spec = spec;
  r.classifier = init_parameters(spec, derive_seed(c.seed, detail::kClassifierInit));
  OptState copt = make_opt_state(r.classifier, c.classifier_optimizer);
  OptState dopt;
  const bool gan = uses_discriminator(c.kind);
  if (gan) {
    r.discriminator_spec = build_discriminator(spec.output_shape().at(0));
    r.discriminator = init_parameters(r.discriminator_spec, derive_seed(c.seed, detail::kDiscriminatorInit));
    dopt = make_opt_state(r.discriminator, c.discriminator_optimizer);
  }
  if (uses_attack(c.kind)) {
    require(c.attack.kind != AttackKind::Fgsm || c.kind == DefenseKind::FgsmAdv, ErrorKind::InvalidConfig,
            "PGD-based defenses need a PGD attack config");
  }

  BatchSampler sampler(train.size(), derive_seed(c.seed, detail::kSampler));
  BatchSampler disc_sampler(train.size(), derive_seed(c.seed, detail::kDiscSampler));
  const std::size_t B = c.batch_size, half = B / 2;
  const std::size_t steps = c.steps_per_epoch ? c.steps_per_epoch : std::max<std::size_t>(1, train.size() / B);
  const std::size_t inner_steps = c.inner_full_pass ? static_cast<std::size_t>(c.inner) * steps
                                                    : static_cast<std::size_t>(c.inner);
  const std::span<const double> mask(c.noise_mask);
  std::uint64_t step = 0;

  // ZK-GanDef: originals and Gaussian-perturbed copies of a second draw. PGD-GanDef:
  // one draw x and its PGD examples against the current classifier, [x; pgd(x)],
  // the same batch layout as PGD-Adv.
  auto gan_batch = [&](BatchSampler& smp, std::uint64_t st, std::uint64_t sub) {
    LabeledBatch b;
    if (c.kind == DefenseKind::ZkGanDef) {
      const auto orig = smp.next(half);
      const auto pert = smp.next(half);
      b = mixed_batch_from(train, orig, pert, c.sigma, detail::stream_seed(c.seed, detail::kNoise, st, sub), mask);
      b.x = detail::maybe_augment(b.x, c, detail::stream_seed(c.seed, detail::kAugment, st, sub));
      return b;
    }
    Dataset a = train.subset(smp.next(half));
    Tensor x = detail::maybe_augment(a.images, c, detail::stream_seed(c.seed, detail::kAugment, st, sub));
    AttackConfig ac = c.attack;
    ac.seed = detail::stream_seed(c.seed, detail::kAttack, st, sub);
    b.x = concat_rows(x, generate(spec, r.classifier, x, a.labels, ac));
    b.t = a.labels;
    b.t.insert(b.t.end(), a.labels.begin(), a.labels.end());
    b.s.assign(half, 0.0);
    b.s.resize(B, 1.0);
    return b;
  };

  for (int epoch = 0; epoch < c.epochs && !r.record.diverged; ++epoch) {
    const double lr = lr_schedule(epoch, c.classifier_optimizer.learning_rate, c.lr_decay, c.milestones);
    const auto t0 = Clock::now();
    double closs = 0.0, dloss = 0.0;
    std::size_t dcount = 0;
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t k = 0; k < steps; ++k, ++step) {
      StepLosses sl;
      try {
        const auto drop = detail::stream_seed(c.seed, detail::kDropout, step);
        switch (c.kind) {
          case DefenseKind::Vanilla: {
            Dataset b = train.subset(sampler.next(B));
            Tensor x = detail::maybe_augment(b.images, c, detail::stream_seed(c.seed, detail::kAugment, step));
            sl = classifier_ce_step(spec, r.classifier, copt, x, b.labels, lr, drop);
            break;
          }
          case DefenseKind::Cls: {
            Dataset b = train.subset(sampler.next(B));
            Tensor x = detail::maybe_augment(b.images, c, detail::stream_seed(c.seed, detail::kAugment, step));
            x = gaussian_perturb(x, c.sigma, detail::stream_seed(c.seed, detail::kNoise, step), mask);
            sl = cls_step(spec, r.classifier, copt, x, b.labels, c.lambda, c.squared_norm, lr, drop);
            break;
          }
          case DefenseKind::Clp: {
            const auto idx = sampler.next(B);
            Dataset b1 = train.subset(std::span(idx).first(half));
            Dataset b2 = train.subset(std::span(idx).subspan(half));
            Tensor x1 = detail::maybe_augment(b1.images, c, detail::stream_seed(c.seed, detail::kAugment, step, 0));
            Tensor x2 = detail::maybe_augment(b2.images, c, detail::stream_seed(c.seed, detail::kAugment, step, 1));
            x1 = gaussian_perturb(x1, c.sigma, detail::stream_seed(c.seed, detail::kNoise, step, 0), mask);
            x2 = gaussian_perturb(x2, c.sigma, detail::stream_seed(c.seed, detail::kNoise, step, 1), mask);
            sl = clp_step(spec, r.classifier, copt, x1, b1.labels, x2, b2.labels, c.lambda, c.squared_norm, lr,
                          drop);
            break;
          }
          case DefenseKind::FgsmAdv:
          case DefenseKind::PgdAdv: {
            Dataset b = train.subset(sampler.next(half));
            Tensor x = detail::maybe_augment(b.images, c, detail::stream_seed(c.seed, detail::kAugment, step));
            AttackConfig ac = c.attack;
            ac.seed = detail::stream_seed(c.seed, detail::kAttack, step);
            Tensor adv = generate(spec, r.classifier, x, b.labels, ac);
            std::vector<int> t = b.labels;
            t.insert(t.end(), b.labels.begin(), b.labels.end());
            sl = classifier_ce_step(spec, r.classifier, copt, concat_rows(x, adv), t, lr, drop);
            break;
          }
          case DefenseKind::ZkGanDef:
          case DefenseKind::PgdGanDef: {
            for (std::size_t i = 0; i < inner_steps; ++i) {
              LabeledBatch db = gan_batch(disc_sampler, step, 1 + i % 31);
              auto dl = discriminator_step(spec, r.classifier, r.discriminator_spec, r.discriminator, dopt, db,
                                           c.discriminator_optimizer.learning_rate,
                                           detail::stream_seed(c.seed, detail::kDropout, step, 1 + i % 31));
              if (!std::isfinite(dl.discriminator)) {
                sl.classifier = dl.discriminator;
                break;
              }
              dloss += dl.discriminator;
              ++dcount;
            }
            if (!std::isfinite(sl.classifier)) break;
            LabeledBatch cb = gan_batch(sampler, step, 0);
            sl = gan_classifier_step(spec, r.classifier, copt, r.discriminator_spec, r.discriminator, cb, c.gamma,
                                     lr, drop);
            break;
          }
        }
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::NonFiniteGradient) throw;
        sl.classifier = std::numeric_limits<double>::quiet_NaN();
        r.record.note = e.what();
      }
      r.record.step_losses.push_back(sl.classifier);
      if (gan) r.record.step_cross_entropy.push_back(sl.classifier + c.gamma * sl.discriminator);
      if (!std::isfinite(sl.classifier)) {
        r.record.diverged = true;
        rec.diverged = true;
        if (r.record.note.empty()) r.record.note = "non-finite loss at step " + std::to_string(step);
        break;
      }
      closs += sl.classifier;
    }
    rec.seconds = std::max(std::chrono::duration<double>(Clock::now() - t0).count(), 1e-9);
    rec.classifier_loss = rec.diverged ? std::numeric_limits<double>::quiet_NaN() : closs / double(steps);
    if (dcount) rec.discriminator_loss = dloss / double(dcount);
    r.record.epochs.push_back(rec);
  }
  return r;
}

inline TrainResult train_vanilla(const ModelSpec& spec, const Dataset& train, DefenseConfig cfg) {
  cfg.kind = DefenseKind::Vanilla;
  return train_defense(spec, train, cfg);
}

inline TrainResult train_logit_regularized(const ModelSpec& spec, const Dataset& train, const DefenseConfig& cfg) {
  require(cfg.kind == DefenseKind::Clp || cfg.kind == DefenseKind::Cls, ErrorKind::InvalidConfig,
          "logit-regularized training needs clp or cls");
  return train_defense(spec, train, cfg);
}

inline TrainResult train_zk_gandef(const ModelSpec& spec, const Dataset& train, DefenseConfig cfg) {
  cfg.kind = DefenseKind::ZkGanDef;
  return train_defense(spec, train, cfg);
}

inline TrainResult train_adversarial(const ModelSpec& spec, const Dataset& train, DefenseConfig cfg,
                                     const AttackConfig& attack) {
  require(cfg.kind == DefenseKind::FgsmAdv || cfg.kind == DefenseKind::PgdAdv, ErrorKind::InvalidConfig,
          "adversarial training needs fgsm_adv or pgd_adv");
  cfg.attack = attack;
  return train_defense(spec, train, cfg);
}

inline TrainResult train_pgd_gandef(const ModelSpec& spec, const Dataset& train, DefenseConfig cfg,
                                    const AttackConfig& attack) {
  require(attack.kind == AttackKind::Pgd, ErrorKind::InvalidConfig, "PGD-GanDef needs a PGD attack");
  cfg.kind = DefenseKind::PgdGanDef;
  cfg.attack = attack;
  return train_defense(spec, train, cfg);
}

}  // namespace gandef
