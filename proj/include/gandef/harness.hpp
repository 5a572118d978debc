#pragma once

// Experiment orchestration: test accuracy, epoch timing, divergence
// detection, seeded end-to-end runs and result emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gandef/attacks.hpp"
#include "gandef/checkpoint.hpp"
#include "gandef/data.hpp"
#include "gandef/defenses.hpp"
#include "gandef/error.hpp"
#include "gandef/model.hpp"

namespace gandef {

// ---- metrics ------------------------------------------------------------------

/// Fraction of examples whose argmax prediction equals the label. The
/// classifiers here never reject, so misclassification is the only failure.
inline double accuracy_from_predictions(std::span<const int> predicted, std::span<const int> labels) {
  require(!labels.empty(), ErrorKind::EmptyTestSet, "no test examples");
  require(predicted.size() == labels.size(), ErrorKind::ShapeMismatch, "predictions vs labels");
  std::size_t failed = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) failed += predicted[i] != labels[i];
  return double(labels.size() - failed) / double(labels.size());
}

inline double test_accuracy(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                            std::span<const int> labels) {
  require(!labels.empty() && x.rank() > 0 && x.dim(0) > 0, ErrorKind::EmptyTestSet, "no test examples");
  const auto pred = argmax_rows(predict_logits(spec, params, x));
  return accuracy_from_predictions(pred, labels);
}

struct EpochTiming {
  double mean_seconds = 0.0;
  bool first_epoch_excluded = false;
  std::size_t epochs = 0;
};

/// Mean seconds per epoch, dropping the first (warm-up) epoch when more than one exists.
inline EpochTiming measure_epoch_time(std::span<const double> seconds) {
  require(!seconds.empty(), ErrorKind::NoEpochs, "no completed epochs");
  EpochTiming t;
  t.epochs = seconds.size();
  t.first_epoch_excluded = seconds.size() > 1;
  const auto from = seconds.begin() + (t.first_epoch_excluded ? 1 : 0);
  double sum = 0.0;
  for (auto it = from; it != seconds.end(); ++it) sum += *it;
  t.mean_seconds = sum / double(seconds.end() - from);
  return t;
}

inline EpochTiming measure_epoch_time(const TrainRecord& r) {
  const auto s = r.epoch_seconds();
  return measure_epoch_time(std::span<const double>(s));
}

enum class Convergence { Converging, Stalled, Diverged };

inline std::string to_string(Convergence c) {
  switch (c) {
    case Convergence::Converging: return "converging";
    case Convergence::Stalled: return "stalled";
    case Convergence::Diverged: return "diverged";
  }
  return "unknown";
}

/// Diverged: any non-finite loss. Stalled: the trailing window is flat
/// (max - min < flat_tolerance) while the loss sits within a factor 1.5 of the
/// chance loss ln(num_classes) or above it. Otherwise converging.
inline Convergence detect_divergence(std::span<const double> history, std::size_t window, double flat_tolerance,
                                     int num_classes = 10) {
  require(window >= 2, ErrorKind::InvalidConfig, "divergence window must be at least 2");
  for (double v : history)
    if (!std::isfinite(v)) return Convergence::Diverged;
  if (history.size() < window) return Convergence::Converging;
  const auto tail = history.last(window);
  const auto [lo, hi] = std::minmax_element(tail.begin(), tail.end());
  const double chance = std::log(double(num_classes));
  if (*hi - *lo < flat_tolerance && tail.back() > chance / 1.5) return Convergence::Stalled;
  return Convergence::Converging;
}

// ---- source probe ---------------------------------------------------------------

struct ProbeConfig {
  std::size_t steps = 400;
  std::size_t batch_size = 64;
  double sigma = 1.0;
  std::vector<double> noise_mask;
  OptimizerConfig optimizer{OptimizerKind::Adam, 1e-3};
  std::uint64_t seed = 0;
};

/// Trains a fresh discriminator on the frozen classifier's logits to predict
/// whether the input was perturbed, and returns its held-out accuracy. Near
/// 0.5 means the logits carry little information about the perturbation.
inline double probe_source_accuracy(const ModelSpec& cspec, const ParamSet& cparams, const Dataset& probe_train,
                                    const Dataset& probe_test, const ProbeConfig& pc) {
  require(probe_test.size() >= 2, ErrorKind::EmptyTestSet, "probe needs held-out examples");
  const auto dspec = build_discriminator(cspec.output_shape().at(0));
  auto dp = init_parameters(dspec, derive_seed(pc.seed, 0));
  auto opt = make_opt_state(dp, pc.optimizer);
  const std::span<const double> mask(pc.noise_mask);
  BatchSampler sampler(probe_train.size(), derive_seed(pc.seed, 1));
  const std::size_t half = pc.batch_size / 2;
  for (std::size_t k = 0; k < pc.steps; ++k) {
    const auto orig = sampler.next(half);
    const auto pert = sampler.next(half);
    const auto b = mixed_batch_from(probe_train, orig, pert, pc.sigma, derive_seed(derive_seed(pc.seed, 2), k), mask);
    Graph g;
    Rng rng(0);
    auto bound = bind_params(g, dp, true);
    Var p = forward(dspec, bound, g.constant(predict_logits(cspec, cparams, b.x)), Mode::Train, rng);
    Var loss = ops::mean(ops::binary_cross_entropy(p, b.s));
    g.backward(loss);
    optimizer_step(dp, collect_gradients(g, bound), opt, pc.optimizer.learning_rate);
  }
  std::vector<std::size_t> first(probe_test.size() / 2), second(probe_test.size() / 2);
  std::iota(first.begin(), first.end(), 0);
  std::iota(second.begin(), second.end(), first.size());
  const auto held = mixed_batch_from(probe_test, first, second, pc.sigma, derive_seed(pc.seed, 3), mask);
  const Tensor prob = predict_logits(dspec, dp, predict_logits(cspec, cparams, held.x));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < held.s.size(); ++i) correct += (prob[i] > 0.5) == (held.s[i] > 0.5);
  return double(correct) / double(held.s.size());
}

// ---- experiment configuration -------------------------------------------------

struct RosterEntry {
  std::string kind;  // original, fgsm, bim or pgd
  std::optional<AttackConfig> attack;

  friend bool operator==(const RosterEntry&, const RosterEntry&) = default;
};

inline const std::vector<std::string>& example_kinds() {
  static const std::vector<std::string> v{"original", "fgsm", "bim", "pgd"};
  return v;
}

inline std::string example_display_name(const std::string& kind) {
  if (kind == "original") return "Original";
  if (kind == "fgsm") return "FGSM";
  if (kind == "bim") return "BIM";
  if (kind == "pgd") return "PGD";
  return kind;
}

/// Roster entry using the dataset's preset for `kind`.
inline RosterEntry roster_entry(const std::string& kind, const std::string& dataset) {
  if (kind == "original") return {kind, std::nullopt};
  require(std::find(example_kinds().begin(), example_kinds().end(), kind) != example_kinds().end(),
          ErrorKind::InvalidConfig, "unknown example kind " + kind);
  return {kind, attack_preset(preset_family(dataset) + "-" + kind)};
}

struct ExperimentConfig {
  std::string dataset = "mnist";
  std::string data_dir;  // empty: GANDEF_DATA_DIR or ./data
  std::string arch;      // empty: the dataset's classifier
  std::vector<DefenseConfig> defenses;
  std::vector<RosterEntry> roster;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "results";
  std::size_t train_subset = 10000;  // 0: full split
  std::size_t test_subset = 2000;
  std::uint64_t data_seed = 0;  // fixes the subsets across training seeds
  bool save_checkpoints = false;
};

inline std::string default_arch(const std::string& dataset) {
  if (dataset == "mnist" || dataset == "fashion_mnist") return "mnist_lenet";
  if (dataset == "cifar10") return "cifar_allcnn";
  throw Error(ErrorKind::InvalidConfig, "no default architecture for " + dataset);
}

inline void validate(const ExperimentConfig& c) {
  require(!c.seeds.empty(), ErrorKind::InvalidConfig, "at least one seed is required");
  require(!c.defenses.empty(), ErrorKind::InvalidConfig, "at least one defense is required");
  for (const auto& d : c.defenses) validate(d);
  for (const auto& e : c.roster) {
    if (!e.attack) {
      require(e.kind == "original", ErrorKind::InvalidConfig, "attack entry " + e.kind + " has no config");
      continue;
    }
    validated(*e.attack);
    require(to_string(e.attack->kind) == e.kind, ErrorKind::InvalidConfig,
            "roster entry " + e.kind + " carries a " + to_string(e.attack->kind) + " config");
  }
  // A budget equal to the other image scale's preset is a mixed-up preset.
  const std::string other = c.dataset == "cifar10" ? "mnist" : "cifar";
  for (const auto& e : c.roster)
    if (e.attack && e.kind != "original")
      require(e.attack->epsilon != attack_preset(other + "-" + e.kind).epsilon, ErrorKind::InvalidConfig,
              "attack " + e.kind + " uses the " + other + " preset budget on " + c.dataset);
}

namespace detail {

inline AttackConfig attack_from_json(const nlohmann::json& j, const std::string& dataset, const std::string& kind) {
  if (j.is_string()) return attack_preset(j.get<std::string>());
  AttackConfig a = j.contains("preset") ? attack_preset(j["preset"].get<std::string>())
                                         : attack_preset(preset_family(dataset) + "-" + kind);
  if (j.contains("kind")) a.kind = attack_kind_from_string(j["kind"].get<std::string>());
  a.epsilon = j.value("epsilon", a.epsilon);
  a.step_size = j.value("step_size", a.step_size);
  a.iterations = j.value("iterations", a.iterations);
  a.restarts = j.value("restarts", a.restarts);
  a.seed = j.value("seed", a.seed);
  return validated(a);
}

inline nlohmann::json attack_to_json(const AttackConfig& a) {
  return {{"kind", to_string(a.kind)},       {"epsilon", a.epsilon}, {"step_size", a.step_size},
          {"iterations", a.iterations},      {"restarts", a.restarts}, {"random_start", a.random_start},
          {"seed", a.seed}};
}

inline DefenseConfig defense_from_json(const nlohmann::json& j, const std::string& dataset, int default_epochs) {
  const auto kind = defense_from_string(j.is_string() ? j.get<std::string>() : j.at("kind").get<std::string>());
  const int epochs = j.is_object() ? j.value("epochs", default_epochs) : default_epochs;
  DefenseConfig c = make_defense_config(kind, dataset, epochs);
  if (!j.is_object()) return c;
  c.lambda = j.value("lambda", c.lambda);
  c.gamma = j.value("gamma", c.gamma);
  c.sigma = j.value("sigma", c.sigma);
  c.inner = j.value("inner", c.inner);
  c.inner_full_pass = j.value("inner_full_pass", c.inner_full_pass);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.squared_norm = j.value("squared_norm", c.squared_norm);
  c.classifier_optimizer.learning_rate = j.value("learning_rate", c.classifier_optimizer.learning_rate);
  c.discriminator_optimizer.learning_rate =
      j.value("discriminator_learning_rate", c.discriminator_optimizer.learning_rate);
  if (j.contains("attack")) c.attack = attack_from_json(j["attack"], dataset, "pgd");
  return c;
}

inline nlohmann::json defense_to_json(const DefenseConfig& c) {
  nlohmann::json j{{"kind", to_string(c.kind)},
                   {"epochs", c.epochs},
                   {"lambda", c.lambda},
                   {"gamma", c.gamma},
                   {"sigma", c.sigma},
                   {"inner", c.inner},
                   {"inner_full_pass", c.inner_full_pass},
                   {"batch_size", c.batch_size},
                   {"steps_per_epoch", c.steps_per_epoch},
                   {"squared_norm", c.squared_norm},
                   {"learning_rate", c.classifier_optimizer.learning_rate},
                   {"discriminator_learning_rate", c.discriminator_optimizer.learning_rate}};
  if (uses_attack(c.kind)) j["attack"] = attack_to_json(c.attack);
  return j;
}

}  // namespace detail

/// Parses the JSON experiment file. Defenses may be names or objects with
/// overrides; roster entries may be kind names or objects with an attack.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.dataset = j.value("dataset", c.dataset);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.arch = j.value("arch", c.arch);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.train_subset = j.value("train_subset", c.train_subset);
  c.test_subset = j.value("test_subset", c.test_subset);
  c.data_seed = j.value("data_seed", c.data_seed);
  c.save_checkpoints = j.value("save_checkpoints", c.save_checkpoints);
  if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  const int epochs = j.value("epochs", 10);
  if (j.contains("defense")) c.defenses.push_back(detail::defense_from_json(j["defense"], c.dataset, epochs));
  if (j.contains("defenses"))
    for (const auto& d : j["defenses"]) c.defenses.push_back(detail::defense_from_json(d, c.dataset, epochs));
  if (j.contains("attacks")) {
    for (const auto& a : j["attacks"]) {
      if (a.is_string()) {
        c.roster.push_back(roster_entry(a.get<std::string>(), c.dataset));
        continue;
      }
      const auto kind = a.at("kind").get<std::string>();
      if (kind == "original") {
        c.roster.push_back({kind, std::nullopt});
        continue;
      }
      c.roster.push_back({kind, detail::attack_from_json(a, c.dataset, kind)});
    }
  } else {
    c.roster.push_back(roster_entry("original", c.dataset));
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::IoFailure, "cannot read " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, path + ": " + e.what());
  }
  return experiment_from_json(j);
}

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
  nlohmann::json j{{"dataset", c.dataset},       {"arch", c.arch},
                   {"seeds", c.seeds},           {"output_dir", c.output_dir},
                   {"train_subset", c.train_subset}, {"test_subset", c.test_subset},
                   {"data_seed", c.data_seed},   {"save_checkpoints", c.save_checkpoints}};
  if (!c.data_dir.empty()) j["data_dir"] = c.data_dir;
  j["defenses"] = nlohmann::json::array();
  for (const auto& d : c.defenses) j["defenses"].push_back(detail::defense_to_json(d));
  j["attacks"] = nlohmann::json::array();
  for (const auto& e : c.roster) {
    nlohmann::json a = e.attack ? detail::attack_to_json(*e.attack) : nlohmann::json::object();
    a["kind"] = e.kind;
    j["attacks"].push_back(a);
  }
  return j;
}

// ---- experiment results ---------------------------------------------------------

struct ResultRow {
  std::string defense;
  std::string example_kind;
  std::uint64_t seed = 0;
  std::size_t n_tested = 0;
  double accuracy = 0.0;
};

struct RunSummary {
  std::string defense;
  std::uint64_t seed = 0;
  EpochTiming timing;
  Convergence convergence = Convergence::Converging;
  bool diverged = false;
  std::string note;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<RunSummary> runs;
};

struct EvaluationSet {
  Dataset train;
  Dataset test;
};

/// Train/test subsets drawn with the config's data seed.
inline EvaluationSet load_evaluation_set(const ExperimentConfig& c) {
  const std::string dir = c.data_dir.empty() ? default_data_dir() : c.data_dir;
  EvaluationSet s{load_dataset(c.dataset, "train", dir), load_dataset(c.dataset, "test", dir)};
  if (c.train_subset && c.train_subset < s.train.size())
    s.train = take_subset(s.train, c.train_subset, derive_seed(c.data_seed, 0));
  if (c.test_subset && c.test_subset < s.test.size())
    s.test = take_subset(s.test, c.test_subset, derive_seed(c.data_seed, 1));
  return s;
}

/// Accuracy of a trained classifier on each roster entry. Attack seeds derive
/// from `seed` and the entry's kind, so entries do not depend on roster order.
inline std::vector<ResultRow> evaluate_roster(const ModelSpec& spec, const ParamSet& params, const Dataset& test,
                                              const std::vector<RosterEntry>& roster, const std::string& defense,
                                              std::uint64_t seed) {
  std::vector<ResultRow> rows;
  for (const auto& e : roster) {
    Tensor x = test.images;
    if (e.attack) {
      AttackConfig a = *e.attack;
      a.seed = derive_seed(derive_seed(seed, 100 + static_cast<std::uint64_t>(a.kind)), a.seed);
      x = generate(spec, params, test.images, test.labels, a);
    }
    rows.push_back({defense, e.kind, seed, test.size(), test_accuracy(spec, params, x, test.labels)});
  }
  return rows;
}

/// Per seed and defense: train, attack the test set with every roster entry
/// and score. A diverged run still gets rows (of its last parameters) and is flagged.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const ModelSpec& spec, const EvaluationSet& data,
                                       std::ostream* log = nullptr) {
  validate(cfg);
  ExperimentResult out;
  for (auto seed : cfg.seeds) {
    for (const auto& base : cfg.defenses) {
      DefenseConfig dc = base;
      dc.seed = seed;
      const auto name = to_string(dc.kind);
      if (log) *log << "[" << name << " seed " << seed << "] training " << dc.epochs << " epochs" << std::endl;
      auto trained = train_defense(spec, data.train, dc);
      RunSummary run;
      run.defense = name;
      run.seed = seed;
      if (!trained.record.epochs.empty()) run.timing = measure_epoch_time(trained.record);
      const auto losses = trained.record.classifier_losses();
      run.convergence = detect_divergence(losses, std::max<std::size_t>(2, std::min<std::size_t>(3, losses.size())),
                                          1e-3, static_cast<int>(spec.output_shape().at(0)));
      run.diverged = trained.record.diverged;
      run.note = trained.record.note;
      out.runs.push_back(run);
      if (!cfg.output_dir.empty()) {
        std::filesystem::create_directories(cfg.output_dir);
        const auto stem = cfg.output_dir + "/" + name + "_seed" + std::to_string(seed);
        write_train_record(trained.record, stem + ".jsonl");
        if (cfg.save_checkpoints) {
          CheckpointMeta m;
          m.arch_id = spec.arch_id;
          m.seed = seed;
          m.epoch = static_cast<int>(trained.record.epochs.size());
          m.dataset = cfg.dataset;
          m.defense = name;
          m.optimizer = dc.classifier_optimizer;
          save_checkpoint(stem + ".ckpt", trained.classifier, m);
        }
      }
      auto rows = evaluate_roster(spec, trained.classifier, data.test, cfg.roster, name, seed);
      for (const auto& r : rows) {
        if (log) *log << "  " << r.example_kind << ": " << r.accuracy << std::endl;
        out.rows.push_back(r);
      }
    }
  }
  return out;
}

inline ModelSpec experiment_model(const ExperimentConfig& cfg) {
  return build_model(cfg.arch.empty() ? default_arch(cfg.dataset) : cfg.arch);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  return run_experiment(cfg, experiment_model(cfg), load_evaluation_set(cfg), log);
}

// ---- emission -----------------------------------------------------------------

enum class ResultFormat { Csv, Json, Table };

inline ResultFormat result_format_from_string(const std::string& s) {
  if (s == "csv") return ResultFormat::Csv;
  if (s == "json") return ResultFormat::Json;
  if (s == "table") return ResultFormat::Table;
  throw Error(ErrorKind::InvalidConfig, "unknown result format " + s);
}

inline std::string format_accuracy(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", a);
  return buf;
}

inline std::string results_csv(const ExperimentResult& r) {
  std::string s = "defense,example_kind,seed,n_tested,accuracy\n";
  for (const auto& row : r.rows)
    s += row.defense + "," + row.example_kind + "," + std::to_string(row.seed) + "," + std::to_string(row.n_tested) +
         "," + format_accuracy(row.accuracy) + "\n";
  return s;
}

inline nlohmann::json results_json(const ExperimentResult& r) {
  nlohmann::json j{{"rows", nlohmann::json::array()}, {"runs", nlohmann::json::array()}};
  for (const auto& row : r.rows)
    j["rows"].push_back({{"defense", row.defense},
                         {"example_kind", row.example_kind},
                         {"seed", row.seed},
                         {"n_tested", row.n_tested},
                         {"accuracy", row.accuracy}});
  for (const auto& run : r.runs)
    j["runs"].push_back({{"defense", run.defense},
                         {"seed", run.seed},
                         {"mean_epoch_seconds", run.timing.mean_seconds},
                         {"first_epoch_excluded", run.timing.first_epoch_excluded},
                         {"epochs", run.timing.epochs},
                         {"convergence", to_string(run.convergence)},
                         {"diverged", run.diverged},
                         {"note", run.note}});
  return j;
}

inline ExperimentResult results_from_json(const nlohmann::json& j) {
  ExperimentResult r;
  for (const auto& row : j.at("rows"))
    r.rows.push_back({row.at("defense").get<std::string>(), row.at("example_kind").get<std::string>(),
                      row.at("seed").get<std::uint64_t>(), row.at("n_tested").get<std::size_t>(),
                      row.at("accuracy").get<double>()});
  if (j.contains("runs"))
    for (const auto& run : j["runs"]) {
      RunSummary s;
      s.defense = run.at("defense").get<std::string>();
      s.seed = run.at("seed").get<std::uint64_t>();
      s.timing.mean_seconds = run.value("mean_epoch_seconds", 0.0);
      s.timing.first_epoch_excluded = run.value("first_epoch_excluded", false);
      s.timing.epochs = run.value("epochs", std::size_t{0});
      const auto conv = run.value("convergence", std::string("converging"));
      s.convergence = conv == "diverged" ? Convergence::Diverged
                      : conv == "stalled" ? Convergence::Stalled
                                          : Convergence::Converging;
      s.diverged = run.value("diverged", false);
      s.note = run.value("note", std::string());
      r.runs.push_back(s);
    }
  return r;
}

/// Parses the CSV written by results_csv (rows only).
inline ExperimentResult results_from_csv(std::istream& is) {
  ExperimentResult r;
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == "defense,example_kind,seed,n_tested,accuracy",
          ErrorKind::InvalidConfig, "unexpected results header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& x : f) std::getline(ss, x, ',');
    r.rows.push_back({f[0], f[1], std::stoull(f[2]), std::stoull(f[3]), std::stod(f[4])});
  }
  return r;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::IoFailure, "cannot write " + path);
  os << text;
  require(static_cast<bool>(os), ErrorKind::IoFailure, "write failed for " + path);
}

inline void emit_results(const ExperimentResult& r, ResultFormat format, const std::string& path) {
  require(format != ResultFormat::Table, ErrorKind::InvalidConfig, "tables are rendered by report");
  write_text(path, format == ResultFormat::Csv ? results_csv(r) : results_json(r).dump(2) + "\n");
}

// ---- report ---------------------------------------------------------------------

struct GridCell {
  double mean = 0.0, min = 0.0, max = 0.0;
  std::size_t seeds = 0;
};

/// Defense x example-kind accuracy aggregated over seeds, keyed by internal names.
struct AccuracyGrid {
  std::vector<std::string> defenses;  // display order
  std::vector<std::string> kinds;     // original, fgsm, bim, pgd order
  std::map<std::pair<std::string, std::string>, GridCell> cells;

  const GridCell* at(const std::string& d, const std::string& k) const {
    auto it = cells.find({d, k});
    return it == cells.end() ? nullptr : &it->second;
  }
};

inline AccuracyGrid accuracy_grid(const ExperimentResult& r) {
  AccuracyGrid g;
  std::map<std::pair<std::string, std::string>, std::vector<double>> acc;
  for (const auto& row : r.rows) acc[{row.defense, row.example_kind}].push_back(row.accuracy);
  for (auto k : all_defenses()) {
    const auto name = to_string(k);
    if (std::any_of(r.rows.begin(), r.rows.end(), [&](const ResultRow& x) { return x.defense == name; }))
      g.defenses.push_back(name);
  }
  for (const auto& k : example_kinds())
    if (std::any_of(r.rows.begin(), r.rows.end(), [&](const ResultRow& x) { return x.example_kind == k; }))
      g.kinds.push_back(k);
  for (const auto& [key, v] : acc) {
    GridCell c;
    c.seeds = v.size();
    c.min = *std::min_element(v.begin(), v.end());
    c.max = *std::max_element(v.begin(), v.end());
    for (double a : v) c.mean += a;
    c.mean /= double(v.size());
    g.cells[key] = c;
  }
  return g;
}

namespace detail {

inline std::string percent(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * a);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace detail

/// Accuracy grid in the layout of the published results table: defenses as
/// rows (Vanilla first), example kinds as columns. Multi-seed cells show the
/// mean and the min..max range.
inline std::string render_report(const ExperimentResult& r, ResultFormat format) {
  const auto g = accuracy_grid(r);
  if (format == ResultFormat::Json) {
    nlohmann::json j{{"columns", nlohmann::json::array()}, {"rows", nlohmann::json::array()}};
    for (const auto& k : g.kinds) j["columns"].push_back(example_display_name(k));
    for (const auto& d : g.defenses) {
      nlohmann::json row{{"defense", display_name(defense_from_string(d))}, {"cells", nlohmann::json::object()}};
      for (const auto& k : g.kinds)
        if (const auto* c = g.at(d, k))
          row["cells"][example_display_name(k)] = {
              {"mean", c->mean}, {"min", c->min}, {"max", c->max}, {"seeds", c->seeds}};
      j["rows"].push_back(row);
    }
    return j.dump(2) + "\n";
  }
  if (format == ResultFormat::Csv) {
    std::string s = "defense";
    for (const auto& k : g.kinds) s += "," + k;
    s += "\n";
    for (const auto& d : g.defenses) {
      s += display_name(defense_from_string(d));
      for (const auto& k : g.kinds) {
        const auto* c = g.at(d, k);
        s += "," + (c ? format_accuracy(c->mean) : std::string());
      }
      s += "\n";
    }
    return s;
  }
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Defense"};
  for (const auto& k : g.kinds) header.push_back(example_display_name(k));
  cells.push_back(header);
  for (const auto& d : g.defenses) {
    std::vector<std::string> row{display_name(defense_from_string(d))};
    for (const auto& k : g.kinds) {
      const auto* c = g.at(d, k);
      if (!c) {
        row.push_back("-");
      } else if (c->seeds == 1) {
        row.push_back(detail::percent(c->mean));
      } else {
        row.push_back(detail::percent(c->mean) + " (" + detail::percent(c->min) + ".." + detail::percent(c->max) + ")");
      }
    }
    cells.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::string s;
  for (std::size_t r_i = 0; r_i < cells.size(); ++r_i) {
    for (std::size_t i = 0; i < cells[r_i].size(); ++i)
      s += (i ? " | " : "| ") + detail::pad(cells[r_i][i], width[i]) + (i + 1 == cells[r_i].size() ? " |" : "");
    s += "\n";
    if (r_i == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) s += (i ? "-|-" : "|-") + std::string(width[i], '-');
      s += "-|\n";
    }
  }
  return s;
}

/// Loads results.json from a results directory, falling back to results.csv.
inline ExperimentResult load_results(const std::string& dir) {
  const std::filesystem::path p(dir);
  if (std::filesystem::exists(p / "results.json")) {
    std::ifstream is(p / "results.json");
    return results_from_json(nlohmann::json::parse(is));
  }
  std::ifstream is(p / "results.csv");
  require(static_cast<bool>(is), ErrorKind::IoFailure, "no results.json or results.csv in " + dir);
  return results_from_csv(is);
}

}  // namespace gandef
