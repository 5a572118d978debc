// gandef: train defenses, generate attacks, evaluate checkpoints, run
// experiment configs, check gradients and render result tables.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gandef/attacks.hpp"
#include "gandef/checkpoint.hpp"
#include "gandef/defenses.hpp"
#include "gandef/gradcheck.hpp"
#include "gandef/harness.hpp"

using namespace gandef;

namespace {

struct DataOptions {
  std::size_t train_subset = 10000;
  std::size_t test_subset = 2000;
  std::uint64_t data_seed = 0;
  std::string data_dir;
};

void add_data_options(CLI::App* cmd, DataOptions& o, bool train_subset) {
  if (train_subset) cmd->add_option("--subset", o.train_subset, "Training examples (0: full split)");
  cmd->add_option("--test-subset", o.test_subset, "Test examples (0: full split)");
  cmd->add_option("--data-seed", o.data_seed, "Seed for subset selection");
  cmd->add_option("--data-dir", o.data_dir, "Dataset root (default: $GANDEF_DATA_DIR or ./data)");
}

EvaluationSet load_data(const std::string& dataset, const DataOptions& o) {
  ExperimentConfig c;
  c.dataset = dataset;
  c.data_dir = o.data_dir;
  c.train_subset = o.train_subset;
  c.test_subset = o.test_subset;
  c.data_seed = o.data_seed;
  return load_evaluation_set(c);
}

ModelSpec checkpoint_model(const LoadedCheckpoint& ck) {
  const auto spec = build_model(ck.meta.arch_id);
  const auto expected = init_parameters(spec, 0);
  require(expected.owners == ck.params.owners, ErrorKind::ShapeMismatch, "checkpoint does not match " + spec.arch_id);
  return spec;
}

int cmd_train(const std::string& dataset, const std::string& defense, int epochs, std::uint64_t seed,
              std::size_t steps, std::size_t batch, const std::string& out, const DataOptions& data) {
  const auto kind = defense_from_string(defense);
  auto cfg = make_defense_config(kind, dataset, epochs);
  cfg.seed = seed;
  cfg.steps_per_epoch = steps;
  if (batch) cfg.batch_size = batch;
  const auto sets = load_data(dataset, data);
  const auto spec = build_model(default_arch(dataset));
  std::cout << "training " << display_name(kind) << " on " << sets.train.size() << " " << dataset
            << " examples for " << epochs << " epochs (seed " << seed << ")" << std::endl;
  const auto r = train_defense(spec, sets.train, cfg);
  for (const auto& e : r.record.epochs) {
    std::cout << "epoch " << e.epoch << " loss " << e.classifier_loss;
    if (std::isfinite(e.discriminator_loss)) std::cout << " disc " << e.discriminator_loss;
    std::cout << " " << e.seconds << "s" << (e.diverged ? " DIVERGED" : "") << "\n";
  }
  std::filesystem::create_directories(out);
  const auto stem = out + "/" + defense + "_seed" + std::to_string(seed);
  CheckpointMeta m;
  m.arch_id = spec.arch_id;
  m.seed = seed;
  m.epoch = static_cast<int>(r.record.epochs.size());
  m.dataset = dataset;
  m.defense = defense;
  m.optimizer = cfg.classifier_optimizer;
  save_checkpoint(stem + ".ckpt", r.classifier, m);
  write_train_record(r.record, stem + ".jsonl");
  const auto timing = measure_epoch_time(r.record);
  std::cout << "mean epoch seconds " << timing.mean_seconds
            << (timing.first_epoch_excluded ? " (first epoch excluded)" : "") << "\n";
  std::cout << "test accuracy " << test_accuracy(spec, r.classifier, sets.test.images, sets.test.labels) << " on "
            << sets.test.size() << " examples\n";
  std::cout << "wrote " << stem << ".ckpt\n";
  return r.record.diverged ? 3 : 0;
}

int cmd_attack(const std::string& checkpoint, const std::string& preset, const std::string& out, std::uint64_t seed,
               DataOptions data) {
  const auto ck = load_checkpoint(checkpoint);
  const auto spec = checkpoint_model(ck);
  require(!ck.meta.dataset.empty(), ErrorKind::InvalidConfig, "checkpoint metadata names no dataset");
  auto cfg = attack_preset(preset);
  require(preset.rfind(preset_family(ck.meta.dataset) + "-", 0) == 0, ErrorKind::InvalidConfig,
          "preset " + preset + " does not match dataset " + ck.meta.dataset);
  cfg.seed = seed;
  data.train_subset = 1;
  const auto sets = load_data(ck.meta.dataset, data);
  const auto adv = generate(spec, ck.params, sets.test.images, sets.test.labels, cfg);
  std::filesystem::create_directories(out);
  const auto path = out + "/" + preset + ".examples";
  save_examples(path, adv, sets.test.labels);
  std::cout << preset << " accuracy " << test_accuracy(spec, ck.params, adv, sets.test.labels) << " on "
            << sets.test.size() << " examples, max |delta| " << max_abs_diff(adv, sets.test.images) << "\n";
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& attacks, std::uint64_t seed, DataOptions data) {
  const auto ck = load_checkpoint(checkpoint);
  const auto spec = checkpoint_model(ck);
  std::vector<RosterEntry> roster;
  std::stringstream ss(attacks);
  for (std::string k; std::getline(ss, k, ',');) roster.push_back(roster_entry(k, ck.meta.dataset));
  data.train_subset = 1;
  const auto sets = load_data(ck.meta.dataset, data);
  const auto rows = evaluate_roster(spec, ck.params, sets.test, roster, ck.meta.defense, seed);
  ExperimentResult r;
  r.rows = rows;
  std::cout << results_csv(r);
  return 0;
}

int cmd_experiment(const std::string& config, const std::string& out_override) {
  auto cfg = load_experiment_config(config);
  if (!out_override.empty()) cfg.output_dir = out_override;
  const auto r = run_experiment(cfg, &std::cerr);
  std::filesystem::create_directories(cfg.output_dir);
  emit_results(r, ResultFormat::Csv, cfg.output_dir + "/results.csv");
  emit_results(r, ResultFormat::Json, cfg.output_dir + "/results.json");
  std::cout << render_report(r, ResultFormat::Table);
  for (const auto& run : r.runs)
    std::cout << run.defense << " seed " << run.seed << ": " << run.timing.mean_seconds << " s/epoch"
              << (run.timing.first_epoch_excluded ? " (first epoch excluded)" : "") << ", "
              << to_string(run.convergence) << (run.diverged ? ", diverged" : "") << "\n";
  std::cout << "wrote " << cfg.output_dir << "/results.csv\n";
  return 0;
}

int cmd_gradcheck(int instances, std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(instances, seed)) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.primitive << " instances=" << r.instances
              << " max_rel_err=" << r.max_relative_error << "\n";
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

int cmd_report(const std::string& dir, const std::string& format) {
  std::cout << render_report(load_results(dir), result_format_from_string(format));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial training defenses and white-box attacks"};
  app.require_subcommand(1);

  std::string dataset = "mnist", defense = "vanilla", out = "runs";
  int epochs = 10;
  std::uint64_t seed = 0;
  std::size_t steps = 0, batch = 0;
  DataOptions train_data;
  auto* train = app.add_subcommand("train", "Train one defense and save a checkpoint");
  train->add_option("--dataset", dataset, "mnist, fashion_mnist or cifar10");
  train->add_option("--defense", defense, "vanilla, clp, cls, zk_gandef, fgsm_adv, pgd_adv or pgd_gandef");
  train->add_option("--epochs", epochs, "Training epochs");
  train->add_option("--seed", seed, "Training seed");
  train->add_option("--steps-per-epoch", steps, "Optimization steps per epoch (0: subset / batch)");
  train->add_option("--batch-size", batch, "Batch size (0: dataset default)");
  train->add_option("--out", out, "Output directory");
  add_data_options(train, train_data, true);

  std::string checkpoint, preset, attack_out = "attacks";
  std::uint64_t attack_seed = 0;
  DataOptions attack_data;
  auto* attack = app.add_subcommand("attack", "Generate adversarial examples against a checkpoint");
  attack->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  attack->add_option("--preset", preset, "Attack preset, e.g. mnist-pgd")->required();
  attack->add_option("--out", attack_out, "Output directory");
  attack->add_option("--seed", attack_seed, "PGD random-start seed");
  add_data_options(attack, attack_data, false);

  std::string eval_ck, attacks = "original,fgsm,bim,pgd";
  std::uint64_t eval_seed = 0;
  DataOptions eval_data;
  auto* eval = app.add_subcommand("eval", "Test accuracy of a checkpoint on original and attacked examples");
  eval->add_option("--checkpoint", eval_ck, "Checkpoint path")->required();
  eval->add_option("--attacks", attacks, "Comma-separated example kinds");
  eval->add_option("--seed", eval_seed, "Attack seed");
  add_data_options(eval, eval_data, false);

  std::string config, exp_out;
  auto* experiment = app.add_subcommand("experiment", "Run a JSON experiment config");
  experiment->add_option("--config", config, "Experiment config file")->required();
  experiment->add_option("--out", exp_out, "Override the config's output directory");

  int instances = 100;
  std::uint64_t gc_seed = 7;
  auto* gradcheck = app.add_subcommand("gradcheck", "Check every primitive against finite differences");
  gradcheck->add_option("--instances", instances, "Random instances per primitive");
  gradcheck->add_option("--seed", gc_seed, "Instance seed");

  std::string results, format = "table";
  auto* report = app.add_subcommand("report", "Render the accuracy grid of a results directory");
  report->add_option("--results", results, "Results directory")->required();
  report->add_option("--format", format, "csv, json or table")->check(CLI::IsMember({"csv", "json", "table"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(dataset, defense, epochs, seed, steps, batch, out, train_data);
    if (*attack) return cmd_attack(checkpoint, preset, attack_out, attack_seed, attack_data);
    if (*eval) return cmd_eval(eval_ck, attacks, eval_seed, eval_data);
    if (*experiment) return cmd_experiment(config, exp_out);
    if (*gradcheck) return cmd_gradcheck(instances, gc_seed);
    if (*report) return cmd_report(results, format);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
