// cdkd: command-line driver for data generation, training, evaluation and
// reports.
//
// Every subcommand accepts --config FILE plus one --<dotted.key> VALUE flag
// per schema key; flags override the file, which overrides the defaults.
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 numeric failure,
// 4 incompatible checkpoint.

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "cdkd/cca.hpp"
#include "cdkd/checkpoint.hpp"
#include "cdkd/config.hpp"
#include "cdkd/errors.hpp"
#include "cdkd/gradsuite.hpp"
#include "cdkd/report.hpp"
#include "cdkd/runtime.hpp"
#include "cdkd/trainer.hpp"

namespace fs = std::filesystem;
using namespace cdkd;

namespace {

struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "config file of dotted.key = value lines");
    for (const auto& key : config_schema()) {
      app->add_option("--" + key.name, values[key.name], key.help + " [" + key.type + "]");
    }
  }

  RunConfig resolve(CLI::App* app) const {
    RunConfig cfg;
    if (!file.empty()) apply_config_file(cfg, file);
    for (const auto& key : config_schema()) {
      if (app->count("--" + key.name) > 0) set_config_value(cfg, key.name, values.at(key.name));
    }
    cfg.validate();
    return cfg;
  }
};

synth::Dataset load_data(const RunConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return synth::make_dataset(cfg.data_seed, cfg.n_train, cfg.n_val, cfg.scene);
  synth::SceneConfig train_cfg, val_cfg;
  auto train = synth::read_split(fs::path(data_dir) / "train.cdks", &train_cfg);
  auto val = synth::read_split(fs::path(data_dir) / "val.cdks", &val_cfg);
  if (train_cfg.high_side != cfg.scene.high_side || train_cfg.scale != cfg.scene.scale ||
      train_cfg.num_keypoints != cfg.scene.num_keypoints) {
    throw ConfigError("dataset in " + data_dir + " does not match the configured scene");
  }
  return synth::Dataset(cfg.data_seed, train_cfg, std::move(train), std::move(val));
}

void print_report(const harness::PckReport& r) {
  std::cout << "threshold,aggregate";
  for (std::size_t k = 0; k < r.per_keypoint.at(0).size(); ++k) std::cout << ",kp" << k;
  std::cout << "\n";
  for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
    std::cout << format_double(r.thresholds[t]) << "," << format_double(r.aggregate[t]);
    for (double v : r.per_keypoint[t]) std::cout << "," << format_double(v);
    std::cout << "\n";
  }
}

int run_selftest() {
  int failures = 0;
  auto line = [&](const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << " " << detail << "\n";
    if (!ok) ++failures;
  };

  const std::uint64_t seed0[] = {0};
  double worst = 0.0;
  for (const auto& r : run_grad_suite(seed0)) worst = std::max(worst, r.error);
  line("grad-suite", worst < 1e-4, "max rel err " + format_double(worst));

  RunConfig cfg;
  cfg.n_train = 64;
  cfg.n_val = 32;
  cfg.epochs = 2;
  cfg.teacher_epochs = 1;
  cfg.batch_size = 16;
  cfg.decay_epoch = 1;
  const auto data = synth::make_dataset(cfg.data_seed, cfg.n_train, cfg.n_val, cfg.scene);
  const auto teacher = harness::train_teacher(cfg, data);
  auto frozen = teacher.best.clone();
  frozen.set_frozen(true);
  const auto a = harness::train_student(cfg, data, &frozen);
  const auto b = harness::train_student(cfg, data, &frozen);
  std::string ca, cb;
  for (const auto& r : a.rows) ca += harness::format_metric_row(r) + "\n";
  for (const auto& r : b.rows) cb += harness::format_metric_row(r) + "\n";
  line("determinism", ca == cb, std::to_string(a.rows.size()) + " rows");

  const auto ckpt = make_checkpoint(a.best, echo_config(cfg), 1);
  const auto bytes = serialize(ckpt);
  line("checkpoint-roundtrip", serialize(deserialize(bytes)) == bytes,
       std::to_string(bytes.size()) + " bytes");

  bool tau_ok = true;
  for (const auto& r : a.rows) tau_ok = tau_ok && r.tau >= cfg.tau_min && r.tau <= cfg.tau_max;
  line("tau-bounds", tau_ok, "");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"cross-resolution keypoint distillation lab"};
  app.require_subcommand(1);

  ConfigFlags gen_flags, teacher_flags, student_flags, eval_flags;
  std::string teacher_data, student_data, eval_data;

  auto* gen = app.add_subcommand("gen-data", "write train/val splits to <out_dir>/data");
  gen_flags.attach(gen);

  auto* train_teacher = app.add_subcommand("train-teacher", "train the high-resolution teacher");
  teacher_flags.attach(train_teacher);
  train_teacher->add_option("--data-dir", teacher_data, "read splits written by gen-data");

  auto* train_student = app.add_subcommand(
      "train-student", "train the low-resolution student; distills when paths.teacher is set");
  student_flags.attach(train_student);
  bool baseline = false;
  train_student->add_flag("--baseline", baseline, "ignore paths.teacher and train without distillation");
  train_student->add_option("--data-dir", student_data, "read splits written by gen-data");

  auto* eval = app.add_subcommand("eval", "PCK of a checkpoint on a split");
  eval_flags.attach(eval);
  std::string eval_ckpt, eval_split = "val", eval_net = "student";
  bool eval_strip = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--split", eval_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--network", eval_net, "teacher or student")
      ->check(CLI::IsMember({"teacher", "student"}));
  eval->add_flag("--strip", eval_strip, "drop sape and etht tensors before evaluating");
  eval->add_option("--data-dir", eval_data, "read splits written by gen-data");

  auto* report = app.add_subcommand("report", "summary and plots for a run directory");
  std::string run_dir;
  report->add_option("run_dir", run_dir, "directory holding metrics.csv")->required();

  auto* grad = app.add_subcommand("grad-check", "finite-difference sweep over all primitives");
  double grad_h = 1e-5;
  double grad_tol = 1e-4;
  grad->add_option("--step", grad_h, "central difference step");
  grad->add_option("--tolerance", grad_tol, "maximum accepted relative error");

  auto* selftest = app.add_subcommand("selftest", "quick end-to-end sanity run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = gen_flags.resolve(gen);
      const auto data = synth::make_dataset(cfg.data_seed, cfg.n_train, cfg.n_val, cfg.scene);
      const fs::path dir = fs::path(cfg.out_dir) / "data";
      fs::create_directories(dir);
      synth::write_split(dir / "train.cdks", cfg.scene, data.train());
      synth::write_split(dir / "val.cdks", cfg.scene, data.val());
      harness::write_config_echo(cfg.out_dir, cfg);
      std::cout << "wrote " << data.train().size() << " train and " << data.val().size()
                << " val samples to " << dir.string() << "\n";
    } else if (train_teacher->parsed()) {
      const auto cfg = teacher_flags.resolve(train_teacher);
      const auto data = load_data(cfg, teacher_data);
      const auto result = harness::train_teacher(cfg, data, {cfg.out_dir, {}, true});
      std::cout << "teacher best val pck " << format_double(result.best_val_pck) << " after "
                << result.best_epochs << " epochs; checkpoint "
                << (fs::path(cfg.out_dir) / "best.ckpt").string() << "\n";
    } else if (train_student->parsed()) {
      const auto cfg = student_flags.resolve(train_student);
      const auto data = load_data(cfg, student_data);
      std::unique_ptr<model::ParamSet> teacher;
      if (!baseline && !cfg.teacher_path.empty()) {
        teacher = std::make_unique<model::ParamSet>(harness::load_teacher(cfg, cfg.teacher_path));
      }
      const auto result = harness::train_student(cfg, data, teacher.get(), {cfg.out_dir, {}, true});
      std::cout << (teacher ? "distilled" : "baseline") << " student best val pck "
                << format_double(result.best_val_pck) << " after " << result.best_epochs
                << " epochs\n";
    } else if (eval->parsed()) {
      const auto cfg = eval_flags.resolve(eval);
      const auto net = eval_net == "teacher" ? harness::Network::kTeacher : harness::Network::kStudent;
      auto ckpt = load_checkpoint(eval_ckpt);
      if (eval_strip) ckpt = strip(ckpt, {model::Role::kSape, model::Role::kEtht});
      auto params = harness::build_network(cfg, net);
      restore(ckpt, params, model::RoleSet::inference());
      const auto data = load_data(cfg, eval_data);
      const auto& samples = eval_split == "train" ? data.train() : data.val();
      std::cout << "inference parameters " << model::count_params(params) << "\n";
      print_report(harness::evaluate(params, cfg, net, samples));
    } else if (report->parsed()) {
      for (const auto& p : harness::emit_report(run_dir)) std::cout << "wrote " << p.string() << "\n";
    } else if (grad->parsed()) {
      double worst = 0.0;
      std::size_t failed = 0;
      const auto results = run_grad_suite(kDefaultGradSeeds, grad_h);
      for (const auto& r : results) {
        const bool ok = r.error < grad_tol;
        if (!ok) ++failed;
        worst = std::max(worst, r.error);
        std::cout << (ok ? "ok   " : "FAIL ") << std::left << std::setw(18) << r.op << std::setw(22)
                  << r.wrt << std::setw(26) << r.shape << " seed " << r.seed << "  "
                  << std::scientific << std::setprecision(3) << r.error << std::defaultfloat
                  << "\n";
      }
      std::cout << results.size() << " checks, " << failed << " failed, max rel err " << worst
                << "\n";
      return failed == 0 ? 0 : 1;
    } else if (selftest->parsed()) {
      return run_selftest();
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "incompatible checkpoint: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
