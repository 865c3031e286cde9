#pragma once

// Run configuration: a flat, schema-validated set of dotted keys.
//
// File format: UTF-8 lines of `dotted.key = value`; `#` starts a comment.
// Resolution order is defaults < file < command-line overrides.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cdkd/cca.hpp"
#include "cdkd/model.hpp"
#include "cdkd/sape.hpp"
#include "cdkd/simcc.hpp"
#include "cdkd/synth.hpp"

namespace cdkd {

struct RunConfig {
  // data
  std::uint64_t data_seed = 0;
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  synth::SceneConfig scene;

  // model
  model::BackboneConfig backbone;
  simcc::SimccConfig simcc;

  // distillation
  sape::SapeConfig sape;
  cca::LossWeights weights;
  double tau_init = 1.0;
  double tau_min = 0.5;
  double tau_max = 10.0;
  cca::Schedule schedule = cca::Schedule::kLinear;
  bool learn_tau = true;
  bool learn_loss_weights = false;
  double loss_weight_max = 10.0;

  // optimization
  std::uint64_t init_seed = 0;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t teacher_epochs = 30;
  std::size_t batch_size = 32;
  std::size_t decay_epoch = 20;
  double decay_factor = 0.1;

  // evaluation and paths
  double eval_threshold = 0.1;
  std::string out_dir = "runs/default";
  std::string teacher_path;

  std::size_t high_side() const { return scene.high_side; }
  std::size_t low_side() const { return scene.low_side(); }
  std::size_t scale() const { return scene.scale; }

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string type;  // int, float, bool, string, int-list, schedule
  std::string help;
};

/// Every accepted key, in echo order.
const std::vector<ConfigKey>& config_schema();

/// Sets one key from its textual value; throws ConfigError on unknown keys
/// or malformed values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// Parses `key = value` lines into overrides (source names errors).
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& source);

/// Applies a config file on top of `cfg`.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// One `key = value` line per schema key; parsing it reproduces `cfg`.
std::string echo_config(const RunConfig& cfg);

/// Shortest decimal text that round-trips the double exactly.
std::string format_double(double v);

}  // namespace cdkd
