#pragma once

// Teacher pretraining, student training (baseline or distilled) and
// evaluation.
//
// The teacher is frozen during distillation and the data are fixed, so its
// features and logits are computed once per split and sliced per batch.

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdkd/cca.hpp"
#include "cdkd/checkpoint.hpp"
#include "cdkd/config.hpp"
#include "cdkd/model.hpp"
#include "cdkd/simcc.hpp"
#include "cdkd/synth.hpp"

namespace cdkd::harness {

enum class Network { kTeacher, kStudent };
std::string_view network_name(Network net);

inline constexpr const char* kTauPath = "etht.tau";
inline constexpr const char* kAlphaPath = "etht.alpha";
inline constexpr const char* kBetaPath = "etht.beta";

/// Input side of the network.
std::size_t input_side(const RunConfig& cfg, Network net);

/// Backbone and head. Teacher and student draw from separate child streams
/// of init_seed.
model::ParamSet build_network(const RunConfig& cfg, Network net);
/// Student plus the training-only SAPE and ETHT parameters. SAPE has its own
/// stream, so the backbone and head match build_network exactly.
model::ParamSet build_distilled_student(const RunConfig& cfg);

struct Forward {
  ad::Tensor feature;
  simcc::AxisPair logits;
};
Forward forward(const model::ParamSet& params, const RunConfig& cfg, Network net,
                const ad::Tensor& images);

/// Teacher outputs for every sample of one split, in sample order.
struct TeacherCache {
  std::size_t count = 0;
  ad::Shape feature_shape;  // per sample
  std::size_t bins = 0;
  std::vector<double> feature;
  std::vector<double> logits_x;
  std::vector<double> logits_y;

  ad::Tensor feature_batch(std::span<const std::size_t> indices) const;
  simcc::AxisPair logits_batch(std::span<const std::size_t> indices,
                               std::size_t num_keypoints) const;
};
TeacherCache cache_teacher(const model::ParamSet& teacher, const RunConfig& cfg,
                           const std::vector<synth::SyntheticSample>& samples);

struct StepLosses {
  double total = 0.0;
  double ori = 0.0;
  double fea = 0.0;
  double logit = 0.0;
};

struct MetricRow {
  std::size_t epoch = 0;
  std::string split;
  double loss_total = 0.0;
  double loss_ori = 0.0;
  double loss_fea = 0.0;
  double loss_logit = 0.0;
  double tau = 0.0;
  double xi = 0.0;
  double pck = 0.0;
};
inline constexpr const char* kMetricsHeader =
    "epoch,split,loss_total,loss_ori,loss_fea,loss_logit,tau,xi,pck";
std::string format_metric_row(const MetricRow& row);

inline constexpr std::array<double, 3> kPckThresholds{0.05, 0.1, 0.2};

struct PckReport {
  std::vector<double> thresholds;
  std::vector<double> aggregate;                // per threshold
  std::vector<std::vector<double>> per_keypoint;  // [threshold][keypoint]
  double at(double threshold) const;
};

/// Uses only backbone and head parameters.
PckReport evaluate(const model::ParamSet& params, const RunConfig& cfg, Network net,
                   const std::vector<synth::SyntheticSample>& samples,
                   std::span<const double> thresholds = kPckThresholds);

using StepObserver =
    std::function<void(std::size_t epoch, std::size_t step, const StepLosses& losses)>;

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  StepObserver on_step;
  bool verbose = false;
};

struct TrainResult {
  std::vector<MetricRow> rows;
  model::ParamSet best;
  model::ParamSet last;
  std::size_t best_epochs = 0;  // completed epochs at the best checkpoint
  double best_val_pck = 0.0;
};

/// One network's optimization loop. Distillation is on when a teacher is
/// given and the network is a student.
class Trainer {
 public:
  Trainer(RunConfig cfg, const synth::Dataset& data, Network net,
          const model::ParamSet* teacher = nullptr);

  bool distilling() const { return distill_; }
  model::ParamSet& params() { return params_; }
  const model::ParamSet& params() const { return params_; }
  cca::EthtState& etht() { return etht_; }
  model::OptimState& optim() { return optim_; }
  const RunConfig& config() const { return cfg_; }

  double learning_rate(std::size_t epoch) const;
  /// Current loss weights (learned ones when enabled).
  cca::LossWeights loss_weights() const;

  /// One descent step on backbone, head and SAPE plus the reversed ascent
  /// step on tau over the given training samples.
  StepLosses step(std::span<const std::size_t> indices, std::size_t epoch);

  /// Losses and PCK of the current parameters on a split, no update.
  MetricRow measure(const std::vector<synth::SyntheticSample>& samples,
                    const TeacherCache* cache, std::size_t epoch, const std::string& split);

  TrainResult fit(const TrainOptions& opts = {});

 private:
  struct BatchLosses {
    ad::Tensor total, ori, fea, logit;
    simcc::AxisPair logits;
  };
  BatchLosses batch_losses(const synth::Batch& batch, const TeacherCache* cache,
                           std::span<const std::size_t> indices, const ad::Tensor& tau,
                           const ad::Tensor& alpha, const ad::Tensor& beta);
  model::RoleSet descent_roles() const;

  RunConfig cfg_;
  const synth::Dataset* data_;
  Network net_;
  bool distill_ = false;
  model::ParamSet params_;
  cca::EthtState etht_;
  model::OptimState optim_;
  TeacherCache train_cache_;
  TeacherCache val_cache_;
  // Running PCK accumulators for the training split of the current epoch.
  double train_hits_ = 0.0;
  double train_total_ = 0.0;
};

/// Runs optim.teacher_epochs epochs.
TrainResult train_teacher(const RunConfig& cfg, const synth::Dataset& data,
                          const TrainOptions& opts = {});
TrainResult train_student(const RunConfig& cfg, const synth::Dataset& data,
                          const model::ParamSet* teacher, const TrainOptions& opts = {});

/// Builds the teacher from the config and restores its checkpoint.
model::ParamSet load_teacher(const RunConfig& cfg, const std::filesystem::path& path);

/// Writes the resolved config echo into the run directory.
void write_config_echo(const std::filesystem::path& out_dir, const RunConfig& cfg);

}  // namespace cdkd::harness
