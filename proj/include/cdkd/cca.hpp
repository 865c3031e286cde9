#pragma once

// Cross-class alignment, logit distillation, loss composition and the
// easy-to-hard temperature schedule.

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cdkd/autodiff.hpp"
#include "cdkd/simcc.hpp"

namespace cdkd::cca {

/// Sums every m adjacent bins of each row: out[r, j] = sum_{i < m} p[r, j*m + i].
std::vector<double> merge_classes(std::span<const double> probs, std::size_t bins,
                                  std::size_t m);
simcc::AxisDistribution merge_classes(const simcc::AxisDistribution& probs, std::size_t m);
/// Differentiable variant on [..., bins] tensors; no sign check.
ad::Tensor merge_classes(const ad::Tensor& probs, std::size_t m);

struct LossWeights {
  double alpha = 1.0;  // feature loss
  double beta = 1.0;   // logit loss
};

enum class Schedule { kLinear, kHalfCosine };

std::string_view schedule_name(Schedule s);
std::optional<Schedule> parse_schedule(std::string_view name);

/// Learnable temperature and its curriculum.
struct EthtState {
  ad::Tensor tau = ad::Tensor::scalar(1.0, true);
  double tau_min = 0.5;
  double tau_max = 10.0;
  Schedule schedule = Schedule::kLinear;
  std::size_t epoch = 0;       // T_i
  std::size_t max_epochs = 1;  // T_max
  bool learn_tau = true;
};

double xi_schedule(Schedule schedule, std::size_t epoch, std::size_t max_epochs);
double xi_schedule(const EthtState& state);

/// tau^2 * mean over rows of KL(merge(softmax(teacher / tau)) || softmax(student / tau)).
/// `tau` is a scalar tensor; the teacher logits never receive a gradient.
ad::Tensor logit_loss(const simcc::AxisDistribution& teacher,
                      const simcc::AxisDistribution& student, const ad::Tensor& tau,
                      std::size_t m, double tau_min = 0.5, double tau_max = 10.0);

/// Both axes; the mean is taken over batch, keypoints and the two axes.
ad::Tensor logit_loss(const simcc::AxisPair& teacher, const simcc::AxisPair& student,
                      const ad::Tensor& tau, std::size_t m, double tau_min = 0.5,
                      double tau_max = 10.0);

/// L_ori + alpha * L_fea + beta * L_logit.
ad::Tensor total_loss(const ad::Tensor& task, const ad::Tensor& feature, const ad::Tensor& logit,
                      const LossWeights& w);

/// Temperature as it enters the loss graph: the learnable tau behind a
/// gradient reversal scaled by xi, so one backward pass yields descent for
/// the student and xi-scaled ascent for tau. A detached constant when tau
/// is not learned.
ad::Tensor temperature_for_graph(const EthtState& state);

/// Applies tau <- clamp(tau - lr * grad(tau)); with the reversed graph this
/// is tau + lr * xi * dL/dtau. Returns the new tau.
double etht_step(EthtState& state, double learning_rate);

}  // namespace cdkd::cca
