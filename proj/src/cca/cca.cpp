#include <algorithm>
#include <cmath>
#include <numbers>

#include "cdkd/cca.hpp"
#include "cdkd/errors.hpp"

namespace cdkd::cca {

std::vector<double> merge_classes(std::span<const double> probs, std::size_t bins,
                                  std::size_t m) {
  if (m == 0 || bins == 0 || bins % m != 0) {
    throw ShapeError("merge_classes: bin count " + std::to_string(bins) +
                     " not divisible by m = " + std::to_string(m));
  }
  if (probs.size() % bins != 0) throw ShapeError("merge_classes: ragged rows");
  const std::size_t rows = probs.size() / bins;
  const std::size_t merged = bins / m;
  std::vector<double> out(rows * merged, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < merged; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double p = probs[r * bins + j * m + i];
        if (p < 0.0) throw NumericError("merge_classes: negative probability");
        acc += p;
      }
      out[r * merged + j] = acc;
    }
  }
  return out;
}

simcc::AxisDistribution merge_classes(const simcc::AxisDistribution& probs, std::size_t m) {
  if (probs.kind != simcc::DistKind::kProbabilities) {
    throw Error("merge_classes: input must be probabilities");
  }
  auto merged = merge_classes(probs.values.values(), probs.bins(), m);
  return {ad::Tensor::from({probs.batch(), probs.keypoints(), probs.bins() / m},
                           std::move(merged)),
          simcc::DistKind::kProbabilities};
}

ad::Tensor merge_classes(const ad::Tensor& probs, std::size_t m) {
  const std::size_t bins = probs.shape().back();
  if (m == 0 || bins % m != 0) {
    throw ShapeError("merge_classes: bin count " + std::to_string(bins) +
                     " not divisible by m = " + std::to_string(m));
  }
  if (m == 1) return probs;
  ad::Shape blocks(probs.shape().begin(), probs.shape().end() - 1);
  blocks.push_back(bins / m);
  blocks.push_back(m);
  return ad::sum_last_axis(ad::reshape(probs, blocks));
}

std::string_view schedule_name(Schedule s) {
  return s == Schedule::kLinear ? "linear" : "half-cosine";
}

std::optional<Schedule> parse_schedule(std::string_view name) {
  if (name == "linear") return Schedule::kLinear;
  if (name == "half-cosine") return Schedule::kHalfCosine;
  return std::nullopt;
}

double xi_schedule(Schedule schedule, std::size_t epoch, std::size_t max_epochs) {
  if (max_epochs == 0) throw Error("xi_schedule: T_max must be positive");
  if (epoch > max_epochs) throw Error("xi_schedule: epoch exceeds T_max");
  const double progress = static_cast<double>(epoch) / static_cast<double>(max_epochs);
  switch (schedule) {
    case Schedule::kLinear: return progress;
    case Schedule::kHalfCosine: return (1.0 - std::cos(std::numbers::pi * progress)) / 2.0;
  }
  return progress;
}

double xi_schedule(const EthtState& state) {
  return xi_schedule(state.schedule, state.epoch, state.max_epochs);
}

ad::Tensor logit_loss(const simcc::AxisDistribution& teacher,
                      const simcc::AxisDistribution& student, const ad::Tensor& tau,
                      std::size_t m, double tau_min, double tau_max) {
  return logit_loss(simcc::AxisPair{teacher, teacher}, simcc::AxisPair{student, student}, tau,
                    m, tau_min, tau_max);
}

ad::Tensor logit_loss(const simcc::AxisPair& teacher, const simcc::AxisPair& student,
                      const ad::Tensor& tau, std::size_t m, double tau_min, double tau_max) {
  if (tau.numel() != 1) throw ShapeError("logit_loss: tau must be a scalar");
  const double t = tau.item();
  if (t < tau_min || t > tau_max) {
    throw Error("logit_loss: tau " + std::to_string(t) + " outside [" + std::to_string(tau_min) +
                ", " + std::to_string(tau_max) + "]");
  }
  auto axis_rows = [&](const simcc::AxisDistribution& te, const simcc::AxisDistribution& st) {
    if (te.kind != simcc::DistKind::kLogits || st.kind != simcc::DistKind::kLogits) {
      throw Error("logit_loss: inputs must be logits");
    }
    if (te.batch() != st.batch() || te.keypoints() != st.keypoints() ||
        te.bins() != m * st.bins()) {
      throw ShapeError("logit_loss: teacher bins " + std::to_string(te.bins()) + " != m (" +
                       std::to_string(m) + ") x student bins " + std::to_string(st.bins()));
    }
    const ad::Tensor te_logits = te.values.requires_grad() ? te.values.detach() : te.values;
    const auto p_t = merge_classes(ad::softmax(te_logits, tau), m);
    const auto log_p_s = ad::log_softmax(st.values, tau);
    // KL(p_t || p_s) = sum p_t log p_t - sum p_t log p_s, per row.
    return ad::sub(ad::sum_last_axis(ad::xlogx(p_t)), ad::sum_last_axis(ad::mul(p_t, log_p_s)));
  };
  const auto kx = axis_rows(teacher.x, student.x);
  const auto ky = axis_rows(teacher.y, student.y);
  const auto kl_mean = ad::scale(ad::add(ad::sum(kx), ad::sum(ky)),
                                 1.0 / static_cast<double>(kx.numel() + ky.numel()));
  return ad::mul(kl_mean, ad::mul(tau, tau));
}

ad::Tensor total_loss(const ad::Tensor& task, const ad::Tensor& feature, const ad::Tensor& logit,
                      const LossWeights& w) {
  for (const auto* t : {&task, &feature, &logit}) {
    if (t->numel() != 1) throw ShapeError("total_loss: inputs must be scalars");
    if (!std::isfinite(t->item())) throw NumericError("total_loss: non-finite input");
  }
  if (w.alpha < 0.0 || w.beta < 0.0) throw Error("total_loss: weights must be nonnegative");
  return ad::add(ad::add(task, ad::scale(feature, w.alpha)), ad::scale(logit, w.beta));
}

ad::Tensor temperature_for_graph(const EthtState& state) {
  if (!state.learn_tau) return state.tau.detach();
  return ad::grad_reverse(state.tau, xi_schedule(state));
}

double etht_step(EthtState& state, double learning_rate) {
  if (!state.learn_tau) return state.tau.item();
  if (!state.tau.grad_touched()) throw TapeError("etht_step: tau is detached from the loss graph");
  auto v = state.tau.mutable_values();
  v[0] = std::clamp(v[0] - learning_rate * state.tau.grad()[0], state.tau_min, state.tau_max);
  return v[0];
}

}  // namespace cdkd::cca
