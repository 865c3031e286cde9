#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "cdkd/cca.hpp"
#include "cdkd/errors.hpp"

using namespace cdkd;
using namespace cdkd::cca;
using ad::Tensor;
using simcc::AxisDistribution;
using simcc::AxisPair;
using simcc::DistKind;

namespace {

std::vector<double> random_probs(std::size_t rows, std::size_t bins, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(rows * bins);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < bins; ++i) s += v[r * bins + i] = rng.uniform(0.0, 1.0);
    for (std::size_t i = 0; i < bins; ++i) v[r * bins + i] /= s;
  }
  return v;
}

AxisDistribution logits(ad::Shape shape, std::uint64_t seed, double spread = 3.0) {
  Rng rng(seed);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = spread * rng.normal();
  return {Tensor::from(std::move(shape), std::move(v)), DistKind::kLogits};
}

AxisDistribution log_of(std::vector<double> p, std::size_t bins) {
  for (auto& x : p) x = std::log(x);
  return {Tensor::from({1, 1, bins}, std::move(p)), DistKind::kLogits};
}

// Plain-loop KL with merging, used as the reference for the tensor path.
double oracle_logit_loss(const AxisDistribution& t, const AxisDistribution& s, double tau,
                         std::size_t m) {
  const std::size_t bt = t.bins(), bs = s.bins(), rows = t.values.numel() / bt;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mt = -1e300, ms = -1e300;
    for (std::size_t i = 0; i < bt; ++i) mt = std::max(mt, t.values.at(r * bt + i) / tau);
    for (std::size_t i = 0; i < bs; ++i) ms = std::max(ms, s.values.at(r * bs + i) / tau);
    double zt = 0.0, zs = 0.0;
    for (std::size_t i = 0; i < bt; ++i) zt += std::exp(t.values.at(r * bt + i) / tau - mt);
    for (std::size_t i = 0; i < bs; ++i) zs += std::exp(s.values.at(r * bs + i) / tau - ms);
    for (std::size_t j = 0; j < bs; ++j) {
      double pt = 0.0;
      for (std::size_t i = 0; i < m; ++i) pt += std::exp(t.values.at(r * bt + j * m + i) / tau - mt) / zt;
      const double ps = std::exp(s.values.at(r * bs + j) / tau - ms) / zs;
      if (pt > 0.0) total += pt * std::log(pt / ps);
    }
  }
  return tau * tau * total / static_cast<double>(rows);
}

}  // namespace

TEST(Merge, Examples) {
  EXPECT_EQ(merge_classes(std::vector<double>{0.1, 0.2, 0.3, 0.4}, 4, 2),
            (std::vector<double>{0.1 + 0.2, 0.3 + 0.4}));
  EXPECT_EQ(merge_classes(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 4, 4),
            (std::vector<double>{1.0}));
  const std::vector<double> p{0.1, 0.9};
  EXPECT_EQ(merge_classes(p, 2, 1), p);
}

TEST(Merge, Errors) {
  EXPECT_THROW(merge_classes(std::vector<double>(6, 1.0 / 6), 6, 4), ShapeError);
  EXPECT_THROW(merge_classes(std::vector<double>{0.5, -0.1, 0.3, 0.3}, 4, 2), NumericError);
  EXPECT_THROW(merge_classes(std::vector<double>(5, 0.2), 4, 2), ShapeError);
  EXPECT_THROW(merge_classes(std::vector<double>(4, 0.25), 4, 0), ShapeError);
}

TEST(Merge, MassConservedAtLargeBinCounts) {
  const auto p = random_probs(3, 4096, 1);
  for (std::size_t m : {2u, 4u, 8u, 64u}) {
    const auto q = merge_classes(p, 4096, m);
    ASSERT_EQ(q.size(), 3 * 4096 / m);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4096 / m; ++j) s += q[r * (4096 / m) + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Merge, RowsAreIndependentAndComposable) {
  const auto p = random_probs(5, 64, 2);
  const auto batched = merge_classes(p, 64, 4);
  for (std::size_t r = 0; r < 5; ++r) {
    const auto one =
        merge_classes(std::span<const double>(p).subspan(r * 64, 64), 64, 4);
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(batched[r * 16 + j], one[j]);
  }
  const auto twice = merge_classes(merge_classes(p, 64, 2), 32, 4);
  const auto once = merge_classes(p, 64, 8);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-15);
}

TEST(Merge, TensorAndDistributionVariantsAgree) {
  const auto p = random_probs(6, 32, 3);
  const AxisDistribution d{Tensor::from({2, 3, 32}, p), DistKind::kProbabilities};
  const auto md = merge_classes(d, 4);
  const auto mt = merge_classes(d.values, 4);
  const auto mv = merge_classes(p, 32, 4);
  ASSERT_EQ(md.values.shape(), (ad::Shape{2, 3, 8}));
  for (std::size_t i = 0; i < mv.size(); ++i) {
    EXPECT_NEAR(md.values.at(i), mv[i], 1e-15);
    EXPECT_NEAR(mt.at(i), mv[i], 1e-15);
  }
  EXPECT_THROW(merge_classes(AxisDistribution{d.values, DistKind::kLogits}, 4), Error);
}

TEST(LogitLoss, Examples) {
  const auto tau = Tensor::scalar(1.0);
  const auto s = logits({2, 3, 16}, 4);
  EXPECT_NEAR(logit_loss(s, s, tau, 1).item(), 0.0, 1e-12);

  const auto t = log_of({0.4, 0.4, 0.1, 0.1}, 4);
  const auto st = log_of({0.5, 0.5}, 2);
  const double expect = 0.8 * std::log(0.8 / 0.5) + 0.2 * std::log(0.2 / 0.5);
  EXPECT_NEAR(logit_loss(t, st, tau, 2).item(), expect, 1e-12);
  EXPECT_NEAR(logit_loss(t, st, tau, 2).item(), 0.19274, 1e-5);
}

TEST(LogitLoss, MatchesLoopOracleAcrossTemperatures) {
  const auto t = logits({2, 5, 128}, 5), s = logits({2, 5, 32}, 6);
  for (double tau : {0.5, 1.0, 2.7, 10.0}) {
    const double got = logit_loss(t, s, Tensor::scalar(tau), 4).item();
    EXPECT_NEAR(got, oracle_logit_loss(t, s, tau, 4), 1e-10 * std::max(1.0, got)) << tau;
    EXPECT_GE(got, 0.0);
  }
}

TEST(LogitLoss, UnitScaleEqualsPlainKd) {
  const auto t = logits({3, 5, 32}, 7), s = logits({3, 5, 32}, 8);
  EXPECT_NEAR(logit_loss(t, s, Tensor::scalar(2.0), 1).item(), oracle_logit_loss(t, s, 2.0, 1),
              1e-10);
}

TEST(LogitLoss, ErrorsAndTeacherDetached) {
  const auto t = logits({1, 2, 32}, 9), s = logits({1, 2, 8}, 10);
  EXPECT_THROW(logit_loss(t, s, Tensor::scalar(0.4), 4), Error);
  EXPECT_THROW(logit_loss(t, s, Tensor::scalar(10.5), 4), Error);
  EXPECT_THROW(logit_loss(t, s, Tensor::scalar(1.0), 2), ShapeError);
  EXPECT_THROW(logit_loss(t, s, Tensor::zeros({2}), 4), ShapeError);
  const AxisDistribution probs{Tensor::full({1, 2, 8}, 0.125), DistKind::kProbabilities};
  EXPECT_THROW(logit_loss(t, probs, Tensor::scalar(1.0), 4), Error);

  AxisDistribution tg{Tensor::from(t.values.shape(),
                                   {t.values.values().begin(), t.values.values().end()}, true),
                      DistKind::kLogits};
  AxisDistribution sg{Tensor::from(s.values.shape(),
                                   {s.values.values().begin(), s.values.values().end()}, true),
                      DistKind::kLogits};
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ad::backprop(logit_loss(tg, sg, Tensor::scalar(1.5), 4));
  for (double g : tg.values.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : sg.values.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(LogitLoss, FiniteDifferencesInStudentAndTemperature) {
  const auto t = logits({1, 3, 16}, 11);
  auto s = Tensor::from({1, 3, 8}, [] {
    Rng rng(12);
    std::vector<double> v(24);
    for (auto& x : v) x = rng.normal();
    return v;
  }(), true);
  EXPECT_LT(ad::finite_diff_check(
                [&](const Tensor& x) {
                  return logit_loss(t, AxisDistribution{x, DistKind::kLogits},
                                    Tensor::scalar(1.7), 2);
                },
                s),
            1e-4);
  auto tau = Tensor::scalar(2.3, true);
  const auto sd = logits({1, 3, 8}, 13);
  EXPECT_LT(ad::finite_diff_check([&](const Tensor& x) { return logit_loss(t, sd, x, 2); }, tau),
            1e-4);
}

TEST(TotalLoss, Composition) {
  const auto task = Tensor::scalar(1.0), fea = Tensor::scalar(0.5), lg = Tensor::scalar(0.4);
  EXPECT_NEAR(total_loss(task, fea, lg, {1.0, 1.0}).item(), 1.9, 1e-15);
  EXPECT_EQ(total_loss(task, fea, lg, {0.0, 0.0}).item(), 1.0);
  EXPECT_THROW(total_loss(task, fea, lg, {-1.0, 0.0}), Error);
  EXPECT_THROW(total_loss(Tensor::zeros({2}), fea, lg, {}), ShapeError);
}

TEST(TotalLoss, FeatureWeightIsThePartialDerivative) {
  const LossWeights w{0.7, 1.3};
  const double h = 1e-6;
  auto f = [&](double fea) {
    return total_loss(Tensor::scalar(1.0), Tensor::scalar(fea), Tensor::scalar(0.4), w).item();
  };
  EXPECT_NEAR((f(0.5 + h) - f(0.5 - h)) / (2 * h), 0.7, 1e-8);
  auto fea = Tensor::scalar(0.5, true), lg = Tensor::scalar(0.4, true);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ad::backprop(total_loss(Tensor::scalar(1.0), fea, lg, w));
  EXPECT_DOUBLE_EQ(fea.grad()[0], 0.7);
  EXPECT_DOUBLE_EQ(lg.grad()[0], 1.3);
}

TEST(Xi, Examples) {
  EXPECT_EQ(xi_schedule(Schedule::kLinear, 0, 10), 0.0);
  EXPECT_DOUBLE_EQ(xi_schedule(Schedule::kLinear, 5, 10), 0.5);
  EXPECT_EQ(xi_schedule(Schedule::kLinear, 10, 10), 1.0);
  EXPECT_NEAR(xi_schedule(Schedule::kHalfCosine, 5, 10), 0.5, 1e-15);
  EXPECT_NEAR(xi_schedule(Schedule::kHalfCosine, 10, 10), 1.0, 1e-15);
  EXPECT_NEAR(xi_schedule(Schedule::kHalfCosine, 1, 3),
              (1.0 - std::cos(std::numbers::pi / 3.0)) / 2.0, 1e-15);
  EXPECT_THROW(xi_schedule(Schedule::kLinear, 0, 0), Error);
  EXPECT_THROW(xi_schedule(Schedule::kLinear, 11, 10), Error);
  EXPECT_EQ(parse_schedule("half-cosine"), Schedule::kHalfCosine);
  EXPECT_EQ(schedule_name(Schedule::kLinear), "linear");
  EXPECT_FALSE(parse_schedule("cosine").has_value());
}

TEST(Xi, Monotone) {
  for (auto s : {Schedule::kLinear, Schedule::kHalfCosine}) {
    double prev = -1.0;
    for (std::size_t e = 0; e <= 30; ++e) {
      const double v = xi_schedule(s, e, 30);
      EXPECT_GE(v, prev);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      prev = v;
    }
  }
}

namespace {

// One ETHT step on a fixed problem; returns (tau before, tau after, dL/dtau by differences).
struct StepResult {
  double before, after, dldtau;
};

StepResult run_step(std::size_t epoch, std::size_t max_epochs, double tau0, double lr) {
  const auto t = logits({2, 5, 64}, 14), s = logits({2, 5, 16}, 15);
  EthtState st;
  st.tau = Tensor::scalar(tau0, true);
  st.epoch = epoch;
  st.max_epochs = max_epochs;
  {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ad::backprop(logit_loss(t, s, temperature_for_graph(st), 4));
  }
  const double h = 1e-6;
  const double d = (logit_loss(t, s, Tensor::scalar(tau0 + h), 4).item() -
                    logit_loss(t, s, Tensor::scalar(tau0 - h), 4).item()) /
                   (2 * h);
  const double after = etht_step(st, lr);
  EXPECT_EQ(after, st.tau.item());
  return {tau0, after, d};
}

}  // namespace

TEST(Etht, ZeroXiLeavesTau) {
  const auto r = run_step(0, 10, 2.0, 0.1);
  EXPECT_EQ(r.after, r.before);
}

TEST(Etht, StepAscendsScaledByXi) {
  for (std::size_t e : {3u, 7u, 10u}) {
    const auto r = run_step(e, 10, 2.0, 0.05);
    const double xi = static_cast<double>(e) / 10.0;
    EXPECT_NEAR(r.after - r.before, 0.05 * xi * r.dldtau, 1e-7) << e;
    EXPECT_NE(r.after, r.before);
  }
}

TEST(Etht, ClampedToBounds) {
  const auto hi = run_step(10, 10, 9.99, 1e6);
  const auto lo = run_step(10, 10, 0.51, 1e6);
  for (const auto* r : {&hi, &lo}) {
    EXPECT_GE(r->after, 0.5);
    EXPECT_LE(r->after, 10.0);
  }
  EXPECT_TRUE(hi.after == 0.5 || hi.after == 10.0);
}

TEST(Etht, DetachedTauRejectedAndFixedTauIgnored) {
  EthtState st;
  st.max_epochs = 4;
  EXPECT_THROW(etht_step(st, 0.1), TapeError);
  st.learn_tau = false;
  st.tau = Tensor::scalar(3.0, true);
  EXPECT_EQ(etht_step(st, 0.1), 3.0);
  EXPECT_FALSE(temperature_for_graph(st).requires_grad());
}
