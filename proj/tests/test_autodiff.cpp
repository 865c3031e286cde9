#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "cdkd/autodiff.hpp"
#include "cdkd/errors.hpp"
#include "cdkd/rng.hpp"

using namespace cdkd;
using ad::Tensor;

namespace {

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

Tensor random_tensor(ad::Shape shape, std::uint64_t seed, bool grad = true) {
  Rng rng(seed);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST(Primitives, ReluExample) {
  const auto y = ad::relu(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(to_vec(y.values()), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Primitives, IdentityConvolutionKeepsInput) {
  const auto x = random_tensor({2, 1, 5, 5}, 3, false);
  const auto w = Tensor::from({1, 1, 1, 1}, {1.0});
  const auto y = ad::conv2d(x, w, 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(to_vec(y.values()), to_vec(x.values()));
}

TEST(Primitives, TemperatureSoftmaxOfEqualLogitsIsUniform) {
  const auto y = ad::softmax(Tensor::from({4}, {1.0, 1.0, 1.0, 1.0}), 3.0);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Primitives, SoftmaxRowsSumToOneAcrossTemperatures) {
  const auto x = random_tensor({6, 11}, 9, false);
  for (double tau : {0.5, 1.0, 2.5, 10.0}) {
    const auto y = ad::softmax(ad::scale(x, 20.0), tau);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 11; ++j) s += y.at(r * 11 + j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Primitives, NonPositiveTemperatureRejected) {
  const auto x = random_tensor({2, 3}, 1, false);
  EXPECT_THROW(ad::softmax(x, 0.0), NumericError);
  EXPECT_THROW(ad::log_softmax(x, -1.0), NumericError);
  EXPECT_THROW(ad::softmax(x, Tensor::scalar(-0.5)), NumericError);
}

TEST(Primitives, ShapeMismatchRejected) {
  EXPECT_THROW(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(ad::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(ad::bias_add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(ad::reshape(Tensor::zeros({2, 3}), {4}), ShapeError);
  EXPECT_THROW(Tensor::from({2}, {1.0}), ShapeError);
}

TEST(Primitives, NonFiniteForwardRaises) {
  const auto big = Tensor::from({2}, {1e300, 1.0});
  EXPECT_THROW(ad::scale(big, 1e10), NumericError);
  EXPECT_THROW(ad::log(Tensor::from({1}, {0.0})), NumericError);
  EXPECT_THROW(Tensor::from({1}, {std::numeric_limits<double>::quiet_NaN()}), NumericError);
}

TEST(Primitives, ConvStrideAndPaddingShapes) {
  const auto x = random_tensor({1, 2, 8, 8}, 2, false);
  const auto w = random_tensor({3, 2, 3, 3}, 4, false);
  EXPECT_EQ(ad::conv2d(x, w).shape(), (ad::Shape{1, 3, 8, 8}));
  EXPECT_EQ(ad::conv2d(x, w, 2, 1).shape(), (ad::Shape{1, 3, 4, 4}));
  EXPECT_EQ(ad::conv2d(x, w, 1, 0).shape(), (ad::Shape{1, 3, 6, 6}));
}

TEST(Backprop, SumGivesOnes) {
  auto x = Tensor::from({3}, {0.3, -2.0, 5.0}, true);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ad::backprop(ad::sum(x));
  EXPECT_EQ(to_vec(x.grad()), (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Backprop, MeanOfSquaresMatchesCentralDifferences) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ad::backprop(ad::mean(ad::mul(x, x)));
  }
  // Independent oracle: f(x) = (x0^2 + x1^2) / 2 differenced by hand.
  const double h = 1e-5;
  auto f = [](double a, double b) { return (a * a + b * b) / 2.0; };
  const double d0 = (f(1.0 + h, 2.0) - f(1.0 - h, 2.0)) / (2 * h);
  const double d1 = (f(1.0, 2.0 + h) - f(1.0, 2.0 - h)) / (2 * h);
  EXPECT_NEAR(x.grad()[0], d0, 1e-9);
  EXPECT_NEAR(x.grad()[1], d1, 1e-9);
  EXPECT_NEAR(x.grad()[0], 1.0, 1e-12);
  EXPECT_NEAR(x.grad()[1], 2.0, 1e-12);
}

TEST(Backprop, GradientsAccumulateAcrossCalls) {
  auto x = Tensor::from({2}, {1.5, -0.5}, true);
  {
    ad::Tape t1;
    ad::TapeScope s1(t1);
    ad::backprop(ad::sum(ad::mul(x, x)));  // 2x
  }
  {
    ad::Tape t2;
    ad::TapeScope s2(t2);
    ad::backprop(ad::sum(ad::scale(x, 3.0)));  // 3
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1.5 + 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2 * -0.5 + 3.0);
  x.zero_grad();
  EXPECT_EQ(to_vec(x.grad()), (std::vector<double>{0.0, 0.0}));
  EXPECT_FALSE(x.grad_touched());
}

TEST(Backprop, GradIsZeroOnCreation) {
  const auto x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  EXPECT_EQ(to_vec(x.grad()), (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(Backprop, ConsumedTapeRejected) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  const auto loss = ad::sum(ad::mul(x, x));
  ad::backprop(loss);
  EXPECT_THROW(ad::backprop(loss), TapeError);
}

TEST(Backprop, NonScalarLossRejected) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  EXPECT_THROW(ad::backprop(ad::scale(x, 2.0)), TapeError);
}

TEST(Backprop, NoTapeNoRecords) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  const auto y = ad::scale(x, 2.0);
  EXPECT_TRUE(y.is_leaf());
  ad::Tape tape;
  ad::TapeScope scope(tape);
  const auto c = Tensor::from({2}, {1.0, 2.0});
  (void)ad::scale(c, 2.0);
  EXPECT_EQ(tape.size(), 0u);
  (void)ad::scale(x, 2.0);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Backprop, RecordsAreTopological) {
  auto x = random_tensor({3, 4}, 5);
  auto w = random_tensor({4, 2}, 6);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  const auto loss = ad::mean(ad::relu(ad::matmul(x, w)));
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& in : tape.record(i).inputs) {
      if (in->tape_id == tape.id()) {
        EXPECT_LT(in->record, static_cast<std::int64_t>(i));
      }
    }
    EXPECT_EQ(tape.record(i).output->record, static_cast<std::int64_t>(i));
  }
  ad::backprop(loss);
  for (std::size_t i = 0; i < tape.size(); ++i) EXPECT_TRUE(tape.record(i).consumed);
}

TEST(Backprop, ReplayIsBitIdentical) {
  auto run = [] {
    auto x = random_tensor({4, 6}, 11);
    auto w = random_tensor({6, 3}, 12);
    ad::Tape tape;
    ad::TapeScope scope(tape);
    const auto y = ad::log_softmax(ad::matmul(x, w), 1.7);
    ad::backprop(ad::mean(ad::mul(y, y)));
    auto out = to_vec(y.values());
    const auto gx = to_vec(x.grad()), gw = to_vec(w.grad());
    out.insert(out.end(), gx.begin(), gx.end());
    out.insert(out.end(), gw.begin(), gw.end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradReverse, ForwardIsIdentity) {
  const auto x = Tensor::from({2}, {3.0, -1.0}, true);
  const auto y = ad::grad_reverse(x, 0.7);
  EXPECT_EQ(to_vec(y.values()), (std::vector<double>{3.0, -1.0}));
}

TEST(GradReverse, BackwardNegatesAndScales) {
  struct Case {
    std::vector<double> upstream;
    double scale;
    std::vector<double> expected;
  };
  for (const auto& c : {Case{{1.0, 1.0}, 1.0, {-1.0, -1.0}}, Case{{2.0, 4.0}, 0.5, {-1.0, -2.0}}}) {
    auto x = Tensor::from({2}, {3.0, -1.0}, true);
    const auto up = Tensor::from({2}, c.upstream);
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ad::backprop(ad::sum(ad::mul(ad::grad_reverse(x, c.scale), up)));
    EXPECT_EQ(to_vec(x.grad()), c.expected);
  }
}

TEST(GradReverse, NegativeScaleRejected) {
  EXPECT_THROW(ad::grad_reverse(Tensor::from({1}, {1.0}, true), -0.1), Error);
}

TEST(FiniteDiff, LinearFunctionIsExact) {
  auto x = random_tensor({5, 3}, 21);
  EXPECT_LT(ad::finite_diff_check([](const Tensor& t) { return ad::sum(t); }, x), 1e-9);
}

TEST(FiniteDiff, NonlinearPipelinePasses) {
  auto x = random_tensor({3, 7}, 0);
  const auto target = random_tensor({3, 7}, 1, false);
  const double err = ad::finite_diff_check(
      [&](const Tensor& t) {
        return ad::mean(ad::mul(ad::log_softmax(t, 1.3), ad::softmax(target, 1.3)));
      },
      x);
  EXPECT_LT(err, 1e-4);
}

TEST(FiniteDiff, BadArgumentsRejected) {
  auto x = random_tensor({2}, 0);
  EXPECT_THROW(ad::finite_diff_check([](const Tensor& t) { return ad::sum(t); }, x, 0.0), Error);
  auto y = Tensor::from({1}, {1e-6}, true);
  EXPECT_THROW(
      ad::finite_diff_check([](const Tensor& t) { return ad::sum(ad::log(t)); }, y, 1e-3),
      NumericError);
}
