#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cdkd/errors.hpp"
#include "cdkd/simcc.hpp"

using namespace cdkd;
using namespace cdkd::simcc;

namespace {

AxisPair one_hot_logits(std::size_t bins, std::size_t bin_x, std::size_t bin_y) {
  std::vector<double> x(bins, 0.0), y(bins, 0.0);
  x[bin_x] = 10.0;
  y[bin_y] = 10.0;
  return {{ad::Tensor::from({1, 1, bins}, x), DistKind::kLogits},
          {ad::Tensor::from({1, 1, bins}, y), DistKind::kLogits}};
}

KeypointSet single(double x, double y) {
  KeypointSet k(1, 1);
  k.x(0, 0) = x;
  k.y(0, 0) = y;
  return k;
}

}  // namespace

TEST(Head, BinCountsScaleWithResolution) {
  SimccConfig cfg;
  EXPECT_EQ(cfg.bins(16), 32u);
  EXPECT_EQ(cfg.bins(64), 128u);
  EXPECT_EQ(cfg.bins(64) / cfg.bins(16), 4u);
  cfg.split_factor = 0.1;
  EXPECT_THROW(cfg.bins(8), ShapeError);
}

TEST(Head, ZeroFeatureGivesUniformAndShape) {
  SimccConfig cfg;
  model::ParamSet p;
  Rng rng(0);
  init_head(p, 32 * 4 * 4, cfg, 16, rng);
  const auto out = head_forward(p, ad::Tensor::zeros({7, 32, 4, 4}), cfg, 16);
  EXPECT_EQ(out.x.values.shape(), (ad::Shape{7, 5, 32}));
  EXPECT_EQ(out.y.values.shape(), (ad::Shape{7, 5, 32}));
  const auto probs = ad::softmax(out.x.values, 1.0);
  for (double v : probs.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 32.0);
}

TEST(Encode, TinySigmaIsOneHotAtZero) {
  SimccConfig cfg;
  cfg.label_sigma = 1e-6;
  const auto t = encode_labels(single(0.0, 0.0), cfg, 16);
  EXPECT_EQ(t.x.values.at(0), 1.0);
  for (std::size_t i = 1; i < 32; ++i) EXPECT_EQ(t.x.values.at(i), 0.0);
}

TEST(Encode, RowsSumToOne) {
  SimccConfig cfg;
  Rng rng(5);
  KeypointSet k(4, 5);
  for (auto& c : k.coords) c = rng.uniform(0.0, 15.999);
  const auto t = encode_labels(k, cfg, 16);
  for (const auto* axis : {&t.x, &t.y}) {
    for (std::size_t r = 0; r < 20; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < 32; ++i) s += axis->values.at(r * 32 + i);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Encode, GaussianMatchesDirectEvaluation) {
  // Labels are centered at x*k - 0.5, so bin 16 is the peak for x = 8.25.
  SimccConfig cfg;
  const auto t = encode_labels(single(8.25, 8.25), cfg, 16);
  std::vector<double> expect(32);
  double z = 0.0;
  for (int i = 0; i < 32; ++i) z += expect[i] = std::exp(-(i - 16.0) * (i - 16.0) / 8.0);
  std::size_t argmax = 0;
  for (std::size_t i = 0; i < 32; ++i) {
    EXPECT_NEAR(t.x.values.at(i), expect[i] / z, 1e-15);
    if (t.x.values.at(i) > t.x.values.at(argmax)) argmax = i;
  }
  EXPECT_EQ(argmax, 16u);
}

TEST(Encode, OutOfRangeRejected) {
  SimccConfig cfg;
  EXPECT_THROW(encode_labels(single(16.0, 1.0), cfg, 16), DataError);
  EXPECT_THROW(encode_labels(single(-0.1, 1.0), cfg, 16), DataError);
}

TEST(TaskLoss, Examples) {
  SimccConfig cfg;
  const auto target = encode_labels(single(3.3, 9.1), cfg, 16);
  // Logits equal to log target make softmax reproduce it.
  auto as_logits = [](const AxisDistribution& d) {
    std::vector<double> v(d.values.values().begin(), d.values.values().end());
    for (auto& x : v) x = std::log(x);
    return AxisDistribution{ad::Tensor::from(d.values.shape(), v), DistKind::kLogits};
  };
  const AxisPair pred{as_logits(target.x), as_logits(target.y)};
  EXPECT_NEAR(task_loss(pred, target).item(), 0.0, 1e-12);

  const AxisPair flat{{ad::Tensor::zeros({1, 1, 32}), DistKind::kLogits},
                      {ad::Tensor::zeros({1, 1, 32}), DistKind::kLogits}};
  const AxisPair uniform{{ad::Tensor::full({1, 1, 32}, 1.0 / 32), DistKind::kProbabilities},
                         {ad::Tensor::full({1, 1, 32}, 1.0 / 32), DistKind::kProbabilities}};
  EXPECT_NEAR(task_loss(flat, uniform).item(), 0.0, 1e-12);

  std::vector<double> hot(32, 0.0);
  hot[11] = 1.0;
  const AxisPair onehot{{ad::Tensor::from({1, 1, 32}, hot), DistKind::kProbabilities},
                        {ad::Tensor::from({1, 1, 32}, hot), DistKind::kProbabilities}};
  EXPECT_NEAR(task_loss(flat, onehot).item(), 3.4657359027997265, 1e-12);
  EXPECT_NEAR(task_loss(flat, onehot).item(), std::log(32.0), 1e-12);
}

TEST(TaskLoss, NonNegativeAndMaskedAndChecked) {
  SimccConfig cfg;
  Rng rng(1);
  KeypointSet k(3, 5);
  for (auto& c : k.coords) c = rng.uniform(0.0, 15.9);
  const auto target = encode_labels(k, cfg, 16);
  std::vector<double> lx(3 * 5 * 32), ly(3 * 5 * 32);
  for (auto& v : lx) v = rng.normal();
  for (auto& v : ly) v = rng.normal();
  const AxisPair pred{{ad::Tensor::from({3, 5, 32}, lx), DistKind::kLogits},
                      {ad::Tensor::from({3, 5, 32}, ly), DistKind::kLogits}};
  EXPECT_GT(task_loss(pred, target).item(), 0.0);
  std::vector<std::uint8_t> none(15, 0);
  EXPECT_THROW(task_loss(pred, target, none), DataError);
  EXPECT_THROW(task_loss(target, target), Error);
  const auto other = encode_labels(single(1.0, 1.0), cfg, 8);
  EXPECT_THROW(task_loss(one_hot_logits(32, 0, 0), other), ShapeError);
}

TEST(Decode, Examples) {
  SimccConfig cfg;
  const auto k = decode(one_hot_logits(32, 7, 7), cfg);
  EXPECT_DOUBLE_EQ(k.x(0, 0), 3.75);
  std::vector<double> tie(32, 0.0);
  tie[3] = tie[9] = 5.0;
  const AxisPair p{{ad::Tensor::from({1, 1, 32}, tie), DistKind::kLogits},
                   {ad::Tensor::from({1, 1, 32}, tie), DistKind::kLogits}};
  EXPECT_DOUBLE_EQ(decode(p, cfg).x(0, 0), 3.5 / 2.0);
}

TEST(Decode, BinCentersRoundTrip) {
  SimccConfig cfg;
  cfg.label_sigma = 1e-6;
  for (std::size_t b = 0; b < 32; ++b) {
    const double x = (static_cast<double>(b) + 0.5) / 2.0;
    const auto t = encode_labels(single(x, x), cfg, 16);
    const AxisPair logits{{ad::log(ad::shift(t.x.values, 1e-300)), DistKind::kLogits},
                          {ad::log(ad::shift(t.y.values, 1e-300)), DistKind::kLogits}};
    const auto k = decode(logits, cfg);
    EXPECT_LE(std::abs(k.x(0, 0) - x), 0.25);
    EXPECT_LE(std::abs(k.y(0, 0) - x), 0.25);
  }
}

TEST(Decode, GridSweepErrorWithinHalfBin) {
  SimccConfig cfg;
  for (int step = 0; step < 1600; ++step) {
    const double x = step * 0.01, y = (1599 - step) * 0.01;
    const auto t = encode_labels(single(x, y), cfg, 16);
    const AxisPair logits{{ad::log(ad::shift(t.x.values, 1e-300)), DistKind::kLogits},
                          {ad::log(ad::shift(t.y.values, 1e-300)), DistKind::kLogits}};
    const auto k = decode(logits, cfg);
    EXPECT_LE(std::abs(k.x(0, 0) - x), 0.25 + 1e-12) << x;
    EXPECT_LE(std::abs(k.y(0, 0) - y), 0.25 + 1e-12) << y;
  }
}

TEST(Pck, Examples) {
  KeypointSet gt(2, 2);
  Rng rng(2);
  for (auto& c : gt.coords) c = rng.uniform(0.0, 16.0);
  EXPECT_EQ(pck(gt, gt, 0.1, 16), 1.0);
  KeypointSet far = gt;
  for (std::size_t i = 0; i < far.coords.size(); i += 2) far.coords[i] += 16.0;
  EXPECT_EQ(pck(far, gt, 0.1, 16), 0.0);
}

TEST(Pck, HalfWithinThresholdByCounting) {
  KeypointSet gt(2, 3), pred(2, 3);
  // Offsets in pixels against a 1.6 px threshold (0.1 x 16).
  const double offsets[6] = {0.0, 1.0, 1.59, 1.61, 3.0, 10.0};
  std::size_t inside = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    gt.coords[2 * i] = 5.0;
    gt.coords[2 * i + 1] = 5.0;
    pred.coords[2 * i] = 5.0 + offsets[i] * 0.6;
    pred.coords[2 * i + 1] = 5.0 + offsets[i] * 0.8;
    if (offsets[i] < 1.6) ++inside;
  }
  EXPECT_EQ(inside, 3u);
  EXPECT_DOUBLE_EQ(pck(pred, gt, 0.1, 16), 0.5);
}

TEST(Pck, MonotoneInThresholdAndVisibility) {
  KeypointSet gt(4, 5), pred(4, 5);
  Rng rng(8);
  for (std::size_t i = 0; i < gt.coords.size(); ++i) {
    gt.coords[i] = rng.uniform(0.0, 16.0);
    pred.coords[i] = gt.coords[i] + rng.normal();
  }
  double prev = 1.0;
  for (double t = 0.5; t > 0.001; t *= 0.8) {
    const double v = pck(pred, gt, t, 16);
    EXPECT_LE(v, prev);
    prev = v;
  }
  KeypointSet hidden = gt;
  std::fill(hidden.visible.begin(), hidden.visible.end(), 0);
  EXPECT_THROW(pck(pred, hidden, 0.1, 16), DataError);
  EXPECT_THROW(pck(pred, gt, 0.0, 16), Error);
}

TEST(Pck, PerKeypoint) {
  KeypointSet gt(2, 2), pred(2, 2);
  pred.x(0, 1) = 10.0;
  EXPECT_EQ(pck_keypoint(pred, gt, 0, 0.1, 16), 1.0);
  EXPECT_EQ(pck_keypoint(pred, gt, 1, 0.1, 16), 0.5);
}
