#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cdkd/errors.hpp"
#include "cdkd/sape.hpp"

using namespace cdkd;
using namespace cdkd::sape;
using ad::Tensor;

namespace {

Tensor random_tensor(ad::Shape shape, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

struct Fixture {
  SapeConfig cfg;
  FeatureShape shape{8, 4, 4};
  model::ParamSet params;
  Tensor feature;

  Fixture() {
    Rng rng(17);
    init_sape(params, cfg, shape, rng);
    // Nonzero biases so they are checked as well.
    Rng brng(18);
    for (auto& [path, e] : params.entries()) {
      if (path.ends_with(".bias")) {
        for (auto& v : params.get(path).mutable_values()) v = brng.uniform(-0.2, 0.2);
      }
    }
    feature = random_tensor({2, 8, 4, 4}, 19);
  }

  std::vector<double> w(const std::string& path) const {
    const auto s = params.get(path).values();
    return {s.begin(), s.end()};
  }
};

// Direct loops for the scale-adaptive unit: same-padded branch convolutions,
// spatial mean, dense fuse, per-projector select heads, softmax over K.
std::vector<double> oracle_sau(const Fixture& f) {
  const std::size_t b = 2, c = 8, s = 4, nk = f.cfg.kernels.size(), d = f.cfg.descriptor_dim;
  const std::size_t kp = f.cfg.num_projectors;
  const auto x = f.feature.values();
  std::vector<double> pooled(b * c * nk, 0.0);
  for (std::size_t br = 0; br < nk; ++br) {
    const std::size_t k = f.cfg.kernels[br];
    const long pad = static_cast<long>(k / 2);
    const auto w = f.w("sape.branch" + std::to_string(br) + ".weight");
    const auto bias = f.w("sape.branch" + std::to_string(br) + ".bias");
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t o = 0; o < c; ++o) {
        double mean = 0.0;
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) {
            double acc = bias[o];
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                  const long yi = static_cast<long>(i + u) - pad;
                  const long xj = static_cast<long>(j + v) - pad;
                  if (yi < 0 || xj < 0 || yi >= 4 || xj >= 4) continue;
                  acc += w[((o * c + ci) * k + u) * k + v] *
                         x[((n * c + ci) * s + static_cast<std::size_t>(yi)) * s +
                           static_cast<std::size_t>(xj)];
                }
            mean += acc;
          }
        pooled[n * c * nk + br * c + o] = mean / 16.0;
      }
  }
  const auto fw = f.w("sape.fuse.weight"), fb = f.w("sape.fuse.bias");
  std::vector<double> z(b * d);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = fb[j];
      for (std::size_t i = 0; i < c * nk; ++i) acc += pooled[n * c * nk + i] * fw[i * d + j];
      z[n * d + j] = acc;
    }
  std::vector<double> scores(b * kp * c);
  for (std::size_t k = 0; k < kp; ++k) {
    const auto sw = f.w("sape.select" + std::to_string(k) + ".weight");
    const auto sb = f.w("sape.select" + std::to_string(k) + ".bias");
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t o = 0; o < c; ++o) {
        double acc = sb[o];
        for (std::size_t j = 0; j < d; ++j) acc += z[n * d + j] * sw[j * c + o];
        scores[(n * kp + k) * c + o] = acc;
      }
  }
  std::vector<double> out(scores.size());
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t o = 0; o < c; ++o) {
      double mx = -1e300, zsum = 0.0;
      for (std::size_t k = 0; k < kp; ++k) mx = std::max(mx, scores[(n * kp + k) * c + o]);
      for (std::size_t k = 0; k < kp; ++k) zsum += std::exp(scores[(n * kp + k) * c + o] - mx);
      for (std::size_t k = 0; k < kp; ++k)
        out[(n * kp + k) * c + o] = std::exp(scores[(n * kp + k) * c + o] - mx) / zsum;
    }
  return out;
}

}  // namespace

TEST(Projector, IdentityWeightAtUnitScaleIsRelu) {
  model::ParamSet p;
  std::vector<double> eye(16 * 16, 0.0);
  for (std::size_t i = 0; i < 16; ++i) eye[i * 16 + i] = 1.0;
  p.add("sape.proj0.weight", model::Role::kSape, Tensor::from({16, 16}, eye));
  p.add("sape.proj0.bias", model::Role::kSape, Tensor::zeros({16}));
  const auto x = random_tensor({2, 3, 4, 4}, 1);
  const auto y = projector_forward(x, 0, p, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), std::max(0.0, x.at(i)));
}

TEST(Projector, ShapeContractAndDenseOracle) {
  Fixture f;
  const auto y = projector_forward(f.feature, 1, f.params, 4);
  ASSERT_EQ(y.shape(), (ad::Shape{2, 8, 16, 16}));
  const auto w = f.w("sape.proj1.weight"), bias = f.w("sape.proj1.bias");
  const auto x = f.feature.values();
  for (std::size_t plane = 0; plane < 16; ++plane)
    for (std::size_t o = 0; o < 256; ++o) {
      double acc = bias[o];
      for (std::size_t i = 0; i < 16; ++i) acc += x[plane * 16 + i] * w[i * 256 + o];
      EXPECT_NEAR(y.at(plane * 256 + o), std::max(0.0, acc), 1e-10);
    }
  EXPECT_THROW(projector_forward(f.feature, 1, f.params, 2), ShapeError);
  EXPECT_THROW(projector_forward(Tensor::zeros({8, 4, 4}), 1, f.params, 4), ShapeError);
}

TEST(Sau, EqualSelectHeadsGiveUniformWeights) {
  Fixture f;
  const auto w0 = f.w("sape.select0.weight"), b0 = f.w("sape.select0.bias");
  for (std::size_t k = 1; k < f.cfg.num_projectors; ++k) {
    auto& w = f.params.get("sape.select" + std::to_string(k) + ".weight");
    std::copy(w0.begin(), w0.end(), w.mutable_values().begin());
    auto& b = f.params.get("sape.select" + std::to_string(k) + ".bias");
    std::copy(b0.begin(), b0.end(), b.mutable_values().begin());
  }
  const auto w = sau_weights(f.feature, f.params, f.cfg);
  for (double v : w.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Sau, WeightsLieOnTheSimplex) {
  Fixture f;
  const auto w = sau_weights(f.feature, f.params, f.cfg);
  ASSERT_EQ(w.shape(), (ad::Shape{2, 3, 8}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 8; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = w.at((n * 3 + k) * 8 + c);
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Sau, MatchesIndependentForward) {
  Fixture f;
  const auto w = sau_weights(f.feature, f.params, f.cfg);
  const auto ref = oracle_sau(f);
  ASSERT_EQ(w.numel(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(w.at(i), ref[i], 1e-10);
}

TEST(Merge, WeightedSumExamples) {
  const auto p0 = Tensor::full({1, 2, 2, 2}, 1.0);
  const auto p1 = Tensor::full({1, 2, 2, 2}, 3.0);
  const auto w = Tensor::from({1, 2, 2}, {0.25, 1.0, 0.75, 0.0});
  const auto y = sape_merge({p0, p1}, w);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.at(i), 0.25 + 2.25);  // channel 0
  for (std::size_t i = 4; i < 8; ++i) EXPECT_DOUBLE_EQ(y.at(i), 1.0);          // channel 1
  EXPECT_THROW(sape_merge({}, w), ShapeError);
  EXPECT_THROW(sape_merge({p0}, w), ShapeError);
  EXPECT_THROW(sape_merge({p0, Tensor::zeros({1, 2, 4, 4})}, w), ShapeError);
}

TEST(Sape, ForwardShapeMatchesTeacher) {
  Fixture f;
  EXPECT_EQ(sape_forward(f.feature, f.params, f.cfg).shape(), (ad::Shape{2, 8, 16, 16}));
}

TEST(Sape, ConfigValidation) {
  SapeConfig cfg;
  cfg.num_projectors = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.kernels = {3, 4};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.kernels.clear();
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.scale = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(FeatureLoss, Examples) {
  const auto a = random_tensor({2, 3, 4, 4}, 3);
  EXPECT_NEAR(feature_loss(a, a).item(), 0.0, 1e-12);
  EXPECT_NEAR(feature_loss(a, ad::scale(a, -1.0)).item(), 2.0, 1e-12);
  // Orthogonal rows.
  const auto e0 = Tensor::from({1, 2}, {1.0, 0.0});
  const auto e1 = Tensor::from({1, 2}, {0.0, 1.0});
  EXPECT_NEAR(feature_loss(e0, e1).item(), 1.0, 1e-12);
  EXPECT_THROW(feature_loss(a, Tensor::zeros({2, 3, 2, 2})), ShapeError);
}

TEST(FeatureLoss, ScaleInvariant) {
  const auto a = random_tensor({2, 3, 4, 4}, 3), t = random_tensor({2, 3, 4, 4}, 4);
  const double base = feature_loss(a, t).item();
  EXPECT_NEAR(feature_loss(ad::scale(a, 7.5), t).item(), base, 1e-12);
  EXPECT_NEAR(feature_loss(a, ad::scale(t, 0.01)).item(), base, 1e-12);
}

TEST(FeatureLoss, TeacherReceivesNoGradient) {
  auto a = random_tensor({2, 3, 4, 4}, 5, true), t = random_tensor({2, 3, 4, 4}, 6, true);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ad::backprop(feature_loss(a, t));
  for (double g : t.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : a.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(FeatureLoss, FiniteDifferences) {
  auto a = random_tensor({2, 2, 3, 3}, 7, true);
  const auto t = random_tensor({2, 2, 3, 3}, 8);
  EXPECT_LT(ad::finite_diff_check([&](const Tensor& x) { return feature_loss(x, t); }, a), 1e-4);
}

TEST(Sape, FiniteDifferencesThroughProjectorsAndSau) {
  Fixture f;
  auto x = random_tensor({1, 8, 4, 4}, 20, true);
  const auto t = random_tensor({1, 8, 16, 16}, 21);
  const double err = ad::finite_diff_check(
      [&](const Tensor& in) { return feature_loss(sape_forward(in, f.params, f.cfg), t); }, x);
  EXPECT_LT(err, 1e-4);
}

TEST(Sape, DegenerateKernel) {
  EXPECT_FALSE(degenerate_kernel(7, 4));
  EXPECT_TRUE(degenerate_kernel(9, 4));
  EXPECT_FALSE(degenerate_kernel(3, 16));
}
