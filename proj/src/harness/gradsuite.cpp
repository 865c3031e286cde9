#include <cmath>
#include <functional>

#include "cdkd/autodiff.hpp"
#include "cdkd/cca.hpp"
#include "cdkd/gradsuite.hpp"
#include "cdkd/model.hpp"
#include "cdkd/rng.hpp"
#include "cdkd/sape.hpp"
#include "cdkd/simcc.hpp"

namespace cdkd {

namespace {

using ad::Shape;
using ad::Tensor;
using Fn = std::function<Tensor(const Tensor&)>;

Tensor rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Random fixed weights so that sum(w * y) has a generic gradient.
Tensor contract(const Tensor& y, const Tensor& w) { return ad::sum(ad::mul(y, w)); }

class Suite {
 public:
  Suite(std::vector<GradCheckResult>& out, double h) : out_(out), h_(h) {}

  void check(const std::string& op, const std::string& wrt, const std::string& shape,
             std::uint64_t seed, const Fn& f, Tensor x) {
    out_.push_back({op, wrt, shape, seed, ad::finite_diff_check(f, x, h_)});
  }

  /// Unary op checked through a random contraction.
  void unary(const std::string& op, const std::string& shape, std::uint64_t seed, Tensor x,
             const std::function<Tensor(const Tensor&)>& g, Rng& rng) {
    Tensor w;
    {
      const Tensor y = g(x);
      w = rnd(y.shape(), rng);
    }
    check(op, "x", shape, seed, [&](const Tensor& v) { return contract(g(v), w); }, x);
  }

  /// Binary op; both inputs perturbed in turn.
  void binary(const std::string& op, const std::string& shape, std::uint64_t seed, Tensor a,
              Tensor b, const std::function<Tensor(const Tensor&, const Tensor&)>& g,
              Rng& rng) {
    const Tensor w = rnd(g(a, b).shape(), rng);
    check(op, "a", shape, seed, [&](const Tensor& v) { return contract(g(v, b), w); }, a);
    check(op, "b", shape, seed, [&](const Tensor& v) { return contract(g(a, v), w); }, b);
  }

  std::vector<GradCheckResult>& out() { return out_; }
  double h() const { return h_; }

 private:
  std::vector<GradCheckResult>& out_;
  double h_;
};

std::string label(const Shape& s) { return ad::to_string(s); }

void primitives(Suite& s, std::uint64_t seed) {
  auto base = Rng(seed).split(100);
  std::size_t stream = 0;
  auto next = [&] { return base.split(stream++); };

  // dense-matmul
  for (auto [m, k, n] : {std::tuple{2, 3, 4}, {3, 5, 2}, {1, 4, 6}}) {
    Rng r = next();
    Shape sa{std::size_t(m), std::size_t(k)}, sb{std::size_t(k), std::size_t(n)};
    s.binary("matmul", label(sa) + "x" + label(sb), seed, rnd(sa, r), rnd(sb, r), ad::matmul, r);
  }
  // bias-add
  for (auto [shape, axis] : {std::pair{Shape{2, 3, 4}, 1}, {Shape{3, 5}, -1}, {Shape{2, 2, 3, 3}, 1}}) {
    Rng r = next();
    const std::size_t len = axis < 0 ? shape.back() : shape[static_cast<std::size_t>(axis)];
    const int ax = axis;
    s.binary("bias_add", label(shape), seed, rnd(shape, r), rnd({len}, r),
             [ax](const Tensor& x, const Tensor& b) { return ad::bias_add(x, b, ax); }, r);
  }
  // 2-d convolution
  struct ConvCase {
    Shape x, w;
    std::size_t stride;
    int pad;
  };
  for (const auto& c : {ConvCase{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, -1},
                        ConvCase{{2, 1, 6, 6}, {2, 1, 3, 3}, 2, 1},
                        ConvCase{{1, 3, 4, 4}, {2, 3, 1, 1}, 1, 0}}) {
    Rng r = next();
    const auto stride = c.stride;
    const auto pad = c.pad;
    s.binary("conv2d", label(c.x) + "*" + label(c.w) + "/s" + std::to_string(stride), seed,
             rnd(c.x, r), rnd(c.w, r),
             [=](const Tensor& x, const Tensor& w) { return ad::conv2d(x, w, stride, pad); }, r);
  }
  const Shape shapes[] = {{7}, {3, 4}, {2, 3, 2}};
  for (const auto& shape : shapes) {
    {
      Rng r = next();
      s.unary("relu", label(shape), seed, rnd(shape, r), ad::relu, r);
    }
    {
      Rng r = next();
      s.unary("log", label(shape), seed, rnd(shape, r, 0.5, 2.0), ad::log, r);
    }
    {
      Rng r = next();
      s.unary("xlogx", label(shape), seed, rnd(shape, r, 0.1, 1.0), ad::xlogx, r);
    }
    {
      Rng r = next();
      s.unary("scale", label(shape), seed, rnd(shape, r),
              [](const Tensor& x) { return ad::scale(x, -1.7); }, r);
    }
    {
      Rng r = next();
      s.unary("shift", label(shape), seed, rnd(shape, r),
              [](const Tensor& x) { return ad::shift(x, 0.3); }, r);
    }
    {
      Rng r = next();
      s.unary("sum", label(shape), seed, rnd(shape, r),
              [](const Tensor& x) { return ad::scale(ad::sum(x), 1.3); }, r);
    }
    {
      Rng r = next();
      s.unary("mean", label(shape), seed, rnd(shape, r),
              [](const Tensor& x) { return ad::scale(ad::mean(x), 1.3); }, r);
    }
    {
      Rng r = next();
      s.unary("sum_last_axis", label(shape), seed, rnd(shape, r), ad::sum_last_axis, r);
    }
    {
      Rng r = next();
      const Shape flat{ad::numel(shape)};
      s.unary("reshape", label(shape), seed, rnd(shape, r),
              [flat](const Tensor& x) { return ad::reshape(x, flat); }, r);
    }
    for (const char* name : {"add", "sub", "mul"}) {
      Rng r = next();
      const std::string op = name;
      s.binary(op, label(shape), seed, rnd(shape, r), rnd(shape, r),
               [op](const Tensor& a, const Tensor& b) {
                 return op == "add" ? ad::add(a, b) : op == "sub" ? ad::sub(a, b) : ad::mul(a, b);
               },
               r);
    }
    {
      Rng r = next();
      s.binary("mul", label(shape) + "*scalar", seed, rnd(shape, r), rnd({1}, r), ad::mul, r);
    }
    // temperature softmax: logits and the temperature both receive gradient
    for (const char* name : {"softmax", "log_softmax"}) {
      Rng r = next();
      const bool log = std::string(name) == "log_softmax";
      s.binary(name, label(shape), seed, rnd(shape, r, -2.0, 2.0), Tensor::scalar(r.uniform(0.5, 3.0)),
               [log](const Tensor& x, const Tensor& tau) {
                 return log ? ad::log_softmax(x, tau) : ad::softmax(x, tau);
               },
               r);
    }
  }
  // concatenate
  struct CatCase {
    std::vector<Shape> parts;
    std::size_t axis;
  };
  for (const auto& c : {CatCase{{{2, 3}, {2, 4}}, 1}, CatCase{{{1, 2, 3}, {2, 2, 3}}, 0},
                        CatCase{{{2, 2, 2}, {2, 2, 1}, {2, 2, 3}}, 2}}) {
    Rng r = next();
    std::vector<Tensor> parts;
    for (const auto& p : c.parts) parts.push_back(rnd(p, r));
    const auto axis = c.axis;
    const Tensor w = rnd(ad::concat(parts, axis).shape(), r);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      s.check("concat", "part" + std::to_string(i), label(c.parts[0]) + "@" + std::to_string(axis),
              seed,
              [&, i, axis](const Tensor& v) {
                auto ps = parts;
                ps[i] = v;
                return contract(ad::concat(ps, axis), w);
              },
              parts[i]);
    }
  }
  // slice
  for (auto [shape, axis, index] : {std::tuple{Shape{3, 4}, 0, 1}, {Shape{2, 3, 4}, 1, 2},
                                    {Shape{4, 2}, 1, 0}}) {
    Rng r = next();
    const std::size_t ax = axis, ix = index;
    s.unary("slice", label(shape), seed, rnd(shape, r),
            [ax, ix](const Tensor& x) { return ad::slice(x, ax, ix); }, r);
  }
  // channel scale
  for (const auto& shape : {Shape{1, 2, 3, 3}, Shape{2, 3, 2, 2}, Shape{2, 1, 4, 4}}) {
    Rng r = next();
    s.binary("channel_scale", label(shape), seed, rnd(shape, r), rnd({shape[0], shape[1]}, r),
             ad::channel_scale, r);
  }
  // pooling
  for (const auto& shape : {Shape{1, 2, 3, 3}, Shape{2, 3, 4, 4}, Shape{2, 1, 2, 2}}) {
    Rng r = next();
    s.unary("global_avg_pool", label(shape), seed, rnd(shape, r), ad::global_avg_pool, r);
  }
  for (auto [shape, window] : {std::pair{Shape{1, 1, 4, 4}, 2}, {Shape{2, 2, 4, 4}, 2},
                               {Shape{1, 2, 6, 6}, 3}}) {
    Rng r = next();
    const std::size_t win = window;
    s.unary("avg_pool", label(shape) + "/" + std::to_string(win), seed, rnd(shape, r),
            [win](const Tensor& x) { return ad::avg_pool(x, win); }, r);
  }
  for (const auto& shape : {Shape{2, 5}, Shape{3, 2, 2}, Shape{1, 8}}) {
    Rng r = next();
    s.unary("l2_normalize", label(shape), seed, rnd(shape, r), ad::l2_normalize, r);
  }
  // Gradient reversal: analytic gradient must equal -scale x central difference.
  for (auto [shape, factor] : {std::pair{Shape{4}, 0.0}, {Shape{2, 3}, 0.5}, {Shape{3, 2, 2}, 1.0}}) {
    Rng r = next();
    Tensor x = rnd(shape, r);
    const Tensor w = rnd(shape, r);
    const double f = factor;
    // sum(w * r(x) * r(x)) with r the reversal: the reported gradient must be
    // -f times the plain derivative 2 w x.
    x.set_requires_grad(true);
    {
      ad::Tape tape;
      ad::TapeScope scope(tape);
      const Tensor y = contract(ad::mul(ad::grad_reverse(x, f), ad::grad_reverse(x, f)), w);
      tape.backprop(y);
    }
    double worst = 0.0;
    auto vals = x.values();
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double central = 2.0 * w.at(i) * vals[i];
      worst = std::max(worst, std::abs(x.grad()[i] - (-f) * central) / std::max(1.0, std::abs(central)));
    }
    s.out().push_back({"grad_reverse", "x", label(shape) + "/" + std::to_string(f), seed, worst});
  }
}

void composites(Suite& s, std::uint64_t seed) {
  auto base = Rng(seed).split(200);
  std::size_t stream = 0;
  auto next = [&] { return base.split(stream++); };

  // Feature loss (cosine distance on normalized features).
  for (const auto& shape : {Shape{1, 2, 4, 4}, Shape{2, 3, 4, 4}, Shape{2, 2, 6, 6}}) {
    Rng r = next();
    const Tensor teacher = rnd(shape, r);
    s.check("feature_loss", "aligned", label(shape), seed,
            [&](const Tensor& v) { return sape::feature_loss(v, teacher); }, rnd(shape, r));
  }

  // Full SAPE path into the feature loss: student feature and SAPE weights.
  struct SapeCase {
    Shape student;
    std::size_t scale;
    std::size_t projectors;
  };
  for (const auto& c : {SapeCase{{1, 2, 2, 2}, 2, 3}, SapeCase{{2, 3, 2, 2}, 2, 2},
                        SapeCase{{1, 2, 3, 3}, 2, 1}}) {
    Rng r = next();
    sape::SapeConfig cfg;
    cfg.scale = c.scale;
    cfg.num_projectors = c.projectors;
    cfg.kernels = {1, 3};
    cfg.descriptor_dim = 4;
    model::ParamSet params;
    Rng init = r.split(1);
    sape::init_sape(params, cfg, {c.student[1], c.student[2], c.student[3]}, init);
    // Non-zero biases so every path carries signal.
    for (auto& [path, p] : params.entries()) {
      for (auto& v : params.get(path).mutable_values()) {
        if (v == 0.0) v = r.uniform(-0.1, 0.1);
      }
    }
    const Tensor teacher =
        rnd({c.student[0], c.student[1], c.student[2] * c.scale, c.student[3] * c.scale}, r);
    Tensor student = rnd(c.student, r);
    const std::string lbl = label(c.student) + "/K" + std::to_string(c.projectors);
    auto loss = [&](const Tensor& st) {
      return sape::feature_loss(sape::sape_forward(st, params, cfg), teacher);
    };
    s.check("sape+feature_loss", "student", lbl, seed, loss, student);
    for (const char* path : {"sape.proj0.weight", "sape.branch1.weight", "sape.fuse.weight",
                             "sape.select0.weight"}) {
      s.check("sape+feature_loss", path, lbl, seed,
              [&](const Tensor&) { return loss(student); }, params.get(path));
    }
  }

  // Logit loss with cross-class merge, per student logits, teacher logits
  // (no gradient expected) and temperature.
  for (auto [b, k, bins, m] : {std::tuple{1, 2, 4, 2}, {2, 3, 3, 4}, {2, 2, 5, 1}}) {
    Rng r = next();
    const std::size_t B = b, K = k, J = bins, M = m;
    auto dist = [&](std::size_t nb) {
      return simcc::AxisDistribution{rnd({B, K, nb}, r, -2.0, 2.0), simcc::DistKind::kLogits};
    };
    simcc::AxisPair teacher{dist(J * M), dist(J * M)};
    simcc::AxisPair student{dist(J), dist(J)};
    Tensor tau = Tensor::scalar(r.uniform(0.7, 4.0));
    const std::string lbl = "B" + std::to_string(B) + "K" + std::to_string(K) + "J" +
                            std::to_string(J) + "m" + std::to_string(M);
    s.check("logit_loss", "student.x", lbl, seed,
            [&](const Tensor& v) {
              return cca::logit_loss(teacher, {{v, simcc::DistKind::kLogits}, student.y}, tau, M);
            },
            student.x.values);
    s.check("logit_loss", "tau", lbl, seed,
            [&](const Tensor& t) { return cca::logit_loss(teacher, student, t, M); }, tau);

    // Total loss over all three terms at once through one shared student logit tensor.
    const Tensor aligned_target = rnd({B, K, 2, 2}, r);
    simcc::AxisPair target;
    {
      std::vector<double> p(B * K * J);
      for (std::size_t row = 0; row < B * K; ++row) {
        double z = 0.0;
        for (std::size_t j = 0; j < J; ++j) z += p[row * J + j] = r.uniform(0.1, 1.0);
        for (std::size_t j = 0; j < J; ++j) p[row * J + j] /= z;
      }
      const Tensor t = Tensor::from({B, K, J}, p);
      target = {{t, simcc::DistKind::kProbabilities}, {t, simcc::DistKind::kProbabilities}};
    }
    const cca::LossWeights weights{r.uniform(0.2, 2.0), r.uniform(0.2, 2.0)};
    Tensor feature = rnd({B, K, 2, 2}, r);
    s.check("total_loss", "student.x", lbl, seed,
            [&](const Tensor& v) {
              const simcc::AxisPair pred{{v, simcc::DistKind::kLogits}, student.y};
              return cca::total_loss(simcc::task_loss(pred, target),
                                     sape::feature_loss(feature, aligned_target),
                                     cca::logit_loss(teacher, pred, tau, M), weights);
            },
            student.x.values);
    s.check("total_loss", "feature", lbl, seed,
            [&](const Tensor& v) {
              return cca::total_loss(simcc::task_loss(student, target),
                                     sape::feature_loss(v, aligned_target),
                                     cca::logit_loss(teacher, student, tau, M), weights);
            },
            feature);
    s.check("total_loss", "tau", lbl, seed,
            [&](const Tensor& t) {
              return cca::total_loss(simcc::task_loss(student, target),
                                     sape::feature_loss(feature, aligned_target),
                                     cca::logit_loss(teacher, student, t, M), weights);
            },
            tau);
    s.check("task_loss", "pred.y", lbl, seed,
            [&](const Tensor& v) {
              return simcc::task_loss({student.x, {v, simcc::DistKind::kLogits}}, target);
            },
            student.y.values);
  }
}

}  // namespace

std::vector<GradCheckResult> run_grad_suite(std::span<const std::uint64_t> seeds, double h) {
  std::vector<GradCheckResult> out;
  Suite suite(out, h);
  for (auto seed : seeds) {
    primitives(suite, seed);
    composites(suite, seed);
  }
  return out;
}

}  // namespace cdkd
