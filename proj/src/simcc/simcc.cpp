#include <algorithm>
#include <cmath>

#include "cdkd/errors.hpp"
#include "cdkd/simcc.hpp"

namespace cdkd::simcc {

std::size_t SimccConfig::bins(std::size_t side) const {
  const auto n = static_cast<std::size_t>(std::llround(split_factor * static_cast<double>(side)));
  if (n < 2) throw ShapeError("simcc: fewer than 2 bins per axis");
  return n;
}

void SimccConfig::validate() const {
  if (!(split_factor > 0.0)) throw ConfigError("simcc: split factor must be positive");
  if (num_keypoints == 0) throw ConfigError("simcc: num_keypoints must be positive");
  if (!(label_sigma > 0.0)) throw ConfigError("simcc: label sigma must be positive");
}

void init_head(model::ParamSet& params, std::size_t feature_len, const SimccConfig& cfg,
               std::size_t side, Rng& rng) {
  const std::size_t out = cfg.num_keypoints * cfg.bins(side);
  for (const char* axis : {"x", "y"}) {
    const std::string prefix = std::string("head.") + axis;
    params.add(prefix + ".weight", model::Role::kHead,
               model::glorot_uniform({feature_len, out}, feature_len, out, rng));
    params.add(prefix + ".bias", model::Role::kHead, ad::Tensor::zeros({out}));
  }
}

AxisPair head_forward(const model::ParamSet& params, const ad::Tensor& feature,
                      const SimccConfig& cfg, std::size_t side) {
  const std::size_t bins = cfg.bins(side);
  const std::size_t batch = feature.dim(0);
  const std::size_t flat = feature.numel() / batch;
  const ad::Tensor x = ad::reshape(feature, {batch, flat});
  auto axis_logits = [&](const char* axis) {
    const std::string prefix = std::string("head.") + axis;
    const auto& w = params.get(prefix + ".weight");
    if (w.dim(0) != flat || w.dim(1) != cfg.num_keypoints * bins) {
      throw ShapeError("head: weight " + ad::to_string(w.shape()) + " does not match feature " +
                       ad::to_string(feature.shape()) + " and " + std::to_string(bins) + " bins");
    }
    auto z = ad::bias_add(ad::matmul(x, w), params.get(prefix + ".bias"));
    return AxisDistribution{ad::reshape(z, {batch, cfg.num_keypoints, bins}), DistKind::kLogits};
  };
  return {axis_logits("x"), axis_logits("y")};
}

AxisPair encode_labels(const KeypointSet& gt, const SimccConfig& cfg, std::size_t side) {
  const std::size_t bins = cfg.bins(side);
  const std::size_t rows = gt.batch * gt.num_keypoints;
  std::vector<double> tx(rows * bins), ty(rows * bins);
  const double inv_two_var = 1.0 / (2.0 * cfg.label_sigma * cfg.label_sigma);
  auto fill = [&](double coord, double* row) {
    if (!(coord >= 0.0 && coord < static_cast<double>(side))) {
      throw DataError("encode_labels: coordinate " + std::to_string(coord) +
                      " outside [0, " + std::to_string(side) + ")");
    }
    const double center = coord * cfg.split_factor - 0.5;
    // Log-domain weights shifted by their maximum so that tiny sigmas
    // degrade to a one-hot at the nearest bin instead of underflowing.
    double best = -INFINITY;
    for (std::size_t i = 0; i < bins; ++i) {
      const double d = static_cast<double>(i) - center;
      row[i] = -d * d * inv_two_var;
      best = std::max(best, row[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < bins; ++i) {
      row[i] = std::exp(row[i] - best);
      z += row[i];
    }
    for (std::size_t i = 0; i < bins; ++i) row[i] /= z;
  };
  for (std::size_t b = 0; b < gt.batch; ++b) {
    for (std::size_t k = 0; k < gt.num_keypoints; ++k) {
      const std::size_t r = b * gt.num_keypoints + k;
      fill(gt.x(b, k), tx.data() + r * bins);
      fill(gt.y(b, k), ty.data() + r * bins);
    }
  }
  const ad::Shape shape{gt.batch, gt.num_keypoints, bins};
  return {{ad::Tensor::from(shape, std::move(tx)), DistKind::kProbabilities},
          {ad::Tensor::from(shape, std::move(ty)), DistKind::kProbabilities}};
}

ad::Tensor task_loss(const AxisPair& pred, const AxisPair& target,
                     std::span<const std::uint8_t> visible) {
  for (const auto* p : {&pred.x, &pred.y}) {
    if (p->kind != DistKind::kLogits) throw Error("task_loss: predictions must be logits");
  }
  for (const auto* t : {&target.x, &target.y}) {
    if (t->kind != DistKind::kProbabilities) {
      throw Error("task_loss: targets must be probabilities");
    }
  }
  if (pred.x.values.shape() != target.x.values.shape() ||
      pred.y.values.shape() != target.y.values.shape()) {
    throw ShapeError("task_loss: bin mismatch between prediction and target");
  }
  const std::size_t rows = pred.x.batch() * pred.x.keypoints();
  std::vector<double> mask(rows, 1.0);
  if (!visible.empty()) {
    if (visible.size() != rows) throw ShapeError("task_loss: visibility mask size");
    for (std::size_t r = 0; r < rows; ++r) mask[r] = visible[r] ? 1.0 : 0.0;
  }
  double count = 0.0;
  for (double m : mask) count += m;
  if (count == 0.0) throw DataError("task_loss: no visible keypoints");
  const ad::Tensor mask_t =
      ad::Tensor::from({pred.x.batch(), pred.x.keypoints()}, std::move(mask));

  auto axis_kl = [&](const AxisDistribution& p, const AxisDistribution& t) {
    // sum_j t log t is constant with respect to the prediction.
    const ad::Tensor neg_entropy = ad::sum_last_axis(ad::xlogx(t.values));
    const ad::Tensor cross = ad::sum_last_axis(ad::mul(t.values, ad::log_softmax(p.values)));
    return ad::sum(ad::mul(ad::sub(neg_entropy, cross), mask_t));
  };
  const ad::Tensor total = ad::add(axis_kl(pred.x, target.x), axis_kl(pred.y, target.y));
  return ad::scale(total, 1.0 / (2.0 * count));
}

KeypointSet decode(const AxisPair& pred, const SimccConfig& cfg) {
  const std::size_t batch = pred.x.batch(), kps = pred.x.keypoints();
  KeypointSet out(batch, kps);
  auto argmax_row = [](std::span<const double> v, std::size_t row, std::size_t bins) {
    const double* r = v.data() + row * bins;
    std::size_t best = 0;
    for (std::size_t i = 1; i < bins; ++i) {
      if (r[i] > r[best]) best = i;
    }
    return best;
  };
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < kps; ++k) {
      const std::size_t row = b * kps + k;
      out.x(b, k) = (static_cast<double>(argmax_row(pred.x.values.values(), row, pred.x.bins())) + 0.5) /
                    cfg.split_factor;
      out.y(b, k) = (static_cast<double>(argmax_row(pred.y.values.values(), row, pred.y.bins())) + 0.5) /
                    cfg.split_factor;
    }
  }
  return out;
}

namespace {

double pck_impl(const KeypointSet& pred, const KeypointSet& gt, long only_keypoint,
                double threshold_fraction, std::size_t norm_side) {
  if (pred.batch != gt.batch || pred.num_keypoints != gt.num_keypoints) {
    throw ShapeError("pck: prediction and ground truth shapes differ");
  }
  if (!(threshold_fraction > 0.0)) throw Error("pck: threshold fraction must be positive");
  const double threshold = threshold_fraction * static_cast<double>(norm_side);
  std::size_t hits = 0, total = 0;
  for (std::size_t b = 0; b < gt.batch; ++b) {
    for (std::size_t k = 0; k < gt.num_keypoints; ++k) {
      if (only_keypoint >= 0 && k != static_cast<std::size_t>(only_keypoint)) continue;
      if (!gt.is_visible(b, k)) continue;
      ++total;
      const double dist = std::hypot(pred.x(b, k) - gt.x(b, k), pred.y(b, k) - gt.y(b, k));
      if (dist < threshold) ++hits;
    }
  }
  if (total == 0) throw DataError("pck: no visible keypoints");
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

double pck(const KeypointSet& pred, const KeypointSet& gt, double threshold_fraction,
           std::size_t norm_side) {
  return pck_impl(pred, gt, -1, threshold_fraction, norm_side);
}

double pck_keypoint(const KeypointSet& pred, const KeypointSet& gt, std::size_t keypoint,
                    double threshold_fraction, std::size_t norm_side) {
  return pck_impl(pred, gt, static_cast<long>(keypoint), threshold_fraction, norm_side);
}

}  // namespace cdkd::simcc
