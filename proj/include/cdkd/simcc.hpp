#pragma once

// Coordinate-classification (SimCC-style) head, label codec, task loss and
// PCK.
//
// Axis bin i covers the continuous interval [i / k, (i + 1) / k) in pixels,
// so a teacher with m times the resolution has m bins tiling each student
// bin exactly.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cdkd/autodiff.hpp"
#include "cdkd/model.hpp"
#include "cdkd/rng.hpp"

namespace cdkd::simcc {

struct SimccConfig {
  double split_factor = 2.0;  // k
  std::size_t num_keypoints = 5;
  double label_sigma = 2.0;  // in bins

  /// round(k * side); throws ShapeError when fewer than 2.
  std::size_t bins(std::size_t side) const;
  void validate() const;
};

enum class DistKind { kLogits, kProbabilities };

/// Values shaped [B, keypoints, bins] for one axis.
struct AxisDistribution {
  ad::Tensor values;
  DistKind kind = DistKind::kLogits;

  std::size_t batch() const { return values.dim(0); }
  std::size_t keypoints() const { return values.dim(1); }
  std::size_t bins() const { return values.dim(2); }
};

struct AxisPair {
  AxisDistribution x;
  AxisDistribution y;
};

/// Pixel coordinates [B, keypoints, (x, y)] plus a visibility mask.
struct KeypointSet {
  std::size_t batch = 0;
  std::size_t num_keypoints = 0;
  std::vector<double> coords;
  std::vector<std::uint8_t> visible;

  KeypointSet() = default;
  KeypointSet(std::size_t b, std::size_t k)
      : batch(b), num_keypoints(k), coords(b * k * 2, 0.0), visible(b * k, 1) {}

  double& x(std::size_t b, std::size_t k) { return coords[(b * num_keypoints + k) * 2]; }
  double& y(std::size_t b, std::size_t k) { return coords[(b * num_keypoints + k) * 2 + 1]; }
  double x(std::size_t b, std::size_t k) const { return coords[(b * num_keypoints + k) * 2]; }
  double y(std::size_t b, std::size_t k) const { return coords[(b * num_keypoints + k) * 2 + 1]; }
  bool is_visible(std::size_t b, std::size_t k) const { return visible[b * num_keypoints + k] != 0; }
};

/// Adds head.{x,y}.{weight,bias} for a flattened feature of `feature_len`.
void init_head(model::ParamSet& params, std::size_t feature_len, const SimccConfig& cfg,
               std::size_t side, Rng& rng);

/// Flattens the feature and applies one dense layer per axis.
AxisPair head_forward(const model::ParamSet& params, const ad::Tensor& feature,
                      const SimccConfig& cfg, std::size_t side);

/// Normalized Gaussian targets over bins, centered at coordinate * k - 0.5.
AxisPair encode_labels(const KeypointSet& gt, const SimccConfig& cfg, std::size_t side);

/// Mean over batch, visible keypoints and both axes of
/// KL(target || softmax(pred)). An empty mask means all visible.
ad::Tensor task_loss(const AxisPair& pred, const AxisPair& target,
                     std::span<const std::uint8_t> visible = {});

/// Argmax per row (ties to the lowest bin); coordinate = (bin + 0.5) / k.
KeypointSet decode(const AxisPair& pred, const SimccConfig& cfg);

/// Fraction of visible keypoints with Euclidean error < fraction * norm_side.
double pck(const KeypointSet& pred, const KeypointSet& gt, double threshold_fraction,
           std::size_t norm_side);

/// PCK restricted to keypoint index `keypoint`.
double pck_keypoint(const KeypointSet& pred, const KeypointSet& gt, std::size_t keypoint,
                    double threshold_fraction, std::size_t norm_side);

}  // namespace cdkd::simcc
