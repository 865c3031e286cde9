#pragma once

// Deterministic paired high/low resolution keypoint samples: a stick figure
// with five keypoints (head, left hand, right hand, left foot, right foot)
// rendered on a grayscale canvas. The low resolution view is the exact
// m x m average pooling of the high resolution render.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdkd/autodiff.hpp"
#include "cdkd/rng.hpp"
#include "cdkd/simcc.hpp"

namespace cdkd::synth {

inline constexpr std::size_t kStickKeypoints = 5;

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SceneConfig {
  std::size_t high_side = 64;
  std::size_t scale = 4;  // m; low side = high_side / m
  std::size_t num_keypoints = kStickKeypoints;
  double limb_thickness = 1.5;  // px at high resolution
  double joint_radius = 2.0;    // px
  double noise_std = 0.02;
  // Pose parameters; angles in radians, image y axis pointing down.
  Range center_x{0.35, 0.65};  // fraction of side
  Range center_y{0.35, 0.65};
  Range body_scale{0.7, 1.0};
  Range torso_tilt{-0.3, 0.3};
  Range left_arm{2.1, 4.2};
  Range right_arm{-1.05, 1.05};
  Range left_leg{1.66, 2.6};
  Range right_leg{0.52, 1.48};

  std::size_t low_side() const { return high_side / scale; }
  void validate() const;
};

struct SyntheticSample {
  std::vector<double> high;  // [high_side * high_side]
  std::vector<double> low;   // [low_side * low_side]
  simcc::KeypointSet gt_high;
  simcc::KeypointSet gt_low;
};

/// Renders one sample, resampling the pose until every keypoint is inside
/// the canvas (at most 100 attempts). Fully determined by `rng`.
SyntheticSample generate_sample(Rng& rng, const SceneConfig& cfg);

/// Torso anchors and keypoints in high resolution pixels.
struct Pose {
  double neck_x, neck_y, hip_x, hip_y;
  double kp[kStickKeypoints][2];
};
Pose sample_pose(Rng& rng, const SceneConfig& cfg);
/// Noise-free high resolution render of a pose.
std::vector<double> render(const Pose& pose, const SceneConfig& cfg);

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::uint64_t seed, SceneConfig cfg, std::vector<SyntheticSample> train,
          std::vector<SyntheticSample> val);

  const SceneConfig& config() const { return cfg_; }
  const std::vector<SyntheticSample>& train() const { return train_; }
  const std::vector<SyntheticSample>& val() const { return val_; }

  /// Train iteration order for an epoch; a permutation derived from
  /// (seed, epoch) only.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;

 private:
  std::uint64_t seed_ = 0;
  SceneConfig cfg_;
  std::vector<SyntheticSample> train_;
  std::vector<SyntheticSample> val_;
};

/// Train and validation samples come from disjoint child streams of `seed`.
Dataset make_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_val,
                     const SceneConfig& cfg);

enum class View { kHigh, kLow };

struct Batch {
  ad::Tensor images;  // [B, 1, S, S]
  simcc::KeypointSet keypoints;
};

Batch make_batch(const std::vector<SyntheticSample>& samples,
                 std::span<const std::size_t> indices, View view);

/// Binary split dump, little-endian: "CDKS", u32 version, u32 count, the
/// scene config echo, then per sample high floats, low floats, keypoints.
void write_split(const std::filesystem::path& path, const SceneConfig& cfg,
                 const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> read_split(const std::filesystem::path& path, SceneConfig* cfg_out);

}  // namespace cdkd::synth
