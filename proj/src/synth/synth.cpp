#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>

#include "cdkd/binio.hpp"
#include "cdkd/errors.hpp"
#include "cdkd/kernels.hpp"
#include "cdkd/synth.hpp"

namespace cdkd::synth {

namespace {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kValStream = 2;
constexpr std::uint64_t kShuffleStream = 3;
constexpr int kMaxPoseAttempts = 100;

// Limb gray levels encode body side; keypoint disks are always full white.
constexpr double kAxialLevel = 1.0;
constexpr double kLeftLevel = 0.55;
constexpr double kRightLevel = 0.8;

struct Segment {
  double ax, ay, bx, by;
  double level;
};

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.bx - s.ax, dy = s.by - s.ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s.ax) * dx + (py - s.ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (s.ax + t * dx), py - (s.ay + t * dy));
}

// Fraction of a unit pixel covered, linear ramp over one pixel at the edge.
double coverage(double distance, double radius) {
  return std::clamp(radius + 0.5 - distance, 0.0, 1.0);
}

bool inside(const Pose& pose, const SceneConfig& cfg) {
  const auto side = static_cast<double>(cfg.high_side);
  for (std::size_t k = 0; k < cfg.num_keypoints; ++k) {
    for (double v : pose.kp[k]) {
      if (!(v >= 0.0 && v < side)) return false;
    }
  }
  return true;
}

}  // namespace

void SceneConfig::validate() const {
  if (scale < 1 || high_side == 0 || high_side % scale != 0) {
    throw ConfigError("scene: m must divide high_side");
  }
  if (num_keypoints == 0 || num_keypoints > kStickKeypoints) {
    throw ConfigError("scene: num_keypoints must be in [1, 5]");
  }
  if (limb_thickness <= 0.0 || joint_radius <= 0.0) {
    throw ConfigError("scene: limb thickness and joint radius must be positive");
  }
  if (noise_std < 0.0) throw ConfigError("scene: noise_std must be nonnegative");
  for (const Range* r : {&center_x, &center_y, &body_scale, &torso_tilt, &left_arm, &right_arm,
                         &left_leg, &right_leg}) {
    if (r->hi < r->lo) throw ConfigError("scene: pose range with hi < lo");
  }
}

Pose sample_pose(Rng& rng, const SceneConfig& cfg) {
  const auto side = static_cast<double>(cfg.high_side);
  const double cx = rng.uniform(cfg.center_x.lo, cfg.center_x.hi) * side;
  const double cy = rng.uniform(cfg.center_y.lo, cfg.center_y.hi) * side;
  const double s = rng.uniform(cfg.body_scale.lo, cfg.body_scale.hi) * side;
  const double tilt = rng.uniform(cfg.torso_tilt.lo, cfg.torso_tilt.hi);
  const double a_left = rng.uniform(cfg.left_arm.lo, cfg.left_arm.hi);
  const double a_right = rng.uniform(cfg.right_arm.lo, cfg.right_arm.hi);
  const double l_left = rng.uniform(cfg.left_leg.lo, cfg.left_leg.hi);
  const double l_right = rng.uniform(cfg.right_leg.lo, cfg.right_leg.hi);

  const double torso = 0.28 * s, head = 0.12 * s, arm = 0.24 * s, leg = 0.26 * s;
  const double ux = std::sin(tilt), uy = -std::cos(tilt);  // up along the torso

  Pose p{};
  p.neck_x = cx + ux * torso / 2;
  p.neck_y = cy + uy * torso / 2;
  p.hip_x = cx - ux * torso / 2;
  p.hip_y = cy - uy * torso / 2;
  p.kp[0][0] = p.neck_x + ux * head;
  p.kp[0][1] = p.neck_y + uy * head;
  p.kp[1][0] = p.neck_x + arm * std::cos(a_left);
  p.kp[1][1] = p.neck_y + arm * std::sin(a_left);
  p.kp[2][0] = p.neck_x + arm * std::cos(a_right);
  p.kp[2][1] = p.neck_y + arm * std::sin(a_right);
  p.kp[3][0] = p.hip_x + leg * std::cos(l_left);
  p.kp[3][1] = p.hip_y + leg * std::sin(l_left);
  p.kp[4][0] = p.hip_x + leg * std::cos(l_right);
  p.kp[4][1] = p.hip_y + leg * std::sin(l_right);
  return p;
}

std::vector<double> render(const Pose& pose, const SceneConfig& cfg) {
  const std::size_t side = cfg.high_side;
  const Segment segments[] = {
      {pose.neck_x, pose.neck_y, pose.hip_x, pose.hip_y, kAxialLevel},
      {pose.neck_x, pose.neck_y, pose.kp[0][0], pose.kp[0][1], kAxialLevel},
      {pose.neck_x, pose.neck_y, pose.kp[1][0], pose.kp[1][1], kLeftLevel},
      {pose.neck_x, pose.neck_y, pose.kp[2][0], pose.kp[2][1], kRightLevel},
      {pose.hip_x, pose.hip_y, pose.kp[3][0], pose.kp[3][1], kLeftLevel},
      {pose.hip_x, pose.hip_y, pose.kp[4][0], pose.kp[4][1], kRightLevel},
  };
  const double half_width = cfg.limb_thickness / 2.0;
  std::vector<double> img(side * side, 0.0);
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double px = static_cast<double>(j) + 0.5;
      const double py = static_cast<double>(i) + 0.5;
      double v = 0.0;
      for (const auto& s : segments) {
        v = std::max(v, s.level * coverage(segment_distance(px, py, s), half_width));
      }
      for (std::size_t k = 0; k < kStickKeypoints; ++k) {
        const double r = k == 0 ? 1.5 * cfg.joint_radius : cfg.joint_radius;
        v = std::max(v, coverage(std::hypot(px - pose.kp[k][0], py - pose.kp[k][1]), r));
      }
      img[i * side + j] = v;
    }
  }
  return img;
}

SyntheticSample generate_sample(Rng& rng, const SceneConfig& cfg) {
  cfg.validate();
  Pose pose{};
  int attempt = 0;
  for (; attempt < kMaxPoseAttempts; ++attempt) {
    pose = sample_pose(rng, cfg);
    if (inside(pose, cfg)) break;
  }
  if (attempt == kMaxPoseAttempts) {
    throw DataError("generate_sample: pose resampling exhausted after 100 attempts");
  }

  SyntheticSample out;
  out.high = render(pose, cfg);
  if (cfg.noise_std > 0.0) {
    for (auto& v : out.high) v = std::clamp(v + cfg.noise_std * rng.normal(), 0.0, 1.0);
  }
  const std::size_t low = cfg.low_side();
  out.low.assign(low * low, 0.0);
  kernels::avg_pool_forward(1, cfg.high_side, cfg.high_side, cfg.scale, out.high, out.low);

  out.gt_high = simcc::KeypointSet(1, cfg.num_keypoints);
  out.gt_low = simcc::KeypointSet(1, cfg.num_keypoints);
  const auto m = static_cast<double>(cfg.scale);
  for (std::size_t k = 0; k < cfg.num_keypoints; ++k) {
    out.gt_high.x(0, k) = pose.kp[k][0];
    out.gt_high.y(0, k) = pose.kp[k][1];
    out.gt_low.x(0, k) = pose.kp[k][0] / m;
    out.gt_low.y(0, k) = pose.kp[k][1] / m;
  }
  return out;
}

Dataset::Dataset(std::uint64_t seed, SceneConfig cfg, std::vector<SyntheticSample> train,
                 std::vector<SyntheticSample> val)
    : seed_(seed), cfg_(std::move(cfg)), train_(std::move(train)), val_(std::move(val)) {}

std::vector<std::size_t> Dataset::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed_).split(kShuffleStream).split(epoch);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  return order;
}

namespace {

std::vector<SyntheticSample> generate_split(const Rng& parent, std::size_t n,
                                            const SceneConfig& cfg) {
  std::vector<SyntheticSample> out(n);
  std::exception_ptr failure;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(n); ++si) {
    try {
      Rng rng = parent.split(static_cast<std::uint64_t>(si));
      out[static_cast<std::size_t>(si)] = generate_sample(rng, cfg);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace

Dataset make_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_val,
                     const SceneConfig& cfg) {
  if (n_train == 0 || n_val == 0) throw ConfigError("dataset: split sizes must be positive");
  cfg.validate();
  const Rng root(seed);
  return Dataset(seed, cfg, generate_split(root.split(kTrainStream), n_train, cfg),
                 generate_split(root.split(kValStream), n_val, cfg));
}

Batch make_batch(const std::vector<SyntheticSample>& samples,
                 std::span<const std::size_t> indices, View view) {
  if (indices.empty()) throw DataError("make_batch: empty batch");
  const auto& first = samples.at(indices[0]);
  const auto& ref_img = view == View::kHigh ? first.high : first.low;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(ref_img.size())));
  const std::size_t kps = first.gt_high.num_keypoints;
  std::vector<double> pixels;
  pixels.reserve(indices.size() * ref_img.size());
  simcc::KeypointSet kp(indices.size(), kps);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = samples.at(indices[b]);
    const auto& img = view == View::kHigh ? s.high : s.low;
    pixels.insert(pixels.end(), img.begin(), img.end());
    const auto& gt = view == View::kHigh ? s.gt_high : s.gt_low;
    for (std::size_t k = 0; k < kps; ++k) {
      kp.x(b, k) = gt.x(0, k);
      kp.y(b, k) = gt.y(0, k);
      kp.visible[b * kps + k] = gt.visible[k];
    }
  }
  return {ad::Tensor::from({indices.size(), 1, side, side}, std::move(pixels)), std::move(kp)};
}

namespace {

constexpr std::uint32_t kSplitVersion = 1;

void put_range(std::ostream& os, const Range& r) {
  binio::put_f64(os, r.lo);
  binio::put_f64(os, r.hi);
}

Range get_range(std::istream& is) {
  Range r;
  r.lo = binio::get_f64<DataError>(is);
  r.hi = binio::get_f64<DataError>(is);
  return r;
}

}  // namespace

void write_split(const std::filesystem::path& path, const SceneConfig& cfg,
                 const std::vector<SyntheticSample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write("CDKS", 4);
  binio::put_u32(os, kSplitVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(samples.size()));
  binio::put_u32(os, static_cast<std::uint32_t>(cfg.high_side));
  binio::put_u32(os, static_cast<std::uint32_t>(cfg.scale));
  binio::put_u32(os, static_cast<std::uint32_t>(cfg.num_keypoints));
  binio::put_f64(os, cfg.limb_thickness);
  binio::put_f64(os, cfg.joint_radius);
  binio::put_f64(os, cfg.noise_std);
  for (const Range* r : {&cfg.center_x, &cfg.center_y, &cfg.body_scale, &cfg.torso_tilt,
                         &cfg.left_arm, &cfg.right_arm, &cfg.left_leg, &cfg.right_leg}) {
    put_range(os, *r);
  }
  for (const auto& s : samples) {
    for (double v : s.high) binio::put_f64(os, v);
    for (double v : s.low) binio::put_f64(os, v);
    for (std::size_t k = 0; k < cfg.num_keypoints; ++k) {
      binio::put_f64(os, s.gt_high.x(0, k));
      binio::put_f64(os, s.gt_high.y(0, k));
      binio::put_u8(os, s.gt_high.visible[k]);
    }
  }
  if (!os) throw DataError("write failed: " + path.string());
}

std::vector<SyntheticSample> read_split(const std::filesystem::path& path, SceneConfig* cfg_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != "CDKS") {
    throw DataError(path.string() + ": not a CDKS dataset file");
  }
  if (binio::get_u32<DataError>(is) != kSplitVersion) {
    throw DataError(path.string() + ": unsupported version");
  }
  const auto count = binio::get_u32<DataError>(is);
  SceneConfig cfg;
  cfg.high_side = binio::get_u32<DataError>(is);
  cfg.scale = binio::get_u32<DataError>(is);
  cfg.num_keypoints = binio::get_u32<DataError>(is);
  cfg.limb_thickness = binio::get_f64<DataError>(is);
  cfg.joint_radius = binio::get_f64<DataError>(is);
  cfg.noise_std = binio::get_f64<DataError>(is);
  for (Range* r : {&cfg.center_x, &cfg.center_y, &cfg.body_scale, &cfg.torso_tilt,
                   &cfg.left_arm, &cfg.right_arm, &cfg.left_leg, &cfg.right_leg}) {
    *r = get_range(is);
  }
  cfg.validate();
  const std::size_t hi = cfg.high_side * cfg.high_side;
  const std::size_t lo = cfg.low_side() * cfg.low_side();
  std::vector<SyntheticSample> out(count);
  const auto m = static_cast<double>(cfg.scale);
  for (auto& s : out) {
    s.high.resize(hi);
    s.low.resize(lo);
    for (auto& v : s.high) v = binio::get_f64<DataError>(is);
    for (auto& v : s.low) v = binio::get_f64<DataError>(is);
    s.gt_high = simcc::KeypointSet(1, cfg.num_keypoints);
    s.gt_low = simcc::KeypointSet(1, cfg.num_keypoints);
    for (std::size_t k = 0; k < cfg.num_keypoints; ++k) {
      s.gt_high.x(0, k) = binio::get_f64<DataError>(is);
      s.gt_high.y(0, k) = binio::get_f64<DataError>(is);
      s.gt_high.visible[k] = binio::get_u8<DataError>(is);
      s.gt_low.x(0, k) = s.gt_high.x(0, k) / m;
      s.gt_low.y(0, k) = s.gt_high.y(0, k) / m;
      s.gt_low.visible[k] = s.gt_high.visible[k];
    }
  }
  if (cfg_out) *cfg_out = cfg;
  return out;
}

}  // namespace cdkd::synth
