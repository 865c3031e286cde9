#pragma once

// Scale-adaptive projector ensemble.
//
// K projectors lift the student's last feature [B, C, H, W] to the teacher's
// spatial size [B, C, mH, mW]. A scale-adaptive unit looks at the student
// feature through several convolution branches and emits per-(projector,
// channel) fusion weights; the weighted projections are compared with the
// teacher feature by cosine distance. Everything here is training-only and
// lives under Role::kSape.

#include <cstddef>
#include <vector>

#include "cdkd/autodiff.hpp"
#include "cdkd/model.hpp"
#include "cdkd/rng.hpp"

namespace cdkd::sape {

struct SapeConfig {
  std::size_t num_projectors = 3;
  std::vector<std::size_t> kernels{3, 5, 7, 7};
  std::size_t descriptor_dim = 32;
  std::size_t scale = 4;  // m

  void validate() const;
};

/// Student feature geometry the SAPE parameters are sized for.
struct FeatureShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Adds sape.proj*, sape.branch*, sape.fuse and sape.select* parameters.
void init_sape(model::ParamSet& params, const SapeConfig& cfg, const FeatureShape& student,
               Rng& rng);

/// relu(dense over the flattened H*W plane), shared across channels and batch.
/// The output side ratio follows the projector weight shape.
ad::Tensor projector_forward(const ad::Tensor& student_feature, std::size_t index,
                             const model::ParamSet& params, std::size_t scale);

/// Fusion weights [B, K, C]; each (b, c) column is a softmax over K.
ad::Tensor sau_weights(const ad::Tensor& student_feature, const model::ParamSet& params,
                       const SapeConfig& cfg);

/// sum_k weights[:, k, :] (broadcast over space) * projections[k].
ad::Tensor sape_merge(const std::vector<ad::Tensor>& projections, const ad::Tensor& weights);

/// Projectors, SAU and merge composed: the aligned student feature.
ad::Tensor sape_forward(const ad::Tensor& student_feature, const model::ParamSet& params,
                        const SapeConfig& cfg);

/// Mean over the batch of 1 - cos(flatten(aligned), flatten(teacher)).
/// The teacher feature never receives a gradient.
ad::Tensor feature_loss(const ad::Tensor& aligned, const ad::Tensor& teacher);

/// True when a branch kernel exceeds twice the feature side, so most taps
/// read padding. Reported as a warning; the branch still runs.
bool degenerate_kernel(std::size_t kernel, std::size_t side);

}  // namespace cdkd::sape
