#include "cdkd/errors.hpp"
#include "cdkd/sape.hpp"

namespace cdkd::sape {

using model::Role;

void SapeConfig::validate() const {
  if (num_projectors == 0) throw ConfigError("sape: num_projectors must be >= 1");
  if (kernels.empty()) throw ConfigError("sape: kernel multiset must be non-empty");
  for (auto k : kernels) {
    if (k == 0 || k % 2 == 0) throw ConfigError("sape: kernels must be odd and >= 1");
  }
  if (descriptor_dim == 0) throw ConfigError("sape: descriptor_dim must be positive");
  if (scale < 2) throw ConfigError("sape: scale factor m must be >= 2");
}

void init_sape(model::ParamSet& params, const SapeConfig& cfg, const FeatureShape& student,
               Rng& rng) {
  cfg.validate();
  const std::size_t c = student.channels;
  const std::size_t in_area = student.height * student.width;
  const std::size_t out_area = in_area * cfg.scale * cfg.scale;
  for (std::size_t k = 0; k < cfg.num_projectors; ++k) {
    const std::string p = "sape.proj" + std::to_string(k);
    params.add(p + ".weight", Role::kSape,
               model::glorot_uniform({in_area, out_area}, in_area, out_area, rng));
    params.add(p + ".bias", Role::kSape, ad::Tensor::zeros({out_area}));
  }
  for (std::size_t i = 0; i < cfg.kernels.size(); ++i) {
    const std::size_t ks = cfg.kernels[i];
    const std::string p = "sape.branch" + std::to_string(i);
    params.add(p + ".weight", Role::kSape,
               model::glorot_uniform({c, c, ks, ks}, c * ks * ks, c * ks * ks, rng));
    params.add(p + ".bias", Role::kSape, ad::Tensor::zeros({c}));
  }
  const std::size_t fused_in = c * cfg.kernels.size();
  params.add("sape.fuse.weight", Role::kSape,
             model::glorot_uniform({fused_in, cfg.descriptor_dim}, fused_in, cfg.descriptor_dim,
                                   rng));
  params.add("sape.fuse.bias", Role::kSape, ad::Tensor::zeros({cfg.descriptor_dim}));
  for (std::size_t k = 0; k < cfg.num_projectors; ++k) {
    const std::string p = "sape.select" + std::to_string(k);
    params.add(p + ".weight", Role::kSape,
               model::glorot_uniform({cfg.descriptor_dim, c}, cfg.descriptor_dim, c, rng));
    params.add(p + ".bias", Role::kSape, ad::Tensor::zeros({c}));
  }
}

ad::Tensor projector_forward(const ad::Tensor& student_feature, std::size_t index,
                             const model::ParamSet& params, std::size_t scale) {
  if (student_feature.rank() != 4) {
    throw ShapeError("projector: expected [B, C, H, W], got " +
                     ad::to_string(student_feature.shape()));
  }
  const std::size_t b = student_feature.dim(0), c = student_feature.dim(1);
  const std::size_t h = student_feature.dim(2), w = student_feature.dim(3);
  const std::string p = "sape.proj" + std::to_string(index);
  const auto& weight = params.get(p + ".weight");
  const std::size_t oh = h * scale, ow = w * scale;
  if (weight.dim(0) != h * w || weight.dim(1) != oh * ow) {
    throw ShapeError("projector: weight " + ad::to_string(weight.shape()) +
                     " does not map a " + std::to_string(h) + "x" + std::to_string(w) +
                     " plane to scale " + std::to_string(scale));
  }
  auto x = ad::reshape(student_feature, {b * c, h * w});
  x = ad::relu(ad::bias_add(ad::matmul(x, weight), params.get(p + ".bias")));
  return ad::reshape(x, {b, c, oh, ow});
}

ad::Tensor sau_weights(const ad::Tensor& student_feature, const model::ParamSet& params,
                       const SapeConfig& cfg) {
  const std::size_t b = student_feature.dim(0), c = student_feature.dim(1);
  std::vector<ad::Tensor> branches;
  branches.reserve(cfg.kernels.size());
  for (std::size_t i = 0; i < cfg.kernels.size(); ++i) {
    const std::string p = "sape.branch" + std::to_string(i);
    auto y = ad::conv2d(student_feature, params.get(p + ".weight"));
    branches.push_back(ad::bias_add(y, params.get(p + ".bias"), 1));
  }
  // Pooling first and then the dense layer equals the dense (1x1) layer
  // followed by pooling, since both are linear. The dense layer over the
  // concatenated channels is the sum of per-branch contributions.
  const auto pooled = ad::global_avg_pool(ad::concat(branches, 1));
  const auto z = ad::bias_add(ad::matmul(pooled, params.get("sape.fuse.weight")),
                              params.get("sape.fuse.bias"));
  std::vector<ad::Tensor> scores;
  scores.reserve(cfg.num_projectors);
  for (std::size_t k = 0; k < cfg.num_projectors; ++k) {
    const std::string p = "sape.select" + std::to_string(k);
    auto s = ad::bias_add(ad::matmul(z, params.get(p + ".weight")), params.get(p + ".bias"));
    scores.push_back(ad::reshape(s, {b, 1, c}));
  }
  return ad::softmax(ad::concat(scores, 1), 1.0, 1);
}

ad::Tensor sape_merge(const std::vector<ad::Tensor>& projections, const ad::Tensor& weights) {
  if (projections.empty()) throw ShapeError("sape_merge: no projections");
  if (weights.rank() != 3 || weights.dim(1) != projections.size()) {
    throw ShapeError("sape_merge: weights " + ad::to_string(weights.shape()) + " for " +
                     std::to_string(projections.size()) + " projections");
  }
  ad::Tensor out;
  for (std::size_t k = 0; k < projections.size(); ++k) {
    if (projections[k].shape() != projections[0].shape()) {
      throw ShapeError("sape_merge: projection shapes differ");
    }
    auto term = ad::channel_scale(projections[k], ad::slice(weights, 1, k));
    out = k == 0 ? term : ad::add(out, term);
  }
  return out;
}

ad::Tensor sape_forward(const ad::Tensor& student_feature, const model::ParamSet& params,
                        const SapeConfig& cfg) {
  std::vector<ad::Tensor> projections;
  projections.reserve(cfg.num_projectors);
  for (std::size_t k = 0; k < cfg.num_projectors; ++k) {
    projections.push_back(projector_forward(student_feature, k, params, cfg.scale));
  }
  return sape_merge(projections, sau_weights(student_feature, params, cfg));
}

ad::Tensor feature_loss(const ad::Tensor& aligned, const ad::Tensor& teacher) {
  if (aligned.shape() != teacher.shape()) {
    throw ShapeError("feature_loss: aligned " + ad::to_string(aligned.shape()) +
                     " vs teacher " + ad::to_string(teacher.shape()));
  }
  const std::size_t b = aligned.dim(0);
  const std::size_t n = aligned.numel() / b;
  const ad::Tensor t = teacher.requires_grad() ? teacher.detach() : teacher;
  const auto s = ad::l2_normalize(ad::reshape(aligned, {b, n}));
  const auto tn = ad::l2_normalize(ad::reshape(t, {b, n}));
  const auto cos = ad::sum_last_axis(ad::mul(s, tn));
  return ad::shift(ad::scale(ad::mean(cos), -1.0), 1.0);
}

bool degenerate_kernel(std::size_t kernel, std::size_t side) { return kernel > 2 * side; }

}  // namespace cdkd::sape
