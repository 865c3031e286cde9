#include <cmath>

#include "cdkd/errors.hpp"
#include "cdkd/model.hpp"

namespace cdkd::model {

std::string_view role_name(Role role) {
  switch (role) {
    case Role::kBackbone: return "backbone";
    case Role::kHead: return "head";
    case Role::kSape: return "sape";
    case Role::kEtht: return "etht";
  }
  return "unknown";
}

std::optional<Role> parse_role(std::string_view name) {
  for (Role r : {Role::kBackbone, Role::kHead, Role::kSape, Role::kEtht}) {
    if (role_name(r) == name) return r;
  }
  return std::nullopt;
}

void ParamSet::add(const std::string& path, Role role, ad::Tensor tensor) {
  if (params_.count(path)) throw Error("duplicate parameter path: " + path);
  tensor.set_requires_grad(!frozen_);
  params_.emplace(path, Param{std::move(tensor), role});
}

const ad::Tensor& ParamSet::get(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("unknown parameter: " + path);
  return it->second.tensor;
}

ad::Tensor& ParamSet::get(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("unknown parameter: " + path);
  return it->second.tensor;
}

Role ParamSet::role(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("unknown parameter: " + path);
  return it->second.role;
}

void ParamSet::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& [path, p] : params_) p.tensor.set_requires_grad(!frozen);
}

void ParamSet::zero_grad() {
  for (auto& [path, p] : params_) p.tensor.zero_grad();
}

void ParamSet::erase(RoleSet roles) {
  for (auto it = params_.begin(); it != params_.end();) {
    if (roles.contains(it->second.role)) {
      it = params_.erase(it);
    } else {
      ++it;
    }
  }
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  out.frozen_ = frozen_;
  for (const auto& [path, p] : params_) {
    auto t = p.tensor.detach();
    t.set_requires_grad(!frozen_);
    out.params_.emplace(path, Param{std::move(t), p.role});
  }
  return out;
}

std::size_t count_params(const ParamSet& params, RoleSet roles) {
  std::size_t n = 0;
  for (const auto& [path, p] : params.entries()) {
    if (roles.contains(p.role)) n += p.tensor.numel();
  }
  return n;
}

ad::Tensor glorot_uniform(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(-a, a);
  return ad::Tensor::from(std::move(shape), std::move(v));
}

std::size_t BackboneConfig::pool_count() const {
  std::size_t n = 0;
  for (std::size_t s = total_stride; s > 1; s /= 2) ++n;
  return n;
}

void BackboneConfig::validate() const {
  if (in_channels == 0) throw ConfigError("backbone: in_channels must be positive");
  if (stage_channels.empty()) throw ConfigError("backbone: stage_channels must be non-empty");
  for (auto c : stage_channels) {
    if (c == 0) throw ConfigError("backbone: stage channel counts must be positive");
  }
  if (total_stride == 0 || (total_stride & (total_stride - 1)) != 0) {
    throw ConfigError("backbone: total_stride must be a power of two");
  }
  if (pool_count() > stage_channels.size()) {
    throw ConfigError("backbone: total_stride needs more stages than configured");
  }
  if (kernel % 2 == 0) throw ConfigError("backbone: kernel must be odd");
}

void init_backbone(ParamSet& params, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t in = cfg.in_channels;
  const std::size_t kk = cfg.kernel * cfg.kernel;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    const std::size_t out = cfg.stage_channels[i];
    const std::string prefix = "backbone.stage" + std::to_string(i);
    params.add(prefix + ".weight", Role::kBackbone,
               glorot_uniform({out, in, cfg.kernel, cfg.kernel}, in * kk, out * kk, rng));
    params.add(prefix + ".bias", Role::kBackbone, ad::Tensor::zeros({out}));
    in = out;
  }
}

ad::Tensor backbone_forward(const ParamSet& params, const BackboneConfig& cfg,
                            const ad::Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != cfg.in_channels) {
    throw ShapeError("backbone: expected [B, " + std::to_string(cfg.in_channels) +
                     ", S, S] images, got " + ad::to_string(images.shape()));
  }
  if (images.dim(2) % cfg.total_stride || images.dim(3) % cfg.total_stride) {
    throw ShapeError("backbone: image side " + std::to_string(images.dim(2)) +
                     " not divisible by total stride " + std::to_string(cfg.total_stride));
  }
  const std::size_t pools = cfg.pool_count();
  ad::Tensor x = images;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    const std::string prefix = "backbone.stage" + std::to_string(i);
    x = ad::conv2d(x, params.get(prefix + ".weight"));
    x = ad::bias_add(x, params.get(prefix + ".bias"), 1);
    x = ad::relu(x);
    if (i < pools) x = ad::avg_pool(x, 2);
  }
  return x;
}

void sgd_step(ParamSet& params, OptimState& opt, RoleSet roles) {
  if (params.frozen()) return;
  if (!(opt.learning_rate > 0.0)) throw Error("sgd_step: learning rate must be positive");
  for (auto& [path, p] : params.entries()) {
    if (!roles.contains(p.role)) continue;
    if (!p.tensor.grad_touched()) throw Error("sgd_step: missing gradient for " + path);
  }
  for (const auto& [path, p] : params.entries()) {
    if (!roles.contains(p.role)) continue;
    ad::Tensor& t = params.get(path);
    auto& v = opt.velocity[path];
    if (v.size() != t.numel()) v.assign(t.numel(), 0.0);
    auto values = t.mutable_values();
    const auto grad = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[i] = opt.momentum * v[i] + grad[i];
      values[i] -= opt.learning_rate * v[i];
    }
  }
  ++opt.step;
}

}  // namespace cdkd::model
