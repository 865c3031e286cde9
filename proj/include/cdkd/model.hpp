#pragma once

// Parameters, the shared convolutional backbone, and the optimizer.

#include <cstddef>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cdkd/autodiff.hpp"
#include "cdkd/rng.hpp"

namespace cdkd::model {

enum class Role : unsigned { kBackbone = 1, kHead = 2, kSape = 4, kEtht = 8 };

std::string_view role_name(Role role);
std::optional<Role> parse_role(std::string_view name);

/// Bitmask over roles.
class RoleSet {
 public:
  constexpr RoleSet() = default;
  constexpr RoleSet(std::initializer_list<Role> roles) {
    for (Role r : roles) bits_ |= static_cast<unsigned>(r);
  }
  constexpr bool contains(Role r) const { return (bits_ & static_cast<unsigned>(r)) != 0; }
  static constexpr RoleSet all() { return {Role::kBackbone, Role::kHead, Role::kSape, Role::kEtht}; }
  /// Roles used at deployment.
  static constexpr RoleSet inference() { return {Role::kBackbone, Role::kHead}; }

 private:
  unsigned bits_ = 0;
};

struct Param {
  ad::Tensor tensor;
  Role role;
};

/// Named, role-tagged parameter table ordered by path.
class ParamSet {
 public:
  void add(const std::string& path, Role role, ad::Tensor tensor);
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  const ad::Tensor& get(const std::string& path) const;
  ad::Tensor& get(const std::string& path);
  Role role(const std::string& path) const;
  const std::map<std::string, Param>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  /// A frozen set has no gradients recorded and ignores optimizer steps.
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

  void zero_grad();
  /// Removes every parameter carrying one of `roles`.
  void erase(RoleSet roles);
  /// Deep copy with identical paths, roles and values.
  ParamSet clone() const;

 private:
  std::map<std::string, Param> params_;
  bool frozen_ = false;
};

std::size_t count_params(const ParamSet& params, RoleSet roles = RoleSet::all());

/// Glorot-uniform tensor: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
ad::Tensor glorot_uniform(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> stage_channels{16, 32, 32};
  std::size_t total_stride = 4;
  std::size_t kernel = 3;

  /// Number of 2x pools, placed after the leading stages.
  std::size_t pool_count() const;
  std::size_t out_channels() const { return stage_channels.back(); }
  void validate() const;
};

/// Adds backbone.stage{i}.weight / .bias under Role::kBackbone.
void init_backbone(ParamSet& params, const BackboneConfig& cfg, Rng& rng);

/// images [B, in, S, S] -> last feature [B, C_last, S / stride, S / stride].
ad::Tensor backbone_forward(const ParamSet& params, const BackboneConfig& cfg,
                            const ad::Tensor& images);

struct OptimState {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> velocity;
};

/// theta <- theta - lr * v, v <- momentum * v + grad, over parameters whose
/// role is in `roles`. Gradients are left in place.
void sgd_step(ParamSet& params, OptimState& opt, RoleSet roles = RoleSet::all());

}  // namespace cdkd::model
