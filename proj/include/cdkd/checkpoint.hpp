#pragma once

// Role-tagged tensor checkpoints.
//
// Layout, little-endian: "CDKD", u32 version, u32 tensor count, then per
// tensor: name (u32 length + bytes), u8 role, u8 dtype (1 = f64), u32 rank,
// u64 dims, f64 payload. The config echo (same string encoding) and a u32
// epoch close the file. Tensors are written in path order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cdkd/model.hpp"

namespace cdkd {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Checkpoint {
  struct Entry {
    std::string name;
    model::Role role = model::Role::kBackbone;
    ad::Shape shape;
    std::vector<double> values;
  };
  std::vector<Entry> tensors;
  std::string config_echo;
  std::uint32_t epoch = 0;

  const Entry* find(std::string_view name) const;
};

Checkpoint make_checkpoint(const model::ParamSet& params, const std::string& config_echo,
                           std::uint32_t epoch);

std::string serialize(const Checkpoint& ckpt);
/// Throws CheckpointError on a bad magic, version, dtype or truncation.
Checkpoint deserialize(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into every parameter of `target` whose role is in
/// `roles`. Missing tensors, role or shape mismatches, and checkpoint tensors
/// of those roles unknown to `target` all throw CheckpointError.
void restore(const Checkpoint& ckpt, model::ParamSet& target, model::RoleSet roles);

/// Copy without the tensors whose role is in `roles`.
Checkpoint strip(const Checkpoint& ckpt, model::RoleSet roles);

}  // namespace cdkd
