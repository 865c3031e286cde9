#include <fstream>
#include <sstream>

#include "cdkd/binio.hpp"
#include "cdkd/checkpoint.hpp"
#include "cdkd/errors.hpp"

namespace cdkd {

const Checkpoint::Entry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : tensors) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

Checkpoint make_checkpoint(const model::ParamSet& params, const std::string& config_echo,
                           std::uint32_t epoch) {
  Checkpoint ckpt;
  for (const auto& [path, p] : params.entries()) {
    const auto v = p.tensor.values();
    ckpt.tensors.push_back({path, p.role, p.tensor.shape(), {v.begin(), v.end()}});
  }
  ckpt.config_echo = config_echo;
  ckpt.epoch = epoch;
  return ckpt;
}

std::string serialize(const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  os.write("CDKD", 4);
  binio::put_u32(os, kCheckpointVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& e : ckpt.tensors) {
    if (ad::numel(e.shape) != e.values.size()) {
      throw CheckpointError("tensor " + e.name + ": payload does not match its shape");
    }
    binio::put_str(os, e.name);
    binio::put_u8(os, static_cast<std::uint8_t>(e.role));
    binio::put_u8(os, kDtypeF64);
    binio::put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) binio::put_u64(os, d);
    for (double v : e.values) binio::put_f64(os, v);
  }
  binio::put_str(os, ckpt.config_echo);
  binio::put_u32(os, ckpt.epoch);
  return os.str();
}

Checkpoint deserialize(std::string_view bytes) {
  std::istringstream is(std::string(bytes), std::ios::binary);
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string_view(magic, 4) != "CDKD") {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = binio::get_u32(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto count = binio::get_u32(is);
  for (std::uint32_t t = 0; t < count; ++t) {
    Checkpoint::Entry e;
    e.name = binio::get_str(is, 4096);
    const auto role_bits = binio::get_u8(is);
    bool known = false;
    for (auto r : {model::Role::kBackbone, model::Role::kHead, model::Role::kSape,
                   model::Role::kEtht}) {
      if (static_cast<unsigned>(r) == role_bits) {
        e.role = r;
        known = true;
      }
    }
    if (!known) throw CheckpointError("tensor " + e.name + ": unknown role code");
    if (binio::get_u8(is) != kDtypeF64) {
      throw CheckpointError("tensor " + e.name + ": unsupported dtype");
    }
    const auto rank = binio::get_u32(is);
    if (rank > 8) throw CheckpointError("tensor " + e.name + ": rank out of range");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = binio::get_u64(is);
      if (dim == 0 || dim > (1ull << 32)) throw CheckpointError("tensor " + e.name + ": bad dim");
      e.shape.push_back(dim);
      n *= dim;
      if (n > (1ull << 32)) throw CheckpointError("tensor " + e.name + ": too large");
    }
    if (n * 8 > bytes.size()) throw CheckpointError("tensor " + e.name + ": truncated payload");
    e.values.resize(n);
    for (auto& v : e.values) v = binio::get_f64(is);
    ckpt.tensors.push_back(std::move(e));
  }
  ckpt.config_echo = binio::get_str(is);
  ckpt.epoch = binio::get_u32(is);
  if (is.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("trailing bytes after checkpoint");
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

void restore(const Checkpoint& ckpt, model::ParamSet& target, model::RoleSet roles) {
  for (const auto& e : ckpt.tensors) {
    if (roles.contains(e.role) && !target.contains(e.name)) {
      throw CheckpointError("checkpoint tensor " + e.name + " has no place in the model");
    }
  }
  for (const auto& [path, p] : target.entries()) {
    if (!roles.contains(p.role)) continue;
    const auto* e = ckpt.find(path);
    if (e == nullptr) throw CheckpointError("checkpoint is missing tensor " + path);
    if (e->role != p.role) throw CheckpointError("tensor " + path + ": role mismatch");
    if (e->shape != p.tensor.shape()) {
      throw CheckpointError("tensor " + path + ": checkpoint shape " + ad::to_string(e->shape) +
                            " vs model " + ad::to_string(p.tensor.shape()));
    }
    auto dst = target.get(path).mutable_values();
    std::copy(e->values.begin(), e->values.end(), dst.begin());
  }
}

Checkpoint strip(const Checkpoint& ckpt, model::RoleSet roles) {
  Checkpoint out = ckpt;
  std::erase_if(out.tensors, [&](const Checkpoint::Entry& e) { return roles.contains(e.role); });
  return out;
}

}  // namespace cdkd
