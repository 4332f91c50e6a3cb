#pragma once

// Checkpoint file, little-endian:
//   "PLKC" | version u32 | config JSON (u32 length + bytes) | step u64
//   | tensor count u32 | { name (u32 length + bytes) | tensor record } ...
//   | velocity count u32 | { name | count u32 | f32[count] } ...
// Tensor records use the format of serialize.hpp.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "plka/config.hpp"
#include "plka/model.hpp"
#include "plka/optim.hpp"
#include "plka/serialize.hpp"

namespace plka {

inline constexpr std::array<char, 4> kCheckpointMagic = {'P', 'L', 'K', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::map<std::string, std::vector<float>> velocity;
};

inline Checkpoint make_checkpoint(const RunConfig& config, std::uint64_t step, const Model<float>& model,
                                  const SgdMomentum<float>& opt) {
  Checkpoint c;
  c.config = config;
  c.step = step;
  for (const auto& [name, t] : model.params()) c.tensors.emplace_back(name, t.detach());
  c.velocity = opt.velocity();
  return c;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  os.write(kCheckpointMagic.data(), 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_bytes(os, serialize(c.config));
  io::write_u64(os, c.step);
  io::write_u32(os, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    io::write_bytes(os, name);
    write_tensor(os, t);
  }
  io::write_u32(os, static_cast<std::uint32_t>(c.velocity.size()));
  for (const auto& [name, v] : c.velocity) {
    io::write_bytes(os, name);
    io::write_u32(os, static_cast<std::uint32_t>(v.size()));
    for (const float x : v) io::write_f32(os, x);
  }
  if (!os) throw IoError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw IoError("bad checkpoint magic");
  const auto version = io::read_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  try {
    c.config = parse_run_config(io::read_bytes(is));
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config: ") + e.what());
  }
  c.step = io::read_u64(is);
  const auto n = io::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = io::read_bytes(is, 1u << 12);
    c.tensors.emplace_back(std::move(name), read_tensor<float>(is));
  }
  const auto nv = io::read_u32(is);
  for (std::uint32_t i = 0; i < nv; ++i) {
    auto name = io::read_bytes(is, 1u << 12);
    const auto count = io::read_u32(is);
    if (count > (1u << 28)) throw IoError("velocity length exceeds limit");
    std::vector<float> v(count);
    for (auto& x : v) x = io::read_f32(is);
    c.velocity.emplace(std::move(name), std::move(v));
  }
  return c;
}

// Writes to a sibling temporary file and renames it into place.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, c);
    os.flush();
    if (!os) throw IoError("checkpoint write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename checkpoint into " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

// Copies the tensor table into a model built from the same config. Every
// model parameter must be present with a matching shape.
inline void restore_parameters(const Checkpoint& c, Model<float>& model) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : c.tensors) by_name[name] = &t;
  if (by_name.size() != c.tensors.size()) throw IoError("checkpoint has duplicate tensor names");
  for (auto& [name, param] : model.params()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint lacks tensor " + name);
    if (it->second->shape() != param.shape()) {
      throw IoError("checkpoint tensor " + name + " has shape " + shape_str(it->second->shape()) + ", expected " +
                    shape_str(param.shape()));
    }
    const auto src = it->second->data();
    auto dst = param.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (by_name.size() != model.params().size()) throw IoError("checkpoint has tensors the model does not use");
}

inline Model<float> model_from_checkpoint(const Checkpoint& c) {
  Rng rng(derive_seed(c.config.seed, Stream::kInit, {}));
  Model<float> model(c.config.model, rng);
  restore_parameters(c, model);
  return model;
}

}  // namespace plka
