#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lape/encoder.hpp"

namespace lape {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Named 32-bit tensors plus the training configuration as text.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t source_width = 32;  // bits of the model that was saved
  std::vector<StoredTensor> tensors;
  std::string config_text;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

/// "LAPE", u32 version, u32 count, per tensor (u32 name length, name, u32
/// rank, u64 dims, f32 values), then u32 source width, u32 config length and
/// the config text. All integers and floats little-endian.
std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename S>
Checkpoint make_checkpoint(Model<S>& m, const TrainConfig& config) {
  Checkpoint c;
  c.source_width = sizeof(S) * 8;
  c.config_text = to_text(config);
  for (auto& nt : m.state()) {
    StoredTensor t{nt.name, nt.tensor.shape(), {}};
    const auto& v = nt.tensor.value();
    t.data.reserve(static_cast<std::size_t>(v.size()));
    for (Index k = 0; k < v.size(); ++k) t.data.push_back(static_cast<float>(v.data()[k]));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

/// Rebuilds the model described by the stored config and fills every tensor
/// by name. Missing, extra or mis-shaped tensors raise ContractError.
template <typename S>
Model<S> restore_model(const Checkpoint& c, TrainConfig* config_out = nullptr) {
  TrainConfig tc = parse_config(c.config_text);
  tc.model.precision = sizeof(S) == 8 ? Precision::F64 : Precision::F32;
  Model<S> m = init_model<S>(tc.model, tc.seed);
  std::size_t matched = 0;
  for (auto& nt : m.state()) {
    const StoredTensor* t = c.find(nt.name);
    if (t == nullptr) throw ContractError("checkpoint lacks tensor " + nt.name);
    if (t->shape != nt.tensor.shape())
      throw ContractError("checkpoint tensor " + nt.name + " has shape " + shape_str(t->shape) + ", model expects " +
                          shape_str(nt.tensor.shape()));
    auto& v = nt.tensor.mutable_value();
    for (Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<S>(t->data[static_cast<std::size_t>(k)]);
    ++matched;
  }
  if (matched != c.tensors.size()) throw ContractError("checkpoint holds tensors the configured model does not have");
  if (config_out) *config_out = tc;
  return m;
}

}  // namespace lape
