#include "lape/checkpoint.hpp"

#include "lape/binary_io.hpp"

namespace lape {

std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "LAPE";
  io::put_u32(out, c.version);
  io::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (static_cast<Index>(t.data.size()) != numel(t.shape))
      throw ContractError("checkpoint tensor " + t.name + " holds " + std::to_string(t.data.size()) +
                          " values for shape " + shape_str(t.shape));
    io::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    io::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (const Index d : t.shape) io::put_u64(out, static_cast<std::uint64_t>(d));
    for (const float f : t.data) io::put_f32(out, f);
  }
  io::put_u32(out, c.source_width);
  io::put_u32(out, static_cast<std::uint32_t>(c.config_text.size()));
  out += c.config_text;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  io::Reader r(bytes, origin);
  if (r.str(4) != "LAPE") r.fail("not a checkpoint (bad magic)");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(c.version));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64();
      if (d != 0 && n > r.remaining() / d) r.fail("tensor " + t.name + " larger than the file");
      n *= d;
      t.shape.push_back(static_cast<Index>(d));
    }
    if (r.remaining() / 4 < n) r.fail("truncated data of tensor " + t.name);
    t.data.resize(n);
    for (auto& f : t.data) f = r.f32();
    c.tensors.push_back(std::move(t));
  }
  c.source_width = r.u32();
  c.config_text = r.str(r.u32());
  if (!r.done()) r.fail("trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace lape
