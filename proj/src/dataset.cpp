#include "lape/dataset.hpp"

#include <numeric>

#include "lape/binary_io.hpp"

namespace lape {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

void check_spec(const DatasetSpec& s) {
  if (s.n_classes != 4) throw ContractError("quadrant dataset needs n_classes = 4");
  if (s.patch <= 0 || s.image % s.patch != 0)
    throw ContractError("dataset image " + std::to_string(s.image) + " is not a multiple of patch " +
                        std::to_string(s.patch));
  if ((s.image / s.patch) % 2 != 0) throw ContractError("dataset patch grid must have even side");
  if (!(s.noise >= 0.0)) throw ContractError("dataset noise must be non-negative");
}

}  // namespace

Dataset make_quadrant_set(const DatasetSpec& spec, Index n, std::uint64_t seed) {
  check_spec(spec);
  if (n < 0) throw ContractError("dataset size must be non-negative");
  Dataset d;
  d.image = spec.image;
  d.images.resize(n, spec.image * spec.image);
  d.labels.resize(static_cast<std::size_t>(n));
  Rng rng(seed);
  for (Index i = 0; i < n; ++i) d.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % spec.n_classes);
  for (Index i = n - 1; i > 0; --i)
    std::swap(d.labels[static_cast<std::size_t>(i)],
              d.labels[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i) + 1))]);

  const Index half = spec.image / spec.patch / 2;
  for (Index i = 0; i < n; ++i) {
    const int label = d.labels[static_cast<std::size_t>(i)];
    const Index pr = (label / 2) * half + static_cast<Index>(rng.below(static_cast<std::uint64_t>(half)));
    const Index pc = (label % 2) * half + static_cast<Index>(rng.below(static_cast<std::uint64_t>(half)));
    for (Index y = 0; y < spec.image; ++y)
      for (Index x = 0; x < spec.image; ++x) {
        const bool in_block = y / spec.patch == pr && x / spec.patch == pc;
        const double v = (in_block ? 1.0 : 0.0) + rng.normal(0.0, spec.noise);
        d.images(i, y * spec.image + x) = static_cast<float>(v);
      }
  }
  return d;
}

DatasetSplit gen_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  return {make_quadrant_set(spec, spec.n_train, derive_seed(seed, "train")),
          make_quadrant_set(spec, spec.n_test, derive_seed(seed, "test"))};
}

std::pair<Index, Index> locate_block(const Dataset& d, Index i, Index patch) {
  const Index grid = d.image / patch;
  double best = -1e300;
  std::pair<Index, Index> at{0, 0};
  for (Index r = 0; r < grid; ++r)
    for (Index c = 0; c < grid; ++c) {
      double s = 0.0;
      for (Index y = 0; y < patch; ++y)
        for (Index x = 0; x < patch; ++x) s += d.images(i, (r * patch + y) * d.image + c * patch + x);
      if (s > best) {
        best = s;
        at = {r * patch, c * patch};
      }
    }
  return at;
}

std::string encode_dataset(const Dataset& d) {
  std::string out = "LAPD";
  io::put_u32(out, kDatasetVersion);
  io::put_u32(out, static_cast<std::uint32_t>(d.image));
  io::put_u64(out, static_cast<std::uint64_t>(d.size()));
  for (Index i = 0; i < d.size(); ++i) {
    io::put_u32(out, static_cast<std::uint32_t>(d.labels[static_cast<std::size_t>(i)]));
    for (Index k = 0; k < d.images.cols(); ++k) io::put_f32(out, d.images(i, k));
  }
  return out;
}

Dataset decode_dataset(const std::string& bytes, const std::string& origin) {
  io::Reader r(bytes, origin);
  if (r.str(4) != "LAPD") r.fail("not a dataset file (bad magic)");
  if (r.u32() != kDatasetVersion) r.fail("unsupported dataset version");
  Dataset d;
  d.image = r.u32();
  const std::uint64_t n = r.u64();
  const std::uint64_t per = 4 + 4 * static_cast<std::uint64_t>(d.image * d.image);
  if (per == 0 || r.remaining() / per < n) r.fail("truncated");
  d.images.resize(static_cast<Index>(n), d.image * d.image);
  d.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    d.labels[i] = static_cast<int>(r.u32());
    for (Index k = 0; k < d.images.cols(); ++k) d.images(static_cast<Index>(i), k) = r.f32();
  }
  if (!r.done()) r.fail("trailing bytes");
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) { io::write_file(path, encode_dataset(d)); }

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path), path.string()); }

}  // namespace lape
