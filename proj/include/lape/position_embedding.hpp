#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "lape/ops.hpp"
#include "lape/rng.hpp"

namespace lape {

/// Initialization scale of learnable PEs and relative bias tables.
inline constexpr double kPeInitStd = 0.02;

enum class PeKind {
  Sin1D,
  Sin2D,
  Learnable,
  Relative,
  Zero,  // all-zero, frozen absolute PE; the no-position baseline
};

/// Per-name seed so each tensor's initial values depend only on (seed, name).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (const unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t state = seed ^ h;
  return splitmix64(state);
}

template <typename S>
struct LayerNormParams {
  Tensor<S> gamma;
  Tensor<S> beta;
  S eps = S(1e-6);

  static LayerNormParams identity(Index channels, S eps, bool trainable = true) {
    return {Tensor<S>::ones({channels}, trainable), Tensor<S>::zeros({channels}, trainable), eps};
  }
};

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const LayerNormParams<S>& p) {
  return layer_norm(x, p.gamma, p.beta, p.eps);
}

/// Absolute matrix (class-token row first) or relative bias table.
template <typename S>
struct PositionEmbedding {
  PeKind kind = PeKind::Learnable;
  Index grid_h = 0;
  Index grid_w = 0;
  std::optional<Tensor<S>> absolute;        // (N + 1) x D
  std::optional<Tensor<S>> relative_table;  // (2H - 1)(2W - 1) x n_heads

  bool is_absolute() const { return absolute.has_value(); }
};

namespace detail {

/// Fills columns [col0, col0 + dim) of `row` with the 1-D sinusoid of `pos`.
template <typename S>
void sinusoid_into(Mat<S>& m, Index row, Index col0, Index dim, double pos) {
  for (Index i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
    m(row, col0 + 2 * i) = static_cast<S>(std::sin(pos / freq));
    m(row, col0 + 2 * i + 1) = static_cast<S>(std::cos(pos / freq));
  }
}

}  // namespace detail

/// 1-D sinusoid over patch positions 0..n_tokens-1; row 0 is the class token (zeros).
template <typename S>
PositionEmbedding<S> make_sinusoidal_1d(Index n_tokens, Index dim) {
  if (dim <= 0 || dim % 2 != 0)
    throw ContractError("make_sinusoidal_1d: embedding width must be even, got " + std::to_string(dim));
  Mat<S> m = Mat<S>::Zero(n_tokens + 1, dim);
  for (Index p = 0; p < n_tokens; ++p) detail::sinusoid_into(m, p + 1, 0, dim, static_cast<double>(p));
  PositionEmbedding<S> pe;
  pe.kind = PeKind::Sin1D;
  pe.grid_h = 1;
  pe.grid_w = n_tokens;
  pe.absolute = Tensor<S>(std::move(m));
  return pe;
}

/// Row index in the first D/2 channels, column index in the last D/2.
template <typename S>
PositionEmbedding<S> make_sinusoidal_2d(Index grid_h, Index grid_w, Index dim) {
  if (dim <= 0 || dim % 4 != 0)
    throw ContractError("make_sinusoidal_2d: embedding width must be divisible by 4, got " +
                        std::to_string(dim));
  const Index n = grid_h * grid_w;
  Mat<S> m = Mat<S>::Zero(n + 1, dim);
  for (Index r = 0; r < grid_h; ++r) {
    for (Index c = 0; c < grid_w; ++c) {
      const Index row = 1 + r * grid_w + c;
      detail::sinusoid_into(m, row, 0, dim / 2, static_cast<double>(r));
      detail::sinusoid_into(m, row, dim / 2, dim / 2, static_cast<double>(c));
    }
  }
  PositionEmbedding<S> pe;
  pe.kind = PeKind::Sin2D;
  pe.grid_h = grid_h;
  pe.grid_w = grid_w;
  pe.absolute = Tensor<S>(std::move(m));
  return pe;
}

template <typename S>
Mat<S> normal_matrix(Index rows, Index cols, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Mat<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
  return m;
}

/// Trainable (n_tokens + 1) x D matrix drawn from normal(0, 0.02^2).
template <typename S>
PositionEmbedding<S> make_learnable(Index n_tokens, Index dim, std::uint64_t seed) {
  PositionEmbedding<S> pe;
  pe.kind = PeKind::Learnable;
  pe.grid_h = 1;
  pe.grid_w = n_tokens;
  pe.absolute = Tensor<S>(normal_matrix<S>(n_tokens + 1, dim, kPeInitStd, seed), true);
  return pe;
}

template <typename S>
PositionEmbedding<S> make_zero_pe(Index n_tokens, Index dim) {
  PositionEmbedding<S> pe;
  pe.kind = PeKind::Zero;
  pe.grid_h = 1;
  pe.grid_w = n_tokens;
  pe.absolute = Tensor<S>(Mat<S>::Zero(n_tokens + 1, dim));
  return pe;
}

/// Relative offset of patch pair (i, j), encoded mixed-radix:
/// (drow + H - 1) * (2W - 1) + (dcol + W - 1).
inline Index relative_index(Index i, Index j, Index grid_h, Index grid_w) {
  const Index drow = i / grid_w - j / grid_w;
  const Index dcol = i % grid_w - j % grid_w;
  return (drow + grid_h - 1) * (2 * grid_w - 1) + (dcol + grid_w - 1);
}

/// Row-major N x N map of table rows for every patch pair.
inline std::vector<Index> relative_index_map(Index grid_h, Index grid_w) {
  const Index n = grid_h * grid_w;
  std::vector<Index> idx(static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      idx[static_cast<std::size_t>(i * n + j)] = relative_index(i, j, grid_h, grid_w);
  return idx;
}

template <typename S>
PositionEmbedding<S> make_relative_table(Index grid_h, Index grid_w, Index n_heads, std::uint64_t seed) {
  if (grid_h < 1 || grid_w < 1)
    throw ContractError("make_relative_table: grid must be at least 1x1");
  PositionEmbedding<S> pe;
  pe.kind = PeKind::Relative;
  pe.grid_h = grid_h;
  pe.grid_w = grid_w;
  pe.relative_table = Tensor<S>(
      normal_matrix<S>((2 * grid_h - 1) * (2 * grid_w - 1), n_heads, kPeInitStd, seed), true);
  return pe;
}

/// Independent per-layer layer norm of a PE matrix: each position row is
/// standardized, then the channel affine of `p` applied.
template <typename S>
Tensor<S> apply_pe_ln(const Tensor<S>& omega, const LayerNormParams<S>& p) {
  if (omega.cols() != p.gamma.size())
    throw DimensionError("apply_pe_ln: PE width " + std::to_string(omega.cols()) +
                         " vs layer norm width " + std::to_string(p.gamma.size()));
  return layer_norm(omega, p);
}

/// Frozen per-layer LN_{w|l}(w) values for inference. Reading an entry after
/// any source tensor has been mutated throws StaleCacheError.
template <typename S>
class PECache {
 public:
  struct Source {
    Tensor<S> tensor;
    std::uint64_t version;
  };

  PECache() = default;

  Index layers() const { return static_cast<Index>(entries_.size()); }
  bool empty() const { return entries_.empty(); }

  void push(Tensor<S> entry, std::vector<Tensor<S>> sources) {
    std::vector<Source> tracked;
    for (auto& s : sources) tracked.push_back({s, s.version()});
    entries_.push_back(std::move(entry));
    sources_.push_back(std::move(tracked));
  }

  bool fresh(Index layer) const {
    for (const auto& s : sources_.at(static_cast<std::size_t>(layer)))
      if (s.tensor.version() != s.version) return false;
    return true;
  }

  const Tensor<S>& at(Index layer) const {
    if (layer < 0 || layer >= layers())
      throw ContractError("PECache: no entry for layer " + std::to_string(layer));
    if (!fresh(layer))
      throw StaleCacheError("PECache: parameters of layer " + std::to_string(layer) +
                            " changed after the cache was built");
    return entries_[static_cast<std::size_t>(layer)];
  }

 private:
  std::vector<Tensor<S>> entries_;
  std::vector<std::vector<Source>> sources_;
};

/// cache[l] = apply_pe_ln(omega, params[l]) for l < eta.
template <typename S>
PECache<S> build_pe_cache(const Tensor<S>& omega, const std::vector<LayerNormParams<S>>& params, Index eta) {
  if (eta < 0 || eta > static_cast<Index>(params.size()))
    throw ContractError("build_pe_cache: eta " + std::to_string(eta) + " outside 0.." +
                        std::to_string(params.size()));
  TapeScope<S> frozen(nullptr);
  PECache<S> cache;
  for (Index l = 0; l < eta; ++l) {
    const auto& p = params[static_cast<std::size_t>(l)];
    cache.push(apply_pe_ln(omega, p).detach(), {omega, p.gamma, p.beta});
  }
  return cache;
}

}  // namespace lape
