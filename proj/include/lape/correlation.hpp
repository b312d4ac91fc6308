#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lape/reparam.hpp"

namespace lape {

/// Pairwise cosine similarity of patch-token position vectors (class token
/// excluded), with the patch grid it came from.
struct CorrelationMatrix {
  Eigen::MatrixXd s;
  Index grid_h = 0;
  Index grid_w = 0;
  std::vector<Index> zero_rows;  // rows emitted as zeros

  Index tokens() const { return s.rows(); }
};

/// s_ij = <w_i, w_j> / (|w_i| |w_j|). Zero-norm rows produce zero rows and
/// columns and are listed in zero_rows instead of failing.
inline CorrelationMatrix cosine_similarity_matrix(const Eigen::Ref<const Eigen::MatrixXd>& rows, Index grid_h,
                                                  Index grid_w) {
  if (grid_h * grid_w != rows.rows())
    throw ContractError("cosine_similarity_matrix: " + std::to_string(rows.rows()) + " rows for a " +
                        std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  CorrelationMatrix c;
  c.grid_h = grid_h;
  c.grid_w = grid_w;
  const Index n = rows.rows();
  Eigen::VectorXd norms = rows.rowwise().norm();
  Eigen::MatrixXd unit = Eigen::MatrixXd::Zero(n, rows.cols());
  for (Index i = 0; i < n; ++i) {
    if (norms(i) == 0.0 || !std::isfinite(norms(i))) {
      c.zero_rows.push_back(i);
      continue;
    }
    unit.row(i) = rows.row(i) / norms(i);
  }
  c.s = unit * unit.transpose();
  return c;
}

/// Patch rows (1..N) of an absolute PE-like matrix, widened to double.
template <typename S>
Eigen::MatrixXd patch_rows(const Mat<S>& pe) {
  return pe.bottomRows(pe.rows() - 1).template cast<double>();
}

inline Index default_row_index(Index grid_h, Index grid_w) { return (grid_h / 2) * grid_w + grid_w / 2; }

/// Row `row_index` of s reshaped row-major to the H x W patch grid.
inline Eigen::MatrixXd row_heatmap(const CorrelationMatrix& c, Index row_index) {
  if (row_index < 0 || row_index >= c.tokens())
    throw ContractError("row_heatmap: row " + std::to_string(row_index) + " outside 0.." +
                        std::to_string(c.tokens() - 1));
  Eigen::MatrixXd out(c.grid_h, c.grid_w);
  for (Index r = 0; r < c.grid_h; ++r)
    for (Index col = 0; col < c.grid_w; ++col) out(r, col) = c.s(row_index, r * c.grid_w + col);
  return out;
}

/// Mean similarity over the 8-neighbourhood of `center` minus the mean over
/// all tokens; positive values mean local correlation.
inline double locality_score(const CorrelationMatrix& c, Index center) {
  const Index cr = center / c.grid_w;
  const Index cc = center % c.grid_w;
  double near = 0.0;
  int count = 0;
  for (Index dr = -1; dr <= 1; ++dr)
    for (Index dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const Index r = cr + dr;
      const Index col = cc + dc;
      if (r < 0 || r >= c.grid_h || col < 0 || col >= c.grid_w) continue;
      near += c.s(center, r * c.grid_w + col);
      ++count;
    }
  const double all = c.s.row(center).mean();
  return (count ? near / count : 0.0) - all;
}

struct CorrelationInvariants {
  double max_diag_error = 0.0;
  double max_asymmetry = 0.0;
  double max_bound_excess = 0.0;

  bool hold(double tol = 1e-9) const {
    return max_diag_error <= tol && max_asymmetry <= tol && max_bound_excess <= tol;
  }
};

/// Unit diagonal on nonzero rows, symmetry, entries within [-1, 1].
inline CorrelationInvariants check_invariants(const CorrelationMatrix& c) {
  CorrelationInvariants inv;
  for (Index i = 0; i < c.tokens(); ++i) {
    const bool zero = std::find(c.zero_rows.begin(), c.zero_rows.end(), i) != c.zero_rows.end();
    if (!zero) inv.max_diag_error = std::max(inv.max_diag_error, std::abs(c.s(i, i) - 1.0));
    for (Index j = 0; j < c.tokens(); ++j) {
      inv.max_asymmetry = std::max(inv.max_asymmetry, std::abs(c.s(i, j) - c.s(j, i)));
      inv.max_bound_excess = std::max(inv.max_bound_excess, std::abs(c.s(i, j)) - 1.0);
    }
  }
  return inv;
}

/// Binary greymap bytes: "P5\n<w> <h>\n255\n" then one byte per value,
/// round-half-up of clamp((v - lo) / (hi - lo)) * 255. NaN maps to 0.
std::string encode_pgm(const Eigen::Ref<const Eigen::MatrixXd>& values, double lo = -1.0, double hi = 1.0);
/// Writes encode_pgm(values) to `path`; throws IoError naming the path.
void write_pgm(const Eigen::Ref<const Eigen::MatrixXd>& values, const std::filesystem::path& path,
               double lo = -1.0, double hi = 1.0);

struct SweepLayer {
  Index layer = 0;
  double locality = 0.0;
  CorrelationMatrix correlation;
  std::filesystem::path image;
};

struct SweepResult {
  std::vector<SweepLayer> layers;
  std::vector<std::string> warnings;

  /// One `layer=<l> locality=<%.6f>` line per layer.
  std::string summary() const {
    std::string out;
    char buf[96];
    for (const auto& l : layers) {
      std::snprintf(buf, sizeof buf, "layer=%ld locality=%.6f\n", static_cast<long>(l.layer), l.locality);
      out += buf;
    }
    return out;
  }
};

/// Heatmap per layer carrying a position term: heatmap_<l>.pgm of the
/// `row_index` row of the correlation of effective_pe_term(model, l, mode).
template <typename S>
SweepResult layer_sweep(const Model<S>& m, PeTermMode mode, Index row_index, const std::filesystem::path& out_dir,
                        const Mat<S>* probe = nullptr) {
  const auto& c = m.config;
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());
  SweepResult result;
  for (Index l = 0; l < c.depth; ++l) {
    if (mode == PeTermMode::LaPE && !m.layers[static_cast<std::size_t>(l)].pe_transform) continue;
    const Mat<S> term = effective_pe_term(m, l, mode, probe);
    SweepLayer entry;
    entry.layer = l;
    entry.correlation = cosine_similarity_matrix(patch_rows(term), c.grid_h, c.grid_w);
    if (!entry.correlation.zero_rows.empty())
      result.warnings.push_back("layer " + std::to_string(l) + ": " +
                                std::to_string(entry.correlation.zero_rows.size()) +
                                " zero position vectors, emitted as zeros");
    entry.locality = locality_score(entry.correlation, row_index);
    entry.image = out_dir / ("heatmap_" + std::to_string(l) + ".pgm");
    write_pgm(row_heatmap(entry.correlation, row_index), entry.image);
    result.layers.push_back(std::move(entry));
  }
  return result;
}

}  // namespace lape
