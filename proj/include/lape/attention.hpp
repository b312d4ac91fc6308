#pragma once

#include <cmath>
#include <vector>

#include "lape/position_embedding.hpp"

namespace lape {

/// Gathers a (heads x N x N) attention bias from a relative table using the
/// row-major N x N index map: bias[h][i][j] = table[idx(i, j)][h].
template <typename S>
Tensor<S> gather_relative_bias(const Tensor<S>& table, const std::vector<Index>& index_map, Index n) {
  detail::require(static_cast<Index>(index_map.size()) == n * n,
                  "gather_relative_bias: index map does not cover " + std::to_string(n) + "x" +
                      std::to_string(n) + " patch pairs");
  const Index heads = table.cols();
  Mat<S> out(heads * n, n);
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) {
        const Index row = index_map[static_cast<std::size_t>(i * n + j)];
        detail::require(row >= 0 && row < table.rows(), "gather_relative_bias: index outside table");
        out(h * n + i, j) = table.value()(row, h);
      }
  auto tn = table.node();
  return detail::emit<S>({heads, n, n}, std::move(out), {&table},
                         [tn, index_map, n, heads](const Mat<S>& g) {
                           Mat<S> gt = Mat<S>::Zero(tn->value.rows(), tn->value.cols());
                           for (Index h = 0; h < heads; ++h)
                             for (Index i = 0; i < n; ++i)
                               for (Index j = 0; j < n; ++j)
                                 gt(index_map[static_cast<std::size_t>(i * n + j)], h) += g(h * n + i, j);
                           detail::accumulate(*tn, gt);
                         });
}

/// Scaled dot-product attention over a batch of sequences, all heads at once.
///
/// q, k, v are (B*T) x D with heads occupying contiguous column blocks of
/// width D / heads. Per sequence and head, A = softmax(Q K^T / sqrt(dh) + bias)
/// with the optional (heads x (T-1) x (T-1)) bias added to patch-patch logits
/// only (row/column 0 is the class token). Returns concat_h(A V_h).
template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, Index batch,
                               Index heads, const Tensor<S>* bias = nullptr) {
  detail::require_same_shape(q, k, "multi_head_attention q/k");
  detail::require_same_shape(q, v, "multi_head_attention q/v");
  detail::require(batch > 0 && q.rows() % batch == 0 && heads > 0 && q.cols() % heads == 0,
                  "multi_head_attention: " + shape_str(q.shape()) + " does not split into " +
                      std::to_string(batch) + " sequences x " + std::to_string(heads) + " heads");
  const Index t = q.rows() / batch;
  const Index d = q.cols();
  const Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  if (bias != nullptr) {
    detail::require(bias->rows() == heads * (t - 1) && bias->cols() == t - 1,
                    "multi_head_attention: bias " + shape_str(bias->shape()) +
                        " does not cover patch-patch logits of " + std::to_string(heads) +
                        " heads x " + std::to_string(t - 1) + " patches");
  }

  const bool rec = detail::recording<S>({&q, &k, &v}) ||
                   (bias != nullptr && detail::recording<S>({bias}));
  std::vector<Mat<S>> probs;
  if (rec) probs.reserve(static_cast<std::size_t>(batch * heads));
  Mat<S> out(q.rows(), d);
  Mat<S> logits(t, t);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const auto qh = q.value().block(b * t, h * dh, t, dh);
      const auto kh = k.value().block(b * t, h * dh, t, dh);
      const auto vh = v.value().block(b * t, h * dh, t, dh);
      logits.noalias() = qh * kh.transpose();
      logits *= scale;
      if (bias != nullptr) logits.bottomRightCorner(t - 1, t - 1) += bias->value().middleRows(h * (t - 1), t - 1);
      for (Index i = 0; i < t; ++i) {
        const S m = logits.row(i).maxCoeff();
        S total = 0;
        for (Index j = 0; j < t; ++j) {
          logits(i, j) = std::exp(logits(i, j) - m);
          total += logits(i, j);
        }
        logits.row(i) /= total;
      }
      out.block(b * t, h * dh, t, dh).noalias() = logits * vh;
      if (rec) probs.push_back(logits);
    }
  }

  if (!rec) return Tensor<S>(q.shape(), std::move(out));
  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  auto bn = bias != nullptr ? bias->node() : nullptr;
  Tensor<S> dummy;
  const Tensor<S>& bias_ref = bias != nullptr ? *bias : dummy;
  return detail::emit<S>(
      q.shape(), std::move(out), {&q, &k, &v, &bias_ref},
      [qn, kn, vn, bn, probs = std::move(probs), batch, heads, t, dh, scale](const Mat<S>& g) {
        const Index rows = qn->value.rows();
        const Index d = qn->value.cols();
        Mat<S> gq = Mat<S>::Zero(rows, d);
        Mat<S> gk = Mat<S>::Zero(rows, d);
        Mat<S> gv = Mat<S>::Zero(rows, d);
        Mat<S> gb;
        if (bn && bn->requires_grad) gb = Mat<S>::Zero(bn->value.rows(), bn->value.cols());
        Mat<S> ga(t, t);
        Mat<S> gs(t, t);
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Mat<S>& a = probs[static_cast<std::size_t>(b * heads + h)];
            const auto go = g.block(b * t, h * dh, t, dh);
            const auto qh = qn->value.block(b * t, h * dh, t, dh);
            const auto kh = kn->value.block(b * t, h * dh, t, dh);
            const auto vh = vn->value.block(b * t, h * dh, t, dh);
            gv.block(b * t, h * dh, t, dh).noalias() += a.transpose() * go;
            ga.noalias() = go * vh.transpose();
            for (Index i = 0; i < t; ++i) {
              const S dot = ga.row(i).dot(a.row(i));
              gs.row(i) = a.row(i).cwiseProduct((ga.row(i).array() - dot).matrix());
            }
            if (gb.size() != 0) gb.middleRows(h * (t - 1), t - 1) += gs.bottomRightCorner(t - 1, t - 1);
            gs *= scale;
            gq.block(b * t, h * dh, t, dh).noalias() += gs * kh;
            gk.block(b * t, h * dh, t, dh).noalias() += gs.transpose() * qh;
          }
        }
        detail::accumulate(*qn, gq);
        detail::accumulate(*kn, gk);
        detail::accumulate(*vn, gv);
        if (gb.size() != 0) detail::accumulate(*bn, gb);
      });
}

template <typename S>
struct Linear {
  Tensor<S> weight;  // in x out
  Tensor<S> bias;    // out
};

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Linear<S>& p) {
  return add_bias(matmul(x, p.weight), p.bias);
}

template <typename S>
struct AttentionParams {
  Linear<S> query;
  Linear<S> key;
  Linear<S> value;
  Linear<S> out;
  Index heads = 1;
};

/// MSA over a batch: projections, per-head attention, output projection.
template <typename S>
Tensor<S> msa_forward(const Tensor<S>& x, const AttentionParams<S>& p, Index batch,
                      const Tensor<S>* bias = nullptr) {
  const Tensor<S> q = linear(x, p.query);
  const Tensor<S> k = linear(x, p.key);
  const Tensor<S> v = linear(x, p.value);
  return linear(multi_head_attention(q, k, v, batch, p.heads, bias), p.out);
}

}  // namespace lape
