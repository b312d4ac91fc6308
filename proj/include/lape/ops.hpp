#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "lape/tensor.hpp"

// Differentiable primitives. Every op computes its value eagerly and, when a
// tape is active and an input requires a gradient, records its backward rule.
namespace lape {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename S>
void require_channel_vector(const Tensor<S>& x, const Tensor<S>& v, const char* op) {
  require(v.size() == x.cols(), std::string(op) + ": channel vector of " +
                                    std::to_string(v.size()) + " entries for last axis " +
                                    std::to_string(x.cols()) + " of " + shape_str(x.shape()));
}

/// Token-wise standardization shared by every normalizing route, so fused and
/// composed layer norms round identically.
template <typename S>
void standardize_rows(const Mat<S>& x, S eps, Mat<S>& xhat, Vec<S>& inv_std) {
  const Index n = x.rows();
  const Index d = x.cols();
  xhat.resize(n, d);
  inv_std.resize(n);
  for (Index i = 0; i < n; ++i) {
    S mean = 0;
    for (Index j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<S>(d);
    S var = 0;
    for (Index j = 0; j < d; ++j) {
      const S c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    // A constant row with eps = 0 standardizes to zeros rather than 0/0.
    const S denom = std::sqrt(var + eps);
    const S inv = denom > S(0) ? S(1) / denom : S(0);
    inv_std(i) = inv;
    for (Index j = 0; j < d; ++j) xhat(i, j) = (x(i, j) - mean) * inv;
  }
}

/// d/dx of standardization given upstream gradient w.r.t. xhat.
template <typename S>
Mat<S> standardize_rows_backward(const Mat<S>& xhat, const Vec<S>& inv_std, const Mat<S>& gxhat) {
  const Index n = xhat.rows();
  const S d = static_cast<S>(xhat.cols());
  Mat<S> gx(n, xhat.cols());
  for (Index i = 0; i < n; ++i) {
    const S sum_g = gxhat.row(i).sum();
    const S sum_gx = gxhat.row(i).dot(xhat.row(i));
    gx.row(i) = (inv_std(i) / d) *
                (d * gxhat.row(i).array() - sum_g - xhat.row(i).array() * sum_gx).matrix();
  }
  return gx;
}

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2,
                  "matmul: rank-2 operands required, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                            " x " + shape_str(b.shape()));
  Mat<S> out = a.value() * b.value();
  auto an = a.node();
  auto bn = b.node();
  return detail::emit<S>({a.rows(), b.cols()}, std::move(out), {&a, &b},
                         [an, bn](const Mat<S>& g) {
                           if (an->requires_grad) detail::accumulate(*an, g * bn->value.transpose());
                           if (bn->requires_grad) detail::accumulate(*bn, an->value.transpose() * g);
                         });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require(a.rank() == 2, "transpose: rank-2 operand required, got " + shape_str(a.shape()));
  auto an = a.node();
  return detail::emit<S>({a.cols(), a.rows()}, a.value().transpose(), {&a},
                         [an](const Mat<S>& g) { detail::accumulate(*an, g.transpose()); });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  auto an = a.node();
  auto bn = b.node();
  return detail::emit<S>(a.shape(), a.value() + b.value(), {&a, &b}, [an, bn](const Mat<S>& g) {
    detail::accumulate(*an, g);
    detail::accumulate(*bn, g);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  auto an = a.node();
  auto bn = b.node();
  return detail::emit<S>(a.shape(), a.value() - b.value(), {&a, &b}, [an, bn](const Mat<S>& g) {
    detail::accumulate(*an, g);
    detail::accumulate(*bn, -g);
  });
}

/// Elementwise product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  auto an = a.node();
  auto bn = b.node();
  Mat<S> out = a.value().cwiseProduct(b.value());
  return detail::emit<S>(a.shape(), std::move(out), {&a, &b}, [an, bn](const Mat<S>& g) {
    if (an->requires_grad) detail::accumulate(*an, g.cwiseProduct(bn->value));
    if (bn->requires_grad) detail::accumulate(*bn, g.cwiseProduct(an->value));
  });
}

/// Multiplication by a constant.
template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto an = a.node();
  return detail::emit<S>(a.shape(), a.value() * c, {&a},
                         [an, c](const Mat<S>& g) { detail::accumulate(*an, g * c); });
}

/// Multiplication by a trainable one-element tensor (scalar weight).
template <typename S>
Tensor<S> scale_by(const Tensor<S>& x, const Tensor<S>& s) {
  detail::require(s.size() == 1, "scale_by: scalar weight required, got " + shape_str(s.shape()));
  auto xn = x.node();
  auto sn = s.node();
  Mat<S> out = x.value() * s.value()(0, 0);
  return detail::emit<S>(x.shape(), std::move(out), {&x, &s}, [xn, sn](const Mat<S>& g) {
    if (xn->requires_grad) detail::accumulate(*xn, g * sn->value(0, 0));
    if (sn->requires_grad) {
      Mat<S> gs(1, 1);
      gs(0, 0) = g.cwiseProduct(xn->value).sum();
      detail::accumulate(*sn, gs);
    }
  });
}

/// x + b with b broadcast along every row (bias addition).
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  detail::require_channel_vector(x, b, "add_bias");
  auto xn = x.node();
  auto bn = b.node();
  Mat<S> out = x.value();
  const auto bias = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.value().data(), b.size());
  for (Index i = 0; i < out.rows(); ++i) out.row(i) += bias;
  return detail::emit<S>(x.shape(), std::move(out), {&x, &b}, [xn, bn](const Mat<S>& g) {
    detail::accumulate(*xn, g);
    if (bn->requires_grad) {
      Mat<S> gb = g.colwise().sum();
      gb.resize(bn->value.rows(), bn->value.cols());
      detail::accumulate(*bn, gb);
    }
  });
}

/// Channel-wise scaling gamma * x, gamma broadcast along every row.
template <typename S>
Tensor<S> mul_channels(const Tensor<S>& x, const Tensor<S>& gamma) {
  detail::require_channel_vector(x, gamma, "mul_channels");
  auto xn = x.node();
  auto gn = gamma.node();
  Mat<S> out(x.rows(), x.cols());
  const S* gp = gamma.value().data();
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < out.cols(); ++j) out(i, j) = x.value()(i, j) * gp[j];
  return detail::emit<S>(x.shape(), std::move(out), {&x, &gamma}, [xn, gn](const Mat<S>& g) {
    const auto gv =
        Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(gn->value.data(), gn->value.size());
    if (xn->requires_grad) {
      Mat<S> gx = g;
      for (Index i = 0; i < gx.rows(); ++i) gx.row(i) = gx.row(i).cwiseProduct(gv);
      detail::accumulate(*xn, gx);
    }
    if (gn->requires_grad) {
      Mat<S> gg = g.cwiseProduct(xn->value).colwise().sum();
      gg.resize(gn->value.rows(), gn->value.cols());
      detail::accumulate(*gn, gg);
    }
  });
}

/// Token-wise standardization (x - E[x]) / sqrt(Var[x] + eps) along the last
/// axis, population variance, no affine part.
template <typename S>
Tensor<S> normalize(const Tensor<S>& x, S eps) {
  if (eps < 0) throw ContractError("normalize: eps must be non-negative");
  Mat<S> xhat;
  Vec<S> inv_std;
  detail::standardize_rows(x.value(), eps, xhat, inv_std);
  auto xn = x.node();
  if (!detail::recording<S>({&x})) return Tensor<S>(x.shape(), std::move(xhat));
  Mat<S> saved = xhat;
  return detail::emit<S>(x.shape(), std::move(xhat), {&x},
                         [xn, saved = std::move(saved), inv_std](const Mat<S>& g) {
                           detail::accumulate(*xn, detail::standardize_rows_backward(saved, inv_std, g));
                         });
}

/// Layer normalization over the last axis: gamma * standardize(x) + beta.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  detail::require_channel_vector(x, gamma, "layer_norm gamma");
  detail::require_channel_vector(x, beta, "layer_norm beta");
  if (eps < 0) throw ContractError("layer_norm: eps must be non-negative");
  Mat<S> xhat;
  Vec<S> inv_std;
  detail::standardize_rows(x.value(), eps, xhat, inv_std);
  const S* gp = gamma.value().data();
  const S* bp = beta.value().data();
  Mat<S> out(x.rows(), x.cols());
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) {
      const S scaled = xhat(i, j) * gp[j];
      out(i, j) = scaled + bp[j];
    }
  }
  if (!detail::recording<S>({&x, &gamma, &beta})) return Tensor<S>(x.shape(), std::move(out));
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::emit<S>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std](const Mat<S>& g) {
        if (gn->requires_grad) {
          Mat<S> gg = g.cwiseProduct(xhat).colwise().sum();
          gg.resize(gn->value.rows(), gn->value.cols());
          detail::accumulate(*gn, gg);
        }
        if (bn->requires_grad) {
          Mat<S> gb = g.colwise().sum();
          gb.resize(bn->value.rows(), bn->value.cols());
          detail::accumulate(*bn, gb);
        }
        if (xn->requires_grad) {
          const auto gv = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(gn->value.data(),
                                                                                gn->value.size());
          Mat<S> gxhat = g;
          for (Index i = 0; i < gxhat.rows(); ++i) gxhat.row(i) = gxhat.row(i).cwiseProduct(gv);
          detail::accumulate(*xn, detail::standardize_rows_backward(xhat, inv_std, gxhat));
        }
      });
}

/// Softmax along the last axis with max subtraction.
template <typename S>
Tensor<S> softmax_last(const Tensor<S>& x) {
  Mat<S> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const S m = x.value().row(i).maxCoeff();
    S total = 0;
    for (Index j = 0; j < x.cols(); ++j) {
      y(i, j) = std::exp(x.value()(i, j) - m);
      total += y(i, j);
    }
    y.row(i) /= total;
  }
  if (!detail::recording<S>({&x})) return Tensor<S>(x.shape(), std::move(y));
  auto xn = x.node();
  Mat<S> saved = y;
  return detail::emit<S>(x.shape(), std::move(y), {&x}, [xn, saved = std::move(saved)](const Mat<S>& g) {
    Mat<S> gx(saved.rows(), saved.cols());
    for (Index i = 0; i < saved.rows(); ++i) {
      const S dot = g.row(i).dot(saved.row(i));
      gx.row(i) = saved.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    detail::accumulate(*xn, gx);
  });
}

/// Exact GELU x * Phi(x) with Phi from the error function.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  const S inv_sqrt2 = S(1) / std::numbers::sqrt2_v<S>;
  Mat<S> y = x.value().unaryExpr([inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
  auto xn = x.node();
  return detail::emit<S>(x.shape(), std::move(y), {&x}, [xn, inv_sqrt2](const Mat<S>& g) {
    const S inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<S>;
    Mat<S> d = xn->value.unaryExpr([&](S v) {
      const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
      const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
      return cdf + v * pdf;
    });
    detail::accumulate(*xn, g.cwiseProduct(d));
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Mat<S> out(1, 1);
  out(0, 0) = x.value().sum();
  auto xn = x.node();
  return detail::emit<S>({}, std::move(out), {&x}, [xn](const Mat<S>& g) {
    detail::accumulate(*xn, Mat<S>::Constant(xn->value.rows(), xn->value.cols(), g(0, 0)));
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

/// Mean cross-entropy of row-wise logits against integer labels.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  detail::require(logits.rank() == 2 && logits.rows() == static_cast<Index>(labels.size()),
                  "cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                      shape_str(logits.shape()));
  const Index n = logits.rows();
  const Index c = logits.cols();
  Mat<S> prob(n, c);
  S loss = 0;
  for (Index i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= c) throw ContractError("cross_entropy: label out of range");
    const S m = logits.value().row(i).maxCoeff();
    S total = 0;
    for (Index j = 0; j < c; ++j) {
      prob(i, j) = std::exp(logits.value()(i, j) - m);
      total += prob(i, j);
    }
    prob.row(i) /= total;
    loss += -(logits.value()(i, label) - m - std::log(total));
  }
  Mat<S> out(1, 1);
  out(0, 0) = loss / static_cast<S>(n);
  auto ln = logits.node();
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::emit<S>({}, std::move(out), {&logits},
                         [ln, prob = std::move(prob), lab = std::move(lab)](const Mat<S>& g) {
                           Mat<S> gl = prob;
                           for (Index i = 0; i < gl.rows(); ++i) gl(i, lab[static_cast<std::size_t>(i)]) -= S(1);
                           gl *= g(0, 0) / static_cast<S>(gl.rows());
                           detail::accumulate(*ln, gl);
                         });
}

// ---- sequence-structured ops used by the encoder ----------------------------
// A batch of B sequences of T tokens is stored as (B*T) x D rows.

/// Prepends one shared token row to each of the B sequences in x.
template <typename S>
Tensor<S> prepend_token(const Tensor<S>& x, const Tensor<S>& token, Index batch) {
  detail::require(batch > 0 && x.rows() % batch == 0,
                  "prepend_token: " + std::to_string(x.rows()) + " rows not divisible into " +
                      std::to_string(batch) + " sequences");
  detail::require_channel_vector(x, token, "prepend_token");
  const Index n = x.rows() / batch;
  const Index d = x.cols();
  Mat<S> out(batch * (n + 1), d);
  const auto tok = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(token.value().data(), d);
  for (Index b = 0; b < batch; ++b) {
    out.row(b * (n + 1)) = tok;
    out.middleRows(b * (n + 1) + 1, n) = x.value().middleRows(b * n, n);
  }
  auto xn = x.node();
  auto tn = token.node();
  return detail::emit<S>({batch * (n + 1), d}, std::move(out), {&x, &token},
                         [xn, tn, batch, n](const Mat<S>& g) {
                           if (xn->requires_grad) {
                             Mat<S> gx(batch * n, g.cols());
                             for (Index b = 0; b < batch; ++b)
                               gx.middleRows(b * n, n) = g.middleRows(b * (n + 1) + 1, n);
                             detail::accumulate(*xn, gx);
                           }
                           if (tn->requires_grad) {
                             Mat<S> gt = Mat<S>::Zero(1, g.cols());
                             for (Index b = 0; b < batch; ++b) gt += g.row(b * (n + 1));
                             gt.resize(tn->value.rows(), tn->value.cols());
                             detail::accumulate(*tn, gt);
                           }
                         });
}

/// Adds a T x D per-position matrix to every sequence of a (B*T) x D batch.
template <typename S>
Tensor<S> add_per_sequence(const Tensor<S>& x, const Tensor<S>& pe) {
  detail::require(pe.cols() == x.cols() && pe.rows() > 0 && x.rows() % pe.rows() == 0,
                  "add_per_sequence: " + shape_str(pe.shape()) + " does not tile " +
                      shape_str(x.shape()));
  const Index t = pe.rows();
  const Index batch = x.rows() / t;
  Mat<S> out = x.value();
  for (Index b = 0; b < batch; ++b) out.middleRows(b * t, t) += pe.value();
  auto xn = x.node();
  auto pn = pe.node();
  return detail::emit<S>(x.shape(), std::move(out), {&x, &pe}, [xn, pn, t, batch](const Mat<S>& g) {
    detail::accumulate(*xn, g);
    if (pn->requires_grad) {
      Mat<S> gp = Mat<S>::Zero(t, g.cols());
      for (Index b = 0; b < batch; ++b) gp += g.middleRows(b * t, t);
      detail::accumulate(*pn, gp);
    }
  });
}

/// Row `offset` of each length-`stride` sequence: (B*stride) x D -> B x D.
template <typename S>
Tensor<S> take_rows(const Tensor<S>& x, Index stride, Index offset) {
  detail::require(stride > 0 && x.rows() % stride == 0 && offset >= 0 && offset < stride,
                  "take_rows: bad stride/offset for " + shape_str(x.shape()));
  const Index batch = x.rows() / stride;
  Mat<S> out(batch, x.cols());
  for (Index b = 0; b < batch; ++b) out.row(b) = x.value().row(b * stride + offset);
  auto xn = x.node();
  return detail::emit<S>({batch, x.cols()}, std::move(out), {&x},
                         [xn, stride, offset, batch](const Mat<S>& g) {
                           if (!xn->requires_grad) return;
                           Mat<S> gx = Mat<S>::Zero(xn->value.rows(), xn->value.cols());
                           for (Index b = 0; b < batch; ++b) gx.row(b * stride + offset) = g.row(b);
                           detail::accumulate(*xn, gx);
                         });
}

}  // namespace lape
