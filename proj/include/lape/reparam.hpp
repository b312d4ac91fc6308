#pragma once

#include <cmath>
#include <vector>

#include "lape/encoder.hpp"

namespace lape {

/// Tokens whose standard deviation falls below this are treated as singular.
inline constexpr double kSingularSigma = 1e-9;

/// Split of LN(x~ + w) into token, position and bias parts with per-token
/// coefficients lambda1..3 (population standard deviations, no eps).
template <typename S>
struct LambdaDecomposition {
  Vec<S> lambda1, lambda2, lambda3;
  Vec<S> sigma_token, sigma_pe, sigma_sum;

  // lambda1 LN(x~) + lambda2 LN(w) + lambda3 beta
  Mat<S> term_token;
  Mat<S> term_pos;
  Mat<S> term_bias;

  // lambda1 gamma*Norm(x~) + lambda2 gamma*Norm(w) + beta
  Mat<S> term_token_separated;
  Mat<S> term_pos_separated;
  Mat<S> term_bias_separated;

  std::vector<Index> singular_tokens;  // sigma(x~ + w) below kSingularSigma
};

namespace detail {

template <typename S>
Vec<S> row_std(const Mat<S>& x) {
  Vec<S> out(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const S mean = x.row(i).sum() / static_cast<S>(x.cols());
    out(i) = std::sqrt((x.row(i).array() - mean).square().sum() / static_cast<S>(x.cols()));
  }
  return out;
}

template <typename S>
Mat<S> ln_value(const Mat<S>& x, const LayerNormParams<S>& p) {
  TapeScope<S> frozen(nullptr);
  return layer_norm(Tensor<S>(x), p).value();
}

template <typename S>
void require_pair(const Mat<S>& a, const Mat<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": token and PE matrices differ in shape");
}

}  // namespace detail

/// lambda1 = s(x~)/s(x~+w), lambda2 = s(w)/s(x~+w),
/// lambda3 = (s(x~+w) - s(x~) - s(w))/s(x~+w), per token.
/// Throws SingularTokenError on the first token with s(x~+w) < kSingularSigma.
template <typename S>
LambdaDecomposition<S> compute_lambdas(const Mat<S>& x_tilde, const Mat<S>& omega) {
  detail::require_pair(x_tilde, omega, "compute_lambdas");
  LambdaDecomposition<S> d;
  d.sigma_token = detail::row_std<S>(x_tilde);
  d.sigma_pe = detail::row_std<S>(omega);
  d.sigma_sum = detail::row_std<S>(x_tilde + omega);
  const Index n = x_tilde.rows();
  d.lambda1.resize(n);
  d.lambda2.resize(n);
  d.lambda3.resize(n);
  for (Index i = 0; i < n; ++i) {
    const S s = d.sigma_sum(i);
    if (s < S(kSingularSigma))
      throw SingularTokenError("compute_lambdas: token " + std::to_string(i) +
                                   " has vanishing standard deviation of x~ + w",
                               static_cast<long>(i));
    d.lambda1(i) = d.sigma_token(i) / s;
    d.lambda2(i) = d.sigma_pe(i) / s;
    d.lambda3(i) = (s - d.sigma_token(i) - d.sigma_pe(i)) / s;
  }
  return d;
}

/// Full decomposition of the MSA input LN_l(x~ + w), both groupings.
/// Singular tokens get zero coefficients and zero terms and are listed; rows
/// of a term whose own sigma vanishes (e.g. a constant token) are zero.
template <typename S>
LambdaDecomposition<S> decompose_msa_input(const Mat<S>& x_tilde, const Mat<S>& omega,
                                           const LayerNormParams<S>& ln) {
  detail::require_pair(x_tilde, omega, "decompose_msa_input");
  if (ln.gamma.size() != x_tilde.cols()) throw DimensionError("decompose_msa_input: layer norm width");
  const Index n = x_tilde.rows();
  const Index dim = x_tilde.cols();
  LambdaDecomposition<S> d;
  d.sigma_token = detail::row_std<S>(x_tilde);
  d.sigma_pe = detail::row_std<S>(omega);
  d.sigma_sum = detail::row_std<S>(x_tilde + omega);
  d.lambda1 = Vec<S>::Zero(n);
  d.lambda2 = Vec<S>::Zero(n);
  d.lambda3 = Vec<S>::Zero(n);
  for (Index i = 0; i < n; ++i) {
    const S s = d.sigma_sum(i);
    if (s < S(kSingularSigma)) {
      d.singular_tokens.push_back(i);
      continue;
    }
    d.lambda1(i) = d.sigma_token(i) / s;
    d.lambda2(i) = d.sigma_pe(i) / s;
    d.lambda3(i) = (s - d.sigma_token(i) - d.sigma_pe(i)) / s;
  }

  const Mat<S> ln_token = detail::ln_value(x_tilde, ln);
  const Mat<S> ln_pe = detail::ln_value(omega, ln);
  const LayerNormParams<S> bare{ln.gamma, Tensor<S>::zeros({dim}), ln.eps};
  const Mat<S> affine_token = detail::ln_value(x_tilde, bare);
  const Mat<S> affine_pe = detail::ln_value(omega, bare);
  const auto beta = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(ln.beta.value().data(), dim);

  d.term_token = Mat<S>::Zero(n, dim);
  d.term_pos = Mat<S>::Zero(n, dim);
  d.term_bias = Mat<S>::Zero(n, dim);
  d.term_token_separated = Mat<S>::Zero(n, dim);
  d.term_pos_separated = Mat<S>::Zero(n, dim);
  d.term_bias_separated = Mat<S>::Zero(n, dim);
  for (Index i = 0; i < n; ++i) {
    if (d.sigma_sum(i) < S(kSingularSigma)) continue;
    if (d.sigma_token(i) >= S(kSingularSigma)) {
      d.term_token.row(i) = d.lambda1(i) * ln_token.row(i);
      d.term_token_separated.row(i) = d.lambda1(i) * affine_token.row(i);
    }
    if (d.sigma_pe(i) >= S(kSingularSigma)) {
      d.term_pos.row(i) = d.lambda2(i) * ln_pe.row(i);
      d.term_pos_separated.row(i) = d.lambda2(i) * affine_pe.row(i);
    }
    d.term_bias.row(i) = d.lambda3(i) * beta;
    d.term_bias_separated.row(i) = beta;
  }
  return d;
}

struct IdentityCheck {
  double max_abs_error = 0.0;
  bool passed = false;
  std::vector<Index> excluded_tokens;
};

/// max |LN(x~ + w) - (lambda1 LN(x~) + lambda2 LN(w) + lambda3 beta)| over
/// non-singular tokens; passes iff below tol.
template <typename S>
IdentityCheck verify_decomposition_identity(const Mat<S>& x_tilde, const Mat<S>& omega,
                                            const LayerNormParams<S>& ln, double tol) {
  const auto d = decompose_msa_input(x_tilde, omega, ln);
  const Mat<S> direct = detail::ln_value<S>(x_tilde + omega, ln);
  const Mat<S> rebuilt = d.term_token + d.term_pos + d.term_bias;
  IdentityCheck out;
  out.excluded_tokens = d.singular_tokens;
  std::size_t next_excluded = 0;
  for (Index i = 0; i < direct.rows(); ++i) {
    if (next_excluded < out.excluded_tokens.size() && out.excluded_tokens[next_excluded] == i) {
      ++next_excluded;
      continue;
    }
    const double err = static_cast<double>((direct.row(i) - rebuilt.row(i)).cwiseAbs().maxCoeff());
    if (!(err <= out.max_abs_error)) out.max_abs_error = std::isnan(err) ? INFINITY : err;
  }
  out.passed = out.max_abs_error < tol;
  return out;
}

enum class PeTermMode { Default, LaPE };

/// Position term that feeds the MSA of `layer`, for correlation analysis.
///
/// LaPE mode returns the PE-branch value (LN_{w|l}(w) or its ablation
/// replacement) and needs no data. Default mode returns diag(lambda2) LN_l(w)
/// where lambda2 is averaged per token over the probe batch; x~ is the layer
/// input with the position embedding removed.
template <typename S>
Mat<S> effective_pe_term(const Model<S>& m, Index layer, PeTermMode mode, const Mat<S>* probe = nullptr) {
  const auto& c = m.config;
  if (layer < 0 || layer >= c.depth) throw ContractError("effective_pe_term: layer out of range");
  const auto& L = m.layers[static_cast<std::size_t>(layer)];
  TapeScope<S> frozen(nullptr);
  if (mode == PeTermMode::LaPE) {
    if (!L.pe_transform)
      throw ContractError("effective_pe_term: layer " + std::to_string(layer) + " has no PE branch under " +
                          to_string(c.joining));
    return apply_pe_transform(*m.pe.absolute, *L.pe_transform, c.joining.tag).value();
  }
  const auto tag = c.joining.tag;
  if (tag != Strategy::Default && tag != Strategy::SharedPE && tag != Strategy::UnsharedPE)
    throw ContractError("effective_pe_term: default mode needs a strategy that adds w to the token stream");
  if (probe == nullptr || probe->rows() == 0)
    throw ContractError("effective_pe_term: default mode needs a probe batch");

  ForwardTrace<S> trace;
  model_forward(m, *probe, nullptr, &trace);
  const Mat<S>& omega = m.layer_pe(layer).value();
  const Index t = c.tokens() + 1;
  const Mat<S>& x_all = trace.layer_inputs[static_cast<std::size_t>(layer)].value();
  const Vec<S> sigma_pe = detail::row_std<S>(omega);
  Vec<S> lambda2_sum = Vec<S>::Zero(t);
  for (Index b = 0; b < probe->rows(); ++b) {
    const Mat<S> x_tilde = x_all.middleRows(b * t, t) - omega;
    const Vec<S> sigma_sum = detail::row_std<S>(x_tilde + omega);
    for (Index i = 0; i < t; ++i)
      if (sigma_sum(i) >= S(kSingularSigma)) lambda2_sum(i) += sigma_pe(i) / sigma_sum(i);
  }
  const Vec<S> lambda2 = lambda2_sum / static_cast<S>(probe->rows());
  const Mat<S> ln_pe = detail::ln_value(omega, L.ln_attn);
  Mat<S> out = Mat<S>::Zero(t, c.dim);
  for (Index i = 0; i < t; ++i)
    if (sigma_pe(i) >= S(kSingularSigma)) out.row(i) = lambda2(i) * ln_pe.row(i);
  return out;
}

}  // namespace lape
