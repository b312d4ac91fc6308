#pragma once

#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "lape/attention.hpp"
#include "lape/config.hpp"
#include "lape/grad_check.hpp"

namespace lape {

/// PE-branch transform of one layer: a full layer norm (LaPE) or one of the
/// ablation replacements. gamma is a scalar tensor for the scalar variants.
template <typename S>
struct PeTransform {
  AblationVariant variant = AblationVariant::ChannelNormAffine;
  std::optional<Tensor<S>> gamma;
  std::optional<Tensor<S>> beta;
  S eps = S(1e-6);

  LayerNormParams<S> as_layer_norm() const { return {*gamma, *beta, eps}; }
};

template <typename S>
struct EncoderLayer {
  LayerNormParams<S> ln_attn;
  AttentionParams<S> attn;
  LayerNormParams<S> ln_mlp;
  Linear<S> fc1;
  Linear<S> fc2;
  std::optional<PeTransform<S>> pe_transform;  // l < eta under LaPE / ablations
  std::optional<Tensor<S>> rel_table;          // relative strategies
  std::optional<LayerNormParams<S>> rel_ln;    // relative LaPE, l < eta
  std::optional<Tensor<S>> pos_embed;          // unshared PE, l >= 1
};

template <typename S>
struct Model {
  ModelConfig config;
  Linear<S> patch_embed;
  Tensor<S> cls_token;
  PositionEmbedding<S> pe;
  std::vector<EncoderLayer<S>> layers;
  LayerNormParams<S> ln_final;
  Linear<S> head;
  std::vector<Index> rel_index;

  /// Every tensor of the model in a fixed order, trainable or not.
  void for_each_tensor(const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    auto lin = [&](const std::string& n, Linear<S>& p) {
      fn(n + ".weight", p.weight);
      fn(n + ".bias", p.bias);
    };
    auto ln = [&](const std::string& n, LayerNormParams<S>& p) {
      fn(n + ".gamma", p.gamma);
      fn(n + ".beta", p.beta);
    };
    lin("patch_embed", patch_embed);
    fn("cls_token", cls_token);
    if (pe.absolute) fn("pos_embed", *pe.absolute);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      ln(p + "ln_attn", L.ln_attn);
      lin(p + "attn.query", L.attn.query);
      lin(p + "attn.key", L.attn.key);
      lin(p + "attn.value", L.attn.value);
      lin(p + "attn.out", L.attn.out);
      ln(p + "ln_mlp", L.ln_mlp);
      lin(p + "fc1", L.fc1);
      lin(p + "fc2", L.fc2);
      if (L.pe_transform) {
        if (L.pe_transform->gamma) fn(p + "pe_ln.gamma", *L.pe_transform->gamma);
        if (L.pe_transform->beta) fn(p + "pe_ln.beta", *L.pe_transform->beta);
      }
      if (L.rel_table) fn(p + "rel_table", *L.rel_table);
      if (L.rel_ln) ln(p + "rel_ln", *L.rel_ln);
      if (L.pos_embed) fn(p + "pos_embed", *L.pos_embed);
    }
    ln("ln_final", ln_final);
    lin("head", head);
  }

  std::vector<NamedTensor<S>> state() {
    std::vector<NamedTensor<S>> out;
    for_each_tensor([&](const std::string& n, Tensor<S>& t) { out.push_back({n, t}); });
    return out;
  }

  std::vector<NamedTensor<S>> parameters() {
    std::vector<NamedTensor<S>> out;
    for_each_tensor([&](const std::string& n, Tensor<S>& t) {
      if (t.requires_grad()) out.push_back({n, t});
    });
    return out;
  }

  Index parameter_count() {
    Index n = 0;
    for (auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// PE added at layer l under the shared/unshared strategies.
  const Tensor<S>& layer_pe(Index l) const {
    if (config.joining.tag == Strategy::UnsharedPE && l > 0) return *layers[static_cast<std::size_t>(l)].pos_embed;
    return *pe.absolute;
  }
};

/// Extra trainable scalars a joining strategy adds over the default model.
inline Index count_extra_params(const ModelConfig& c) {
  const Index d = c.dim;
  switch (c.joining.tag) {
    case Strategy::LaPE:
      return 2 * d * c.eta;
    case Strategy::Ablation: {
      Index per_layer = 0;
      switch (c.joining.variant) {
        case AblationVariant::Raw:
        case AblationVariant::Norm: per_layer = 0; break;
        case AblationVariant::ScalarScale:
        case AblationVariant::ScalarNorm: per_layer = 1; break;
        case AblationVariant::ChannelScale:
        case AblationVariant::ChannelNorm: per_layer = d; break;
        case AblationVariant::ChannelAffine:
        case AblationVariant::ChannelNormAffine: per_layer = 2 * d; break;
      }
      return per_layer * c.eta;
    }
    case Strategy::UnsharedPE:
      return (c.depth - 1) * (c.tokens() + 1) * d;
    case Strategy::RelativeLaPE:
      return 2 * c.heads * c.eta;
    case Strategy::Default:
    case Strategy::SharedPE:
    case Strategy::RelativeDefault:
      return 0;
  }
  return 0;
}

namespace detail {

template <typename S>
Linear<S> init_linear(Index in, Index out, std::uint64_t seed, const std::string& name) {
  return {Tensor<S>(normal_matrix<S>(in, out, 0.02, derive_seed(seed, name + ".weight")), true),
          Tensor<S>::zeros({out}, true)};
}

template <typename S>
PeTransform<S> init_pe_transform(AblationVariant v, Index dim, S eps) {
  PeTransform<S> t;
  t.variant = v;
  t.eps = eps;
  switch (v) {
    case AblationVariant::Raw:
    case AblationVariant::Norm: break;
    case AblationVariant::ScalarScale:
    case AblationVariant::ScalarNorm: t.gamma = Tensor<S>::scalar(S(1), true); break;
    case AblationVariant::ChannelScale:
    case AblationVariant::ChannelNorm: t.gamma = Tensor<S>::ones({dim}, true); break;
    case AblationVariant::ChannelAffine:
    case AblationVariant::ChannelNormAffine:
      t.gamma = Tensor<S>::ones({dim}, true);
      t.beta = Tensor<S>::zeros({dim}, true);
      break;
  }
  return t;
}

}  // namespace detail

/// Builds a model with every tensor seeded from (seed, tensor name), so models
/// that differ only in strategy share their common parameters exactly.
template <typename S>
Model<S> init_model(const ModelConfig& c, std::uint64_t seed) {
  validate(c);
  Model<S> m;
  m.config = c;
  const Index n = c.tokens();
  const Index d = c.dim;
  m.patch_embed = detail::init_linear<S>(c.patch * c.patch, d, seed, "patch_embed");
  m.cls_token = Tensor<S>(Shape{d}, normal_matrix<S>(1, d, 0.02, derive_seed(seed, "cls_token")), true);
  switch (c.pe_kind) {
    case PeKind::Sin1D: m.pe = make_sinusoidal_1d<S>(n, d); break;
    case PeKind::Sin2D: m.pe = make_sinusoidal_2d<S>(c.grid_h, c.grid_w, d); break;
    case PeKind::Learnable: m.pe = make_learnable<S>(n, d, derive_seed(seed, "pos_embed")); break;
    case PeKind::Zero: m.pe = make_zero_pe<S>(n, d); break;
    case PeKind::Relative:
      m.pe.kind = PeKind::Relative;
      m.rel_index = relative_index_map(c.grid_h, c.grid_w);
      break;
  }
  m.pe.grid_h = c.grid_h;
  m.pe.grid_w = c.grid_w;
  const S ln_eps = static_cast<S>(c.ln_eps);
  const S pe_eps = static_cast<S>(c.pe_ln_eps);
  for (Index l = 0; l < c.depth; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    EncoderLayer<S> L;
    L.ln_attn = LayerNormParams<S>::identity(d, ln_eps);
    L.attn.query = detail::init_linear<S>(d, d, seed, p + "attn.query");
    L.attn.key = detail::init_linear<S>(d, d, seed, p + "attn.key");
    L.attn.value = detail::init_linear<S>(d, d, seed, p + "attn.value");
    L.attn.out = detail::init_linear<S>(d, d, seed, p + "attn.out");
    L.attn.heads = c.heads;
    L.ln_mlp = LayerNormParams<S>::identity(d, ln_eps);
    L.fc1 = detail::init_linear<S>(d, d * c.mlp_ratio, seed, p + "fc1");
    L.fc2 = detail::init_linear<S>(d * c.mlp_ratio, d, seed, p + "fc2");
    if (c.joining.layer_adaptive() && l < c.eta) {
      const auto v = c.joining.tag == Strategy::LaPE ? AblationVariant::ChannelNormAffine : c.joining.variant;
      L.pe_transform = detail::init_pe_transform<S>(v, d, pe_eps);
    }
    if (c.joining.relative()) {
      L.rel_table = *make_relative_table<S>(c.grid_h, c.grid_w, c.heads, derive_seed(seed, p + "rel_table"))
                         .relative_table;
      if (c.joining.tag == Strategy::RelativeLaPE && l < c.eta)
        L.rel_ln = LayerNormParams<S>::identity(c.heads, pe_eps);
    }
    if (c.joining.tag == Strategy::UnsharedPE && l > 0)
      L.pos_embed = *make_learnable<S>(n, d, derive_seed(seed, p + "pos_embed")).absolute;
    m.layers.push_back(std::move(L));
  }
  m.ln_final = LayerNormParams<S>::identity(d, ln_eps);
  m.head = detail::init_linear<S>(d, c.n_classes, seed, "head");
  return m;
}

/// Copies every tensor value (and trainability) into a model of another width.
template <typename T, typename S>
Model<T> model_cast(Model<S>& src) {
  ModelConfig c = src.config;
  c.precision = std::is_same_v<T, double> ? Precision::F64 : Precision::F32;
  Model<T> dst = init_model<T>(c, 0);
  auto from = src.state();
  auto to = dst.state();
  for (std::size_t i = 0; i < from.size(); ++i) {
    to[i].tensor.mutable_value() = from[i].tensor.value().template cast<T>();
    to[i].tensor.set_requires_grad(from[i].tensor.requires_grad());
  }
  return dst;
}

/// Copies values of identically named tensors from src into dst.
template <typename S>
void copy_shared_parameters(Model<S>& src, Model<S>& dst) {
  auto from = src.state();
  for (auto& t : dst.state()) {
    for (auto& f : from) {
      if (f.name == t.name && f.tensor.shape() == t.tensor.shape()) {
        t.tensor.mutable_value() = f.tensor.value();
        break;
      }
    }
  }
}

/// Value of the PE branch at one layer: LN_{w|l}(w) for LaPE, the ablation
/// replacement otherwise. LaPE uses the fused layer norm; the full-affine
/// ablation composes normalize, channel scale and bias and rounds identically.
template <typename S>
Tensor<S> apply_pe_transform(const Tensor<S>& omega, const PeTransform<S>& t, Strategy tag) {
  if (tag == Strategy::LaPE) return apply_pe_ln(omega, t.as_layer_norm());
  switch (t.variant) {
    case AblationVariant::Raw: return omega;
    case AblationVariant::ScalarScale: return scale_by(omega, *t.gamma);
    case AblationVariant::ChannelScale: return mul_channels(omega, *t.gamma);
    case AblationVariant::ChannelAffine: return add_bias(mul_channels(omega, *t.gamma), *t.beta);
    case AblationVariant::Norm: return normalize(omega, t.eps);
    case AblationVariant::ScalarNorm: return scale_by(normalize(omega, t.eps), *t.gamma);
    case AblationVariant::ChannelNorm: return mul_channels(normalize(omega, t.eps), *t.gamma);
    case AblationVariant::ChannelNormAffine:
      return add_bias(mul_channels(normalize(omega, t.eps), *t.gamma), *t.beta);
  }
  throw ContractError("apply_pe_transform: unknown variant");
}

/// Relative attention bias of one layer: the raw table for the default
/// joining, or the table normalized across its head channels (one token per
/// relative offset) for relative LaPE, gathered to heads x N x N.
template <typename S>
Tensor<S> rpe_attention_bias(const EncoderLayer<S>& layer, const std::vector<Index>& index_map, Index n_patches) {
  if (!layer.rel_table) throw ContractError("rpe_attention_bias: layer has no relative table");
  if (static_cast<Index>(index_map.size()) != n_patches * n_patches)
    throw ContractError("rpe_attention_bias: index map does not match the patch grid");
  if (layer.rel_ln) return gather_relative_bias(layer_norm(*layer.rel_table, *layer.rel_ln), index_map, n_patches);
  return gather_relative_bias(*layer.rel_table, index_map, n_patches);
}

/// Precomputed PE-side values of a frozen model.
template <typename S>
struct ModelPECache {
  PECache<S> absolute;  // per layer l < eta, layer-adaptive strategies
  PECache<S> relative;  // per layer, relative strategies
};

template <typename S>
ModelPECache<S> build_model_cache(const Model<S>& m) {
  TapeScope<S> frozen(nullptr);
  ModelPECache<S> cache;
  const auto& c = m.config;
  for (Index l = 0; l < c.depth; ++l) {
    const auto& L = m.layers[static_cast<std::size_t>(l)];
    if (L.pe_transform) {
      std::vector<Tensor<S>> sources{*m.pe.absolute};
      if (L.pe_transform->gamma) sources.push_back(*L.pe_transform->gamma);
      if (L.pe_transform->beta) sources.push_back(*L.pe_transform->beta);
      cache.absolute.push(apply_pe_transform(*m.pe.absolute, *L.pe_transform, c.joining.tag).detach(), sources);
    }
    if (L.rel_table) {
      std::vector<Tensor<S>> sources{*L.rel_table};
      if (L.rel_ln) {
        sources.push_back(L.rel_ln->gamma);
        sources.push_back(L.rel_ln->beta);
      }
      cache.relative.push(rpe_attention_bias(L, m.rel_index, c.tokens()).detach(), sources);
    }
  }
  return cache;
}

/// Intermediate values captured by model_forward.
template <typename S>
struct ForwardTrace {
  Index batch = 0;
  std::vector<Tensor<S>> layer_inputs;  // x_l, (B*T) x D
  std::vector<Tensor<S>> msa_inputs;    // value fed to MSA_l
};

/// Side inputs of one encoder block.
template <typename S>
struct BlockInputs {
  Index layer_index = 0;
  Index batch = 1;
  const Tensor<S>* omega = nullptr;      // PE for shared/unshared addition or the PE branch
  const Tensor<S>* pe_term = nullptr;    // precomputed PE-branch value
  const Tensor<S>* attn_bias = nullptr;  // relative bias, heads x N x N
};

/// One encoder layer: x_{l+1} = x_l + x_l' + x_l'' with the MSA input chosen
/// by the joining strategy.
template <typename S>
Tensor<S> block_forward(const Tensor<S>& x_in, const EncoderLayer<S>& layer, const ModelConfig& c,
                        const BlockInputs<S>& in, ForwardTrace<S>* trace = nullptr) {
  const Index l = in.layer_index;
  const auto tag = c.joining.tag;
  const bool adaptive_here = c.joining.layer_adaptive() && l < c.eta;
  if (adaptive_here != layer.pe_transform.has_value())
    throw ContractError("block_forward: layer " + std::to_string(l) +
                        " PE-branch parameters inconsistent with eta " + std::to_string(c.eta));
  if (in.attn_bias != nullptr && !c.joining.relative())
    throw ContractError("block_forward: attention bias given to absolute strategy " + to_string(c.joining));
  if (c.joining.relative() && in.attn_bias == nullptr)
    throw ContractError("block_forward: relative strategy needs an attention bias");

  Tensor<S> x = x_in;
  if (tag == Strategy::SharedPE || tag == Strategy::UnsharedPE) {
    if (in.omega == nullptr) throw ContractError("block_forward: shared/unshared PE needs w");
    x = add_per_sequence(x, *in.omega);
  }
  if (trace) trace->layer_inputs.push_back(x);

  Tensor<S> h = layer_norm(x, layer.ln_attn);
  if (adaptive_here) {
    if (in.pe_term != nullptr) {
      h = add_per_sequence(h, *in.pe_term);
    } else {
      if (in.omega == nullptr) throw ContractError("block_forward: LaPE layer needs w");
      h = add_per_sequence(h, apply_pe_transform(*in.omega, *layer.pe_transform, tag));
    }
  }
  if (trace) trace->msa_inputs.push_back(h);

  const Tensor<S> attn = msa_forward(h, layer.attn, in.batch, in.attn_bias);
  const Tensor<S> x1 = add(x, attn);
  const Tensor<S> mlp = linear(gelu(linear(layer_norm(x1, layer.ln_mlp), layer.fc1)), layer.fc2);
  return add(x1, mlp);
}

/// Splits B images (rows of H*W pixels, row-major) into (B*N) x (P*P) patches,
/// patches in row-major grid order, pixels row-major inside a patch.
template <typename S>
Mat<S> patchify(const Mat<S>& images, const ModelConfig& c) {
  const Index img_w = c.image_w();
  if (images.cols() != c.image_h() * img_w)
    throw ContractError("patchify: image of " + std::to_string(images.cols()) + " pixels does not match " +
                        std::to_string(c.grid_h) + "x" + std::to_string(c.grid_w) + " grid of " +
                        std::to_string(c.patch) + "px patches");
  const Index n = c.tokens();
  const Index p = c.patch;
  Mat<S> out(images.rows() * n, p * p);
  for (Index b = 0; b < images.rows(); ++b)
    for (Index gr = 0; gr < c.grid_h; ++gr)
      for (Index gc = 0; gc < c.grid_w; ++gc) {
        const Index row = b * n + gr * c.grid_w + gc;
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x) out(row, y * p + x) = images(b, (gr * p + y) * img_w + gc * p + x);
      }
  return out;
}

/// Class-token logits, B x n_classes. `cache` substitutes precomputed PE-side
/// values; results are bit-identical to recomputation.
template <typename S>
Tensor<S> model_forward(const Model<S>& m, const Mat<S>& images,
                        const std::type_identity_t<ModelPECache<S>>* cache = nullptr,
                        std::type_identity_t<ForwardTrace<S>>* trace = nullptr) {
  const auto& c = m.config;
  const Index batch = images.rows();
  if (batch == 0) throw ContractError("model_forward: empty batch");
  const Tensor<S> patches(patchify(images, c));
  const Tensor<S> alpha = linear(patches, m.patch_embed);
  Tensor<S> x = prepend_token(alpha, m.cls_token, batch);
  const auto tag = c.joining.tag;
  const bool input_pe =
      tag == Strategy::Default ||
      (c.joining.layer_adaptive() && c.eta_tail == EtaTail::InputPe && c.eta < c.depth);
  if (input_pe) x = add_per_sequence(x, *m.pe.absolute);
  if (trace) trace->batch = batch;

  for (Index l = 0; l < c.depth; ++l) {
    const auto& L = m.layers[static_cast<std::size_t>(l)];
    BlockInputs<S> in;
    in.layer_index = l;
    in.batch = batch;
    if (tag == Strategy::SharedPE || tag == Strategy::UnsharedPE) in.omega = &m.layer_pe(l);
    if (c.joining.layer_adaptive()) in.omega = &*m.pe.absolute;
    if (cache != nullptr && L.pe_transform) in.pe_term = &cache->absolute.at(l);
    Tensor<S> bias;
    if (L.rel_table) {
      bias = cache != nullptr ? cache->relative.at(l) : rpe_attention_bias(L, m.rel_index, c.tokens());
      in.attn_bias = &bias;
    }
    x = block_forward(x, L, c, in, trace);
  }
  const Tensor<S> cls = layer_norm(take_rows(x, c.tokens() + 1, 0), m.ln_final);
  return linear(cls, m.head);
}

}  // namespace lape
