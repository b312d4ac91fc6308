#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lape/position_embedding.hpp"

namespace lape {

enum class Strategy {
  Default,
  LaPE,
  SharedPE,
  UnsharedPE,
  RelativeDefault,
  RelativeLaPE,
  Ablation,
};

/// Replacements of LN_{w|l}(w) on the PE branch.
enum class AblationVariant {
  Raw,                // w
  ScalarScale,        // g . w, g scalar
  ChannelScale,       // g * w
  ChannelAffine,      // g * w + b
  Norm,               // Norm(w)
  ScalarNorm,         // g . Norm(w)
  ChannelNorm,        // g * Norm(w)
  ChannelNormAffine,  // g * Norm(w) + b, i.e. a full layer norm
};

inline constexpr AblationVariant kAllAblations[] = {
    AblationVariant::Raw,      AblationVariant::ScalarScale, AblationVariant::ChannelScale,
    AblationVariant::ChannelAffine, AblationVariant::Norm,   AblationVariant::ScalarNorm,
    AblationVariant::ChannelNorm,   AblationVariant::ChannelNormAffine,
};

struct JoiningStrategy {
  Strategy tag = Strategy::LaPE;
  AblationVariant variant = AblationVariant::ChannelNormAffine;

  bool relative() const { return tag == Strategy::RelativeDefault || tag == Strategy::RelativeLaPE; }
  /// Strategies whose first eta layers carry a PE-side transform.
  bool layer_adaptive() const { return tag == Strategy::LaPE || tag == Strategy::Ablation; }
  bool operator==(const JoiningStrategy&) const = default;
};

enum class Precision { F32, F64 };

/// What layers at or beyond eta see under a layer-adaptive strategy.
enum class EtaTail {
  Plain,    // no PE injection; position reaches them through the residual stream
  InputPe,  // additionally add w once at the input when eta < L
};

struct ModelConfig {
  Index dim = 64;
  Index depth = 4;
  Index heads = 4;
  Index mlp_ratio = 2;
  Index grid_h = 4;
  Index grid_w = 4;
  Index patch = 7;
  Index n_classes = 4;
  PeKind pe_kind = PeKind::Learnable;
  JoiningStrategy joining{};
  Index eta = 4;
  EtaTail eta_tail = EtaTail::Plain;
  Precision precision = Precision::F32;
  double ln_eps = 1e-6;
  double pe_ln_eps = 1e-6;

  Index tokens() const { return grid_h * grid_w; }
  Index head_dim() const { return dim / heads; }
  Index image_h() const { return grid_h * patch; }
  Index image_w() const { return grid_w * patch; }
};

enum class OptimizerKind { Sgd, Adam };

struct DatasetSpec {
  Index n_train = 4000;
  Index n_test = 1000;
  Index image = 28;
  Index patch = 7;
  Index n_classes = 4;
  double noise = 0.1;
};

struct TrainConfig {
  ModelConfig model{};
  std::uint64_t seed = 0;
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  DatasetSpec data{};
  std::string out_dir = "out";
};

/// Throws ContractError describing the first violated constraint.
void validate(const ModelConfig& config);
void validate(const TrainConfig& config);

/// Non-fatal notes about degenerate but legal settings.
std::vector<std::string> config_warnings(const ModelConfig& config);

/// Parses `key = value` lines with `#` comments. Unknown keys and malformed
/// values raise ContractError; missing keys keep their defaults.
TrainConfig parse_config(std::string_view text);
TrainConfig load_config(const std::filesystem::path& path);
/// Canonical text form; parse_config(to_text(c)) reproduces c.
std::string to_text(const TrainConfig& config);

std::string to_string(PeKind kind);
std::string to_string(Strategy tag);
std::string to_string(AblationVariant variant);
std::string to_string(const JoiningStrategy& joining);
PeKind parse_pe_kind(std::string_view s);
Strategy parse_strategy(std::string_view s);
AblationVariant parse_ablation(std::string_view s);

}  // namespace lape
