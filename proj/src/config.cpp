#include "lape/config.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

namespace lape {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ContractError("config: bad value '" + std::string(v) + "' for key '" + std::string(key) + "'");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  // from_chars for double is not available everywhere; strtod is exact enough.
  std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw ContractError("config: bad value '" + s + "' for key '" + std::string(key) + "'");
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

}  // namespace

std::string to_string(PeKind kind) {
  switch (kind) {
    case PeKind::Sin1D: return "sin1d";
    case PeKind::Sin2D: return "sin2d";
    case PeKind::Learnable: return "learnable";
    case PeKind::Relative: return "relative";
    case PeKind::Zero: return "zero";
  }
  return "?";
}

std::string to_string(Strategy tag) {
  switch (tag) {
    case Strategy::Default: return "default";
    case Strategy::LaPE: return "lape";
    case Strategy::SharedPE: return "shared";
    case Strategy::UnsharedPE: return "unshared";
    case Strategy::RelativeDefault: return "relative_default";
    case Strategy::RelativeLaPE: return "relative_lape";
    case Strategy::Ablation: return "ablation";
  }
  return "?";
}

std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::Raw: return "raw";
    case AblationVariant::ScalarScale: return "scalar";
    case AblationVariant::ChannelScale: return "channel";
    case AblationVariant::ChannelAffine: return "channel_affine";
    case AblationVariant::Norm: return "norm";
    case AblationVariant::ScalarNorm: return "scalar_norm";
    case AblationVariant::ChannelNorm: return "channel_norm";
    case AblationVariant::ChannelNormAffine: return "channel_norm_affine";
  }
  return "?";
}

std::string to_string(const JoiningStrategy& j) {
  if (j.tag == Strategy::Ablation) return "ablation(" + to_string(j.variant) + ")";
  return to_string(j.tag);
}

PeKind parse_pe_kind(std::string_view s) {
  for (auto k : {PeKind::Sin1D, PeKind::Sin2D, PeKind::Learnable, PeKind::Relative, PeKind::Zero})
    if (to_string(k) == s) return k;
  throw ContractError("config: unknown pe_kind '" + std::string(s) + "'");
}

Strategy parse_strategy(std::string_view s) {
  for (auto t : {Strategy::Default, Strategy::LaPE, Strategy::SharedPE, Strategy::UnsharedPE,
                 Strategy::RelativeDefault, Strategy::RelativeLaPE, Strategy::Ablation})
    if (to_string(t) == s) return t;
  throw ContractError("config: unknown joining '" + std::string(s) + "'");
}

AblationVariant parse_ablation(std::string_view s) {
  for (auto v : kAllAblations)
    if (to_string(v) == s) return v;
  throw ContractError("config: unknown ablation '" + std::string(s) + "'");
}

void validate(const ModelConfig& c) {
  auto fail = [](const std::string& m) { throw ContractError("config: " + m); };
  if (c.dim <= 0 || c.depth <= 0 || c.heads <= 0 || c.mlp_ratio <= 0) fail("sizes must be positive");
  if (c.grid_h <= 0 || c.grid_w <= 0 || c.patch <= 0 || c.n_classes <= 0) fail("sizes must be positive");
  if (c.dim % c.heads != 0)
    fail("dim " + std::to_string(c.dim) + " not divisible by heads " + std::to_string(c.heads));
  if (c.eta < 0 || c.eta > c.depth)
    fail("eta " + std::to_string(c.eta) + " outside 0.." + std::to_string(c.depth));
  if (c.ln_eps < 0 || c.pe_ln_eps < 0) fail("layer norm eps must be non-negative");
  const bool relative_pe = c.pe_kind == PeKind::Relative;
  if (c.joining.relative() != relative_pe)
    fail("joining " + to_string(c.joining) + " is incompatible with pe_kind " + to_string(c.pe_kind));
  if (c.joining.tag == Strategy::UnsharedPE && c.pe_kind != PeKind::Learnable)
    fail("unshared PE needs pe_kind learnable");
  if (c.pe_kind == PeKind::Sin1D && c.dim % 2 != 0) fail("sin1d needs an even dim");
  if (c.pe_kind == PeKind::Sin2D && c.dim % 4 != 0) fail("sin2d needs dim divisible by 4");
}

void validate(const TrainConfig& c) {
  validate(c.model);
  if (c.data.image != c.model.image_h() || c.data.image != c.model.image_w() ||
      c.data.patch != c.model.patch)
    throw ContractError("config: dataset " + std::to_string(c.data.image) + "px / patch " +
                        std::to_string(c.data.patch) + " does not match the model grid " +
                        std::to_string(c.model.grid_h) + "x" + std::to_string(c.model.grid_w));
  if (c.data.n_classes != c.model.n_classes) throw ContractError("config: n_classes mismatch");
  if (c.data.image != 2 * (c.data.image / 2) || (c.data.image / 2) % c.data.patch != 0)
    throw ContractError("config: quadrants must be a whole number of patches");
  if (c.model.n_classes != 4) throw ContractError("config: the quadrant task has 4 classes");
  if (c.batch_size <= 0 || c.epochs < 0) throw ContractError("config: bad batch_size/epochs");
  if (c.learning_rate < 0) throw ContractError("config: learning_rate must be non-negative");
}

std::vector<std::string> config_warnings(const ModelConfig& c) {
  std::vector<std::string> out;
  if (c.joining.tag == Strategy::RelativeLaPE && c.heads == 1)
    out.push_back("relative LaPE with a single head normalizes one channel: the bias collapses to beta");
  if (c.joining.layer_adaptive() && c.eta == 0)
    out.push_back("eta = 0: no layer receives position information");
  return out;
}

TrainConfig parse_config(std::string_view text) {
  TrainConfig c;
  std::optional<Index> eta;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ContractError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view v = trim(line.substr(eq + 1));
    auto& m = c.model;
    if (key == "dim") m.dim = parse_number<Index>(key, v);
    else if (key == "depth") m.depth = parse_number<Index>(key, v);
    else if (key == "heads") m.heads = parse_number<Index>(key, v);
    else if (key == "mlp_ratio") m.mlp_ratio = parse_number<Index>(key, v);
    else if (key == "grid_h") m.grid_h = parse_number<Index>(key, v);
    else if (key == "grid_w") m.grid_w = parse_number<Index>(key, v);
    else if (key == "patch") m.patch = c.data.patch = parse_number<Index>(key, v);
    else if (key == "n_classes") m.n_classes = c.data.n_classes = parse_number<Index>(key, v);
    else if (key == "pe_kind") m.pe_kind = parse_pe_kind(v);
    else if (key == "joining") m.joining.tag = parse_strategy(v);
    else if (key == "ablation") m.joining.variant = parse_ablation(v);
    else if (key == "eta") eta = parse_number<Index>(key, v);
    else if (key == "eta_tail") {
      if (v == "plain") m.eta_tail = EtaTail::Plain;
      else if (v == "input_pe") m.eta_tail = EtaTail::InputPe;
      else throw ContractError("config: unknown eta_tail '" + std::string(v) + "'");
    } else if (key == "precision") {
      if (v == "f32") m.precision = Precision::F32;
      else if (v == "f64") m.precision = Precision::F64;
      else throw ContractError("config: unknown precision '" + std::string(v) + "'");
    } else if (key == "ln_eps") m.ln_eps = parse_double(key, v);
    else if (key == "pe_ln_eps") m.pe_ln_eps = parse_double(key, v);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "epochs") c.epochs = parse_number<int>(key, v);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, v);
    else if (key == "optimizer") {
      if (v == "sgd") c.optimizer = OptimizerKind::Sgd;
      else if (v == "adam") c.optimizer = OptimizerKind::Adam;
      else throw ContractError("config: unknown optimizer '" + std::string(v) + "'");
    } else if (key == "adam_beta1") c.adam_beta1 = parse_double(key, v);
    else if (key == "adam_beta2") c.adam_beta2 = parse_double(key, v);
    else if (key == "adam_eps") c.adam_eps = parse_double(key, v);
    else if (key == "n_train") c.data.n_train = parse_number<Index>(key, v);
    else if (key == "n_test") c.data.n_test = parse_number<Index>(key, v);
    else if (key == "image") c.data.image = parse_number<Index>(key, v);
    else if (key == "noise") c.data.noise = parse_double(key, v);
    else if (key == "out_dir") c.out_dir = std::string(v);
    else throw ContractError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  c.model.eta = eta.value_or(c.model.depth);
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const TrainConfig& c) {
  const auto& m = c.model;
  std::ostringstream os;
  os << "dim = " << m.dim << '\n'
     << "depth = " << m.depth << '\n'
     << "heads = " << m.heads << '\n'
     << "mlp_ratio = " << m.mlp_ratio << '\n'
     << "grid_h = " << m.grid_h << '\n'
     << "grid_w = " << m.grid_w << '\n'
     << "patch = " << m.patch << '\n'
     << "n_classes = " << m.n_classes << '\n'
     << "pe_kind = " << to_string(m.pe_kind) << '\n'
     << "joining = " << to_string(m.joining.tag) << '\n'
     << "ablation = " << to_string(m.joining.variant) << '\n'
     << "eta = " << m.eta << '\n'
     << "eta_tail = " << (m.eta_tail == EtaTail::Plain ? "plain" : "input_pe") << '\n'
     << "precision = " << (m.precision == Precision::F32 ? "f32" : "f64") << '\n'
     << "ln_eps = " << fmt_double(m.ln_eps) << '\n'
     << "pe_ln_eps = " << fmt_double(m.pe_ln_eps) << '\n'
     << "seed = " << c.seed << '\n'
     << "epochs = " << c.epochs << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "learning_rate = " << fmt_double(c.learning_rate) << '\n'
     << "optimizer = " << (c.optimizer == OptimizerKind::Adam ? "adam" : "sgd") << '\n'
     << "adam_beta1 = " << fmt_double(c.adam_beta1) << '\n'
     << "adam_beta2 = " << fmt_double(c.adam_beta2) << '\n'
     << "adam_eps = " << fmt_double(c.adam_eps) << '\n'
     << "n_train = " << c.data.n_train << '\n'
     << "n_test = " << c.data.n_test << '\n'
     << "image = " << c.data.image << '\n'
     << "noise = " << fmt_double(c.data.noise) << '\n'
     << "out_dir = " << c.out_dir << '\n';
  return os.str();
}

}  // namespace lape
