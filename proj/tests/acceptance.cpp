// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lape/bench.hpp"
#include "lape/binary_io.hpp"
#include "lape/cli.hpp"
#include "lape/correlation.hpp"
#include "lape/grad_check.hpp"
#include "lape/train.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace lape;
using testing::bitwise_equal;
using testing::micro_config;
using testing::perturb_model;
using testing::random_images;
using testing::random_matrix;

namespace {

// Tolerances, fixed here and nowhere else.
constexpr double kIdentityTol = 1e-10;
constexpr double kLambdaSumTol = 1e-12;
constexpr double kGradRelTol = 1e-3;
constexpr double kToeplitzTol = 1e-9;
constexpr double kScaleTol = 1e-9;
constexpr double kZeroPeLow = 0.20;
constexpr double kZeroPeHigh = 0.35;
constexpr double kTrainedFloor = 0.90;

struct Outcome {
  bool pass = false;
  std::string detail;
};

const fs::path kWorkDir = fs::path(LAPE_BINARY_DIR) / "acceptance_runs";

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  if (out) *out = o.str();
  return code;
}

Outcome a1_param_count() {
  std::string out;
  const int code = cli({"count-params", "--config", std::string(LAPE_SOURCE_DIR) + "/configs/deit_ti_like.cfg"}, &out);
  while (!out.empty() && out.back() == '\n') out.pop_back();
  return {code == kExitOk && out == "4608", "count-params=" + out};
}

Outcome a2_decomposition() {
  double worst_identity = 0.0, worst_sum = 0.0;
  std::size_t excluded = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Mat<double> x = random_matrix(16, 32, derive_seed(s, "x"));
    const Mat<double> w = random_matrix(16, 32, derive_seed(s, "w"));
    LayerNormParams<double> ln = LayerNormParams<double>::identity(32, 0.0);
    ln.gamma.mutable_value() = random_matrix(1, 32, derive_seed(s, "gamma"));
    ln.beta.mutable_value() = random_matrix(1, 32, derive_seed(s, "beta"));
    const auto r = verify_decomposition_identity(x, w, ln, kIdentityTol);
    worst_identity = std::max(worst_identity, r.max_abs_error);
    excluded += r.excluded_tokens.size();
    const auto d = compute_lambdas(x, w);
    worst_sum = std::max(worst_sum, ((d.lambda1 + d.lambda2 + d.lambda3).array() - 1.0).abs().maxCoeff());
  }
  return {worst_identity < kIdentityTol && worst_sum < kLambdaSumTol && excluded == 0,
          "max_identity_error=" + fmt("%.3e", worst_identity) + " max_lambda_sum_error=" + fmt("%.3e", worst_sum)};
}

std::vector<JoiningStrategy> every_strategy() {
  std::vector<JoiningStrategy> out{{Strategy::Default},         {Strategy::LaPE},
                                   {Strategy::SharedPE},        {Strategy::UnsharedPE},
                                   {Strategy::RelativeDefault}, {Strategy::RelativeLaPE}};
  for (auto v : kAllAblations) out.push_back({Strategy::Ablation, v});
  return out;
}

Outcome a3_gradients() {
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& j : every_strategy()) {
    auto m = init_model<double>(micro_config(j.tag, j.variant), 29);
    perturb_model(m, 30);
    const Mat<double> img = random_images<double>(m.config, 2, 31);
    const std::vector<int> labels{0, 2};
    const auto r = grad_check([&] { return cross_entropy(model_forward(m, img), std::span<const int>(labels)); },
                              m.parameters(), kGradRelTol);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = to_string(j);
    }
    if (!r.passed) failed += " " + to_string(j);
  }
  return {failed.empty(), "strategies=" + std::to_string(every_strategy().size()) +
                              " max_rel_error=" + fmt("%.3e", worst) + " (" + worst_name + ")" +
                              (failed.empty() ? "" : " failed:" + failed)};
}

Outcome a4_equivalences() {
  std::vector<std::string> broken;
  {
    auto lape = init_model<double>(micro_config(Strategy::LaPE), 5);
    auto abl = init_model<double>(micro_config(Strategy::Ablation, AblationVariant::ChannelNormAffine), 5);
    perturb_model(lape, 6);
    perturb_model(abl, 6);
    const Mat<double> img = random_images<double>(lape.config, 8, 7);
    if (!bitwise_equal(model_forward(lape, img).value(), model_forward(abl, img).value()))
      broken.push_back("ablation-vs-lape");
  }
  {
    ModelConfig lc = micro_config(Strategy::LaPE);
    lc.eta = 0;
    ModelConfig nc = micro_config(Strategy::Default);
    nc.pe_kind = PeKind::Zero;
    auto lape = init_model<double>(lc, 8);
    auto nope = init_model<double>(nc, 8);
    perturb_model(lape, 9);
    perturb_model(nope, 9);
    const Mat<double> img = random_images<double>(lc, 8, 10);
    if (!bitwise_equal(model_forward(lape, img).value(), model_forward(nope, img).value()))
      broken.push_back("eta0-vs-no-pe");
  }
  {
    TrainConfig c;
    c.model.joining = {Strategy::LaPE};
    auto m = init_model<float>(c.model, 14);
    perturb_model(m, 15, 0.05);
    const auto cache = build_model_cache(m);
    const Mat<float> img = random_images<float>(m.config, 100, 16);
    for (Index i = 0; i < img.rows(); ++i) {
      const Mat<float> one = img.row(i);
      if (!bitwise_equal(model_forward(m, one, &cache).value(), model_forward(m, one).value())) {
        broken.push_back("cached-vs-uncached image " + std::to_string(i));
        break;
      }
    }
  }
  std::string detail = "checks=3";
  for (const auto& b : broken) detail += " broken:" + b;
  return {broken.empty(), detail};
}

Outcome a5_sinusoid() {
  const auto pe = make_sinusoidal_1d<double>(196, 192);
  const Eigen::MatrixXd rows = patch_rows(pe.absolute->value());
  const auto c = cosine_similarity_matrix(rows, 14, 14);
  double toeplitz = 0.0;
  for (Index i = 0; i + 1 < 196; ++i)
    for (Index j = 0; j + 1 < 196; ++j) toeplitz = std::max(toeplitz, std::abs(c.s(i, j) - c.s(i + 1, j + 1)));
  const auto inv = check_invariants(c);

  // Scaling the position vectors leaves their correlation unchanged, both raw
  // and after the per-layer normalization with identity affine at eps = 0.
  double scale = 0.0;
  for (double k : {1e-3, 0.5, 7.0, 1e3})
    scale = std::max(scale, (cosine_similarity_matrix(rows * k, 14, 14).s - c.s).cwiseAbs().maxCoeff());
  ModelConfig mc = micro_config(Strategy::LaPE);
  mc.pe_ln_eps = 0.0;
  auto m = init_model<double>(mc, 3);
  perturb_model(m, 4);
  const auto base = cosine_similarity_matrix(patch_rows(effective_pe_term(m, 1, PeTermMode::LaPE)), 2, 2);
  const Mat<double> omega = m.pe.absolute->value();
  for (double k : {1e-3, 0.5, 7.0, 1e3}) {
    m.pe.absolute->mutable_value() = k * omega;
    const auto scaled = cosine_similarity_matrix(patch_rows(effective_pe_term(m, 1, PeTermMode::LaPE)), 2, 2);
    scale = std::max(scale, (scaled.s - base.s).cwiseAbs().maxCoeff());
  }
  return {toeplitz < kToeplitzTol && inv.max_asymmetry < kToeplitzTol && scale < kScaleTol,
          "toeplitz=" + fmt("%.3e", toeplitz) + " asymmetry=" + fmt("%.3e", inv.max_asymmetry) +
              " scale=" + fmt("%.3e", scale)};
}

Outcome a6_position_necessity() {
  struct Arm {
    std::string name;
    Strategy tag;
    PeKind pe;
    double acc = 0.0;
    bool aborted = false;
  };
  std::vector<Arm> arms{{"zero_pe", Strategy::Default, PeKind::Zero},
                        {"default", Strategy::Default, PeKind::Learnable},
                        {"lape", Strategy::LaPE, PeKind::Learnable},
                        {"shared", Strategy::SharedPE, PeKind::Learnable}};
  std::string comparison;
  for (auto& a : arms) {
    TrainConfig c;
    c.model.joining = {a.tag};
    c.model.pe_kind = a.pe;
    c.out_dir = (kWorkDir / ("a6_" + a.name)).string();
    const auto run = run_training(c);
    a.acc = run.result.final_test_acc();
    a.aborted = run.result.aborted;
    comparison += a.name + " test_acc=" + fmt("%.4f", a.acc) + "\n";
    std::printf("  A6 %-8s test_acc=%.4f (%s)\n", a.name.c_str(), a.acc, run.metrics_path.c_str());
    std::fflush(stdout);
  }
  io::write_file(kWorkDir / "a6_comparison.log", comparison);
  bool ok = !arms[0].aborted && arms[0].acc >= kZeroPeLow && arms[0].acc <= kZeroPeHigh;
  std::string detail;
  for (std::size_t i = 1; i < arms.size(); ++i) ok = ok && !arms[i].aborted && arms[i].acc >= kTrainedFloor;
  for (const auto& a : arms) detail += a.name + "=" + fmt("%.4f", a.acc) + " ";
  detail.pop_back();
  return {ok, detail};
}

Outcome a7_benchmark() {
  TrainConfig c;
  c.model.joining = {Strategy::LaPE};
  auto m = init_model<float>(c.model, 21);
  const auto data = make_quadrant_set(c.data, 1000, 22);
  const auto r = benchmark_inference(m, data.images, 3);
  return {r.logits_identical && r.cached_median() <= r.uncached_median(),
          "cached_median=" + fmt("%.6f", r.cached_median()) + "s uncached_median=" + fmt("%.6f", r.uncached_median()) +
              "s logits_identical=" + (r.logits_identical ? "yes" : "no")};
}

Outcome a8_viz() {
  const std::string cfg = std::string(LAPE_SOURCE_DIR) + "/configs/toy_lape.cfg";
  const fs::path first = kWorkDir / "a8_first", second = kWorkDir / "a8_second";
  fs::remove_all(first);
  fs::remove_all(second);
  const int c1 = cli({"viz", "--config", cfg, "--seed", "7", "--out", first.string()});
  const int c2 = cli({"viz", "--config", cfg, "--seed", "7", "--out", second.string()});
  if (c1 != kExitOk || c2 != kExitOk) return {false, "viz exit codes " + std::to_string(c1) + "," + std::to_string(c2)};
  std::size_t images = 0;
  std::string mismatch;
  for (const auto& e : fs::directory_iterator(first)) {
    if (e.path().extension() != ".pgm") continue;
    ++images;
    const fs::path twin = second / e.path().filename();
    if (!fs::exists(twin) || io::read_file(e.path()) != io::read_file(twin)) mismatch += " " + e.path().filename().string();
  }

  // Same model in process: every matrix behind the images satisfies the invariants.
  TrainConfig tc = load_config(cfg);
  const auto m = init_model<float>(tc.model, 7);
  const fs::path third = kWorkDir / "a8_inprocess";
  const auto sweep = layer_sweep(m, PeTermMode::LaPE, default_row_index(tc.model.grid_h, tc.model.grid_w), third);
  bool invariants = !sweep.layers.empty();
  for (const auto& l : sweep.layers) {
    invariants = invariants && check_invariants(l.correlation).hold();
    if (io::read_file(l.image) != io::read_file(first / l.image.filename())) mismatch += " inprocess:" + l.image.filename().string();
  }
  return {images > 0 && mismatch.empty() && invariants,
          "images=" + std::to_string(images) + " invariants=" + (invariants ? "hold" : "violated") +
              (mismatch.empty() ? "" : " mismatched:" + mismatch)};
}

}  // namespace

int main() {
  fs::create_directories(kWorkDir);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1", a1_param_count}, {"A2", a2_decomposition},       {"A3", a3_gradients}, {"A4", a4_equivalences},
      {"A5", a5_sinusoid},    {"A6", a6_position_necessity}, {"A7", a7_benchmark}, {"A8", a8_viz}};
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s %s (%.1fs)\n", id.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
