#include "lape/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include "lape/bench.hpp"
#include "lape/binary_io.hpp"
#include "lape/correlation.hpp"
#include "lape/train.hpp"

namespace lape {

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::optional<Index> row;
  std::string mode;
  Index n_images = -1;
  int runs = 3;
};

constexpr Index kDefaultProbe = 64;

TrainConfig resolve_config(const Options& o) {
  TrainConfig c = o.config.empty() ? TrainConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  return c;
}

/// Model from --checkpoint when given, else freshly initialized from the config.
template <typename S>
Model<S> obtain_model(const Options& o, TrainConfig& c) {
  if (o.checkpoint.empty()) return init_model<S>(c.model, c.seed);
  TrainConfig stored;
  Model<S> m = restore_model<S>(load_checkpoint(o.checkpoint), &stored);
  stored.seed = c.seed;
  stored.out_dir = c.out_dir;
  c = stored;
  return m;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Mat<double> probe_images(const TrainConfig& c, Index n) {
  return make_quadrant_set(c.data, n, derive_seed(c.seed, "probe")).images.cast<double>();
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const TrainConfig c = resolve_config(o);
  for (const auto& w : config_warnings(c.model)) err << "warning: " << w << "\n";
  const RunSummary run = run_training(c, [&](const std::string& line) { out << line << "\n" << std::flush; });
  out << "checkpoint=" << run.checkpoint_path.string() << "\n";
  if (run.result.aborted) {
    err << "error: " << run.result.diagnostic << "\n";
    return kExitContract;
  }
  return kExitOk;
}

template <typename S>
int eval_at(const Options& o, TrainConfig& c, std::ostream& out) {
  const Model<S> m = obtain_model<S>(o, c);
  const Dataset test = make_quadrant_set(c.data, c.data.n_test, derive_seed(c.seed, "test"));
  out << "test_acc=" << fmt("%.4f", evaluate_accuracy(m, test)) << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  TrainConfig c = resolve_config(o);
  if (!o.checkpoint.empty()) c.model = parse_config(load_checkpoint(o.checkpoint).config_text).model;
  if (c.model.precision == Precision::F64) return eval_at<double>(o, c, out);
  return eval_at<float>(o, c, out);
}

/// Random-draw check of the decomposition identity at eps = 0.
std::string identity_section(const TrainConfig& c) {
  Rng rng(derive_seed(c.seed, "identity"));
  const Index n = c.model.tokens();
  const Index d = c.model.dim;
  double max_err = 0.0;
  double max_sum_err = 0.0;
  const int draws = 100;
  for (int k = 0; k < draws; ++k) {
    Mat<double> x(n, d), w(n, d);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    LayerNormParams<double> ln{Tensor<double>::zeros({d}), Tensor<double>::zeros({d}), 0.0};
    for (Index i = 0; i < d; ++i) {
      ln.gamma.mutable_value()(0, i) = rng.normal(1.0, 0.1);
      ln.beta.mutable_value()(0, i) = rng.normal(0.0, 0.1);
    }
    const auto check = verify_decomposition_identity(x, w, ln, 1e-10);
    max_err = std::max(max_err, check.max_abs_error);
    const auto dec = decompose_msa_input(x, w, ln);
    max_sum_err = std::max(max_sum_err, ((dec.lambda1 + dec.lambda2 + dec.lambda3).array() - 1.0).abs().maxCoeff());
  }
  return "identity draws=" + std::to_string(draws) + " tokens=" + std::to_string(n) + " dim=" + std::to_string(d) +
         " max_abs_error=" + fmt("%.3e", max_err) + " max_lambda_sum_error=" + fmt("%.3e", max_sum_err) + "\n";
}

int cmd_analyze(const Options& o, std::ostream& out) {
  TrainConfig c = resolve_config(o);
  c.model.precision = Precision::F64;
  const Model<double> m = obtain_model<double>(o, c);
  const Index n_probe = o.n_images > 0 ? o.n_images : kDefaultProbe;
  const Mat<double> probe = probe_images(c, n_probe);
  const auto tag = c.model.joining.tag;
  std::ostringstream rep;
  rep << "strategy=" << to_string(c.model.joining) << " pe=" << to_string(c.model.pe_kind)
      << " depth=" << c.model.depth << " eta=" << c.model.eta << " seed=" << c.seed
      << " probe=" << n_probe << " lambda=min/mean/max"
      << (o.checkpoint.empty() ? " weights=init" : " weights=checkpoint") << "\n";
  rep << identity_section(c);

  ForwardTrace<double> trace;
  {
    TapeScope<double> frozen(nullptr);
    model_forward(m, probe, nullptr, &trace);
  }
  const Index t = c.model.tokens() + 1;
  for (Index l = 0; l < c.model.depth; ++l) {
    const auto& L = m.layers[static_cast<std::size_t>(l)];
    const Mat<double>& x = trace.layer_inputs[static_cast<std::size_t>(l)].value();
    rep << "layer=" << l;
    if (tag == Strategy::Default || tag == Strategy::SharedPE || tag == Strategy::UnsharedPE) {
      const Mat<double>& w = m.layer_pe(l).value();
      LayerNormParams<double> exact = L.ln_attn;
      exact.eps = 0.0;
      std::vector<double> lam[3];
      double id_err = 0;
      std::size_t singular = 0;
      for (Index b = 0; b < n_probe; ++b) {
        const Mat<double> x_tilde = x.middleRows(b * t, t) - w;
        const auto dec = decompose_msa_input(x_tilde, w, exact);
        for (Index i = 0; i < t; ++i) {
          if (dec.sigma_sum(i) < kSingularSigma) continue;
          lam[0].push_back(dec.lambda1(i));
          lam[1].push_back(dec.lambda2(i));
          lam[2].push_back(dec.lambda3(i));
        }
        singular += dec.singular_tokens.size();
        id_err = std::max(id_err, verify_decomposition_identity(x_tilde, w, exact, 1.0).max_abs_error);
      }
      for (int k = 0; k < 3; ++k) {
        const auto& v = lam[k];
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        rep << " lambda" << k + 1 << "=" << fmt("%.6f", *lo) << "/" << fmt("%.6f", mean) << "/" << fmt("%.6f", *hi);
      }
      rep << " singular=" << singular << " identity_error=" << fmt("%.3e", id_err) << "\n";
    } else if (L.pe_transform) {
      TapeScope<double> frozen(nullptr);
      const Mat<double> token = layer_norm(Tensor<double>(x), L.ln_attn).value();
      const Mat<double> pe = apply_pe_transform(*m.pe.absolute, *L.pe_transform, tag).value();
      const double token_norm = token.rowwise().norm().mean();
      const double pe_norm = pe.rowwise().norm().mean();
      rep << " token_norm=" << fmt("%.6f", token_norm) << " pe_norm=" << fmt("%.6f", pe_norm)
          << " pe_share=" << fmt("%.6f", pe_norm / (token_norm + pe_norm)) << "\n";
    } else {
      rep << " no absolute position term\n";
    }
  }
  out << rep.str();
  if (!o.out.empty()) io::write_file(std::filesystem::path(o.out) / "analysis.txt", rep.str());
  return kExitOk;
}

int cmd_viz(const Options& o, std::ostream& out, std::ostream& err) {
  TrainConfig c = resolve_config(o);
  c.model.precision = Precision::F64;
  const Model<double> m = obtain_model<double>(o, c);
  const std::filesystem::path dir = o.out.empty() ? std::filesystem::path(c.out_dir) / "viz" : std::filesystem::path(o.out);
  const Index row = o.row.value_or(default_row_index(c.model.grid_h, c.model.grid_w));
  if (row < 0 || row >= c.model.tokens())
    throw ContractError("--row " + std::to_string(row) + " outside 0.." + std::to_string(c.model.tokens() - 1));
  std::string mode = o.mode;
  if (mode.empty()) mode = c.model.joining.layer_adaptive() ? "lape" : "default";

  std::string summary;
  if (mode == "raw") {
    if (!m.pe.absolute) throw ContractError("viz: raw mode needs an absolute position embedding");
    const auto corr = cosine_similarity_matrix(patch_rows(m.pe.absolute->value()), c.model.grid_h, c.model.grid_w);
    if (!corr.zero_rows.empty()) err << "warning: " << corr.zero_rows.size() << " zero position vectors\n";
    write_pgm(row_heatmap(corr, row), dir / "heatmap_raw.pgm");
    summary = "layer=raw locality=" + fmt("%.6f", locality_score(corr, row)) + "\n";
  } else if (mode == "lape" || mode == "default") {
    const Mat<double> probe = probe_images(c, o.n_images > 0 ? o.n_images : kDefaultProbe);
    const auto sweep = layer_sweep(m, mode == "lape" ? PeTermMode::LaPE : PeTermMode::Default, row, dir, &probe);
    for (const auto& w : sweep.warnings) err << "warning: " << w << "\n";
    summary = sweep.summary();
  } else {
    throw ContractError("viz: unknown mode '" + mode + "' (lape, default, raw)");
  }
  io::write_file(dir / "summary.txt", summary);
  out << summary;
  return kExitOk;
}

int cmd_count(const Options& o, std::ostream& out) {
  const TrainConfig c = resolve_config(o);
  validate(c.model);
  out << count_extra_params(c.model) << "\n";
  return kExitOk;
}

template <typename S>
int bench_at(const Options& o, TrainConfig& c, std::ostream& out) {
  const Model<S> m = obtain_model<S>(o, c);
  const Index n = o.n_images >= 0 ? o.n_images : 1000;
  const Mat<S> images = make_quadrant_set(c.data, n, derive_seed(c.seed, "bench")).images.template cast<S>();
  out << benchmark_inference(m, images, o.runs).to_text();
  return kExitOk;
}

int cmd_bench(const Options& o, std::ostream& out) {
  TrainConfig c = resolve_config(o);
  if (!o.checkpoint.empty()) c.model = parse_config(load_checkpoint(o.checkpoint).config_text).model;
  if (o.runs < 1) throw ContractError("--runs must be at least 1");
  if (c.model.precision == Precision::F64) return bench_at<double>(o, c, out);
  return bench_at<float>(o, c, out);
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  const TrainConfig c = resolve_config(o);
  const DatasetSplit d = gen_dataset(c.data, c.seed);
  const std::filesystem::path dir(c.out_dir);
  save_dataset(d.train, dir / "train.bin");
  save_dataset(d.test, dir / "test.bin");
  out << "train=" << (dir / "train.bin").string() << " n=" << d.train.size() << "\n"
      << "test=" << (dir / "test.bin").string() << " n=" << d.test.size() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-adaptive position embedding toolkit", "lape"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Config file (key = value lines)");
    sub->add_option("--seed", o.seed, "Override the config seed");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto* train = app.add_subcommand("train", "Train on the quadrant task, write metrics.log and model.ckpt");
  common(train);
  auto* eval = app.add_subcommand("eval", "Test accuracy of a checkpoint");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  auto* analyze = app.add_subcommand("analyze", "Lambda decomposition report and identity check");
  common(analyze);
  analyze->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default: initialized model)");
  analyze->add_option("--n-images", o.n_images, "Probe images");
  auto* viz = app.add_subcommand("viz", "Position-correlation heatmaps per layer");
  common(viz);
  viz->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default: initialized model)");
  viz->add_option("--row", o.row, "Token whose correlation row is drawn (default: grid center)");
  viz->add_option("--mode", o.mode, "lape, default or raw");
  viz->add_option("--n-images", o.n_images, "Probe images for default mode");
  auto* count = app.add_subcommand("count-params", "Extra parameters of the joining strategy");
  common(count);
  auto* bench = app.add_subcommand("bench", "Inference time with and without the PE cache");
  common(bench);
  bench->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default: initialized model)");
  bench->add_option("--n-images", o.n_images, "Images to time (default 1000)");
  bench->add_option("--runs", o.runs, "Timed runs; the median is reported");
  auto* gen = app.add_subcommand("gen-data", "Write the quadrant train/test sets");
  common(gen);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (!args.empty()) err << "error: " << e.what() << "\n";
    err << app.help();
    return kExitContract;
  }

  try {
    if (train->parsed()) return cmd_train(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out);
    if (analyze->parsed()) return cmd_analyze(o, out);
    if (viz->parsed()) return cmd_viz(o, out, err);
    if (count->parsed()) return cmd_count(o, out);
    if (bench->parsed()) return cmd_bench(o, out);
    if (gen->parsed()) return cmd_gen_data(o, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitContract;
  }
  err << app.help();
  return kExitContract;
}

}  // namespace lape
