#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <string>
#include <vector>

#include "lape/encoder.hpp"

namespace lape {

struct BenchReport {
  Index n_images = 0;
  int runs = 0;
  bool logits_identical = true;
  double cache_build_seconds = 0.0;
  std::vector<double> cached_runs;    // seconds per image, one per run
  std::vector<double> uncached_runs;  // seconds per image, one per run

  double cached_median() const { return median(cached_runs); }
  double uncached_median() const { return median(uncached_runs); }
  std::string to_text() const;

  static double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

/// Single-image inference timing with and without the precomputed PE cache.
///
/// Logits of both modes are compared bitwise on every image first; a mismatch
/// throws ContractError. Each run then times every image in both modes, in
/// alternating order, so drift affects both equally.
template <typename S>
BenchReport benchmark_inference(const Model<S>& m, const Mat<S>& images, int runs = 3) {
  using clock = std::chrono::steady_clock;
  BenchReport report;
  report.n_images = images.rows();
  if (images.rows() == 0) return report;
  TapeScope<S> frozen(nullptr);
  const auto t0 = clock::now();
  const ModelPECache<S> cache = build_model_cache(m);
  report.cache_build_seconds = std::chrono::duration<double>(clock::now() - t0).count();

  for (Index i = 0; i < images.rows(); ++i) {
    const Mat<S> img = images.row(i);
    const Mat<S> a = model_forward(m, img, &cache).value();
    const Mat<S> b = model_forward(m, img).value();
    if (a.size() != b.size() || std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<std::size_t>(a.size())) != 0)
      throw ContractError("benchmark_inference: cached logits differ from recomputed logits on image " +
                          std::to_string(i));
  }

  std::vector<Mat<S>> rows;
  for (Index i = 0; i < images.rows(); ++i) rows.emplace_back(images.row(i));
  volatile S sink = 0;
  for (int r = 0; r < runs; ++r) {
    double cached = 0.0;
    double uncached = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (int k = 0; k < 2; ++k) {
        const bool use_cache = (k == 0) == (i % 2 == 0);
        const auto s = clock::now();
        const Tensor<S> out = model_forward(m, rows[i], use_cache ? &cache : nullptr);
        const double dt = std::chrono::duration<double>(clock::now() - s).count();
        sink = sink + out.value()(0, 0);
        (use_cache ? cached : uncached) += dt;
      }
    }
    report.cached_runs.push_back(cached / static_cast<double>(rows.size()));
    report.uncached_runs.push_back(uncached / static_cast<double>(rows.size()));
  }
  report.runs = runs;
  return report;
}

}  // namespace lape
