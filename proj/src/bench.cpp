#include "lape/bench.hpp"

#include <cstdio>

namespace lape {

std::string BenchReport::to_text() const {
  if (n_images == 0) return "n_images=0\n";
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "n_images=%ld runs=%d logits_identical=%s cache_build_us=%.3f\n",
                static_cast<long>(n_images), runs, logits_identical ? "yes" : "no", cache_build_seconds * 1e6);
  out += buf;
  for (int r = 0; r < runs; ++r) {
    std::snprintf(buf, sizeof buf, "run=%d cached_us=%.3f uncached_us=%.3f\n", r, cached_runs[r] * 1e6,
                  uncached_runs[r] * 1e6);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "median cached_us=%.3f uncached_us=%.3f ratio=%.4f\n", cached_median() * 1e6,
                uncached_median() * 1e6, uncached_median() > 0 ? cached_median() / uncached_median() : 0.0);
  out += buf;
  return out;
}

}  // namespace lape
