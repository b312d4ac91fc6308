#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "lape/tensor.hpp"

namespace lape {

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

struct GradCheckReport {
  bool passed = false;
  bool finite = true;
  double max_rel_error = 0.0;
  std::string worst_leaf;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t elements_checked = 0;
  std::string message;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h with h = 1e-5 * max(1, |x|).
///
/// The relative error of one element is |a - n| / max(|a|, |n|, abs_floor);
/// the floor keeps exactly-zero gradients from dividing finite-difference
/// round-off by zero. Non-finite function values fail the check.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<NamedTensor<double>> leaves, double rel_tol,
                                  double abs_floor = 1e-6) {
  GradCheckReport report;
  for (auto& leaf : leaves) {
    leaf.tensor.set_requires_grad(true);
    leaf.tensor.zero_grad();
  }

  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> loss = f();
    if (loss.size() != 1 || !std::isfinite(loss.item())) {
      report.finite = false;
      report.message = "function value is not a finite scalar";
      return report;
    }
    tape.backward(loss);
  }
  std::vector<Mat<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.tensor.grad());

  TapeScope<double> no_tape(nullptr);
  auto eval = [&]() {
    const double v = f().item();
    if (!std::isfinite(v)) report.finite = false;
    return v;
  };

  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& t = leaves[l].tensor;
    for (Index k = 0; k < t.size(); ++k) {
      const double x0 = t.value().data()[k];
      const double h = 1e-5 * std::max(1.0, std::abs(x0));
      t.mutable_value().data()[k] = x0 + h;
      const double fp = eval();
      t.mutable_value().data()[k] = x0 - h;
      const double fm = eval();
      t.mutable_value().data()[k] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[l].data()[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (!(rel <= report.max_rel_error)) {
        report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        report.worst_leaf = leaves[l].name;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  if (!report.finite) {
    report.message = "non-finite function value at a perturbed point";
    report.passed = false;
    return report;
  }
  report.passed = report.max_rel_error < rel_tol;
  return report;
}

}  // namespace lape
