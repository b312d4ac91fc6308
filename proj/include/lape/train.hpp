#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lape/checkpoint.hpp"
#include "lape/dataset.hpp"

namespace lape {

/// SGD or Adam (no weight decay, no schedule) over a fixed parameter list.
template <typename S>
class Optimizer {
 public:
  Optimizer(std::vector<NamedTensor<S>> params, const TrainConfig& c)
      : params_(std::move(params)),
        kind_(c.optimizer),
        lr_(c.learning_rate),
        beta1_(c.adam_beta1),
        beta2_(c.adam_beta2),
        eps_(c.adam_eps) {
    if (kind_ == OptimizerKind::Adam) {
      for (const auto& p : params_) {
        m_.push_back(Mat<S>::Zero(p.tensor.rows(), p.tensor.cols()));
        v_.push_back(Mat<S>::Zero(p.tensor.rows(), p.tensor.cols()));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++t_;
    if (lr_ == 0.0) return;
    const S lr = static_cast<S>(lr_);
    if (kind_ == OptimizerKind::Sgd) {
      for (auto& p : params_)
        if (p.tensor.has_grad()) p.tensor.mutable_value() -= lr * p.tensor.grad();
      return;
    }
    const S b1 = static_cast<S>(beta1_);
    const S b2 = static_cast<S>(beta2_);
    const S c1 = static_cast<S>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const S c2 = static_cast<S>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    const S eps = static_cast<S>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      if (!p.has_grad()) continue;
      const Mat<S>& g = p.grad();
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseAbs2();
      auto& w = p.mutable_value();
      w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }

  const std::vector<NamedTensor<S>>& params() const { return params_; }

 private:
  std::vector<NamedTensor<S>> params_;
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::vector<Mat<S>> m_, v_;
  long t_ = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double test_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  bool aborted = false;
  std::string diagnostic;

  double final_test_acc() const { return epochs.empty() ? 0.0 : epochs.back().test_acc; }
};

/// `epoch=<e> loss=<%.6f> test_acc=<%.4f>`
inline std::string format_epoch(const EpochMetrics& e) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "epoch=%d loss=%.6f test_acc=%.4f", e.epoch, e.loss, e.test_acc);
  return buf;
}

/// Rows of `d.images` at `idx`, widened to S.
template <typename S>
Mat<S> gather_images(const Dataset& d, const std::vector<Index>& idx, std::size_t begin, std::size_t end) {
  Mat<S> out(static_cast<Index>(end - begin), d.images.cols());
  for (std::size_t i = begin; i < end; ++i)
    out.row(static_cast<Index>(i - begin)) = d.images.row(idx[i]).template cast<S>();
  return out;
}

/// Classification accuracy on `d`, evaluated in fixed-size batches without a tape.
template <typename S>
double evaluate_accuracy(const Model<S>& m, const Dataset& d, Index batch = 250) {
  if (d.size() == 0) return 0.0;
  TapeScope<S> frozen(nullptr);
  std::vector<Index> idx(static_cast<std::size_t>(d.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  Index correct = 0;
  for (Index b = 0; b < d.size(); b += batch) {
    const auto end = static_cast<std::size_t>(std::min(d.size(), b + batch));
    const Mat<S> logits = model_forward(m, gather_images<S>(d, idx, static_cast<std::size_t>(b), end)).value();
    for (Index r = 0; r < logits.rows(); ++r) {
      Index arg = 0;
      logits.row(r).maxCoeff(&arg);
      if (arg == d.labels[static_cast<std::size_t>(b + r)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Mini-batch training on cross-entropy of class-token logits, reshuffling the
/// training set each epoch from a stream derived from the config seed. On a
/// non-finite loss the parameters are rolled back to their last finite state
/// and the result is marked aborted.
template <typename S>
TrainResult train_model(Model<S>& m, const Dataset& train, const Dataset& test, const TrainConfig& c,
                        const TrainHooks& hooks = {}) {
  validate(c);
  if (train.size() == 0) throw ContractError("train_model: empty training set");
  if (train.image != c.model.image_h() || train.image != c.model.image_w())
    throw ContractError("train_model: dataset images are " + std::to_string(train.image) + "px, model expects " +
                        std::to_string(c.model.image_h()) + "px");
  TrainResult result;
  auto params = m.parameters();
  Optimizer<S> opt(params, c);
  std::vector<Mat<S>> last_good;
  Rng rng(derive_seed(c.seed, "shuffle"));
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const auto bs = static_cast<std::size_t>(c.batch_size);

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t end = std::min(order.size(), b + bs);
      const Mat<S> images = gather_images<S>(train, order, b, end);
      std::vector<int> labels;
      for (std::size_t i = b; i < end; ++i) labels.push_back(train.labels[static_cast<std::size_t>(order[i])]);

      Tape<S> tape;
      TapeScope<S> scope(tape);
      const Tensor<S> loss = cross_entropy(model_forward(m, images), std::span<const int>(labels));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        if (!last_good.empty())
          for (std::size_t k = 0; k < params.size(); ++k) params[k].tensor.mutable_value() = last_good[k];
        result.aborted = true;
        result.diagnostic = "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(b / bs) + "; parameters rolled back to the last finite step";
        return result;
      }
      last_good.clear();
      for (const auto& p : params) last_good.push_back(p.tensor.value());
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      loss_sum += value * static_cast<double>(end - b);
      seen += end - b;
    }
    EpochMetrics e{epoch, loss_sum / static_cast<double>(seen), evaluate_accuracy(m, test)};
    result.epochs.push_back(e);
    if (hooks.on_epoch) hooks.on_epoch(e);
  }
  return result;
}

struct RunSummary {
  TrainResult result;
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
};

/// Generates the dataset, trains at the configured width, writes
/// <out_dir>/metrics.log and <out_dir>/model.ckpt (also after an abort).
/// `echo` receives each log line as it is written.
RunSummary run_training(const TrainConfig& c, const std::function<void(const std::string&)>& echo = {});

}  // namespace lape
