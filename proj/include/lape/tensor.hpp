#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lape/errors.hpp"

namespace lape {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Storage view of a shape: leading axes flattened into rows, last axis as columns.
inline std::pair<Index, Index> storage_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  const Index cols = shape.back();
  return {cols == 0 ? 0 : numel(shape) / cols, cols};
}

template <typename S>
struct TensorNode {
  Shape shape;
  Mat<S> value;
  Mat<S> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t version = 0;
};

template <typename S>
class Tape;

/// Dense row-major array with an optional gradient buffer. Copies share the
/// underlying node; use clone() for an independent value.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Node = TensorNode<S>;

  Tensor() : node_(std::make_shared<Node>()) { node_->value.resize(1, 1); node_->value.setZero(); }

  Tensor(Shape shape, Mat<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    const auto [rows, cols] = storage_dims(shape);
    if (value.rows() != rows || value.cols() != cols) {
      throw DimensionError("tensor value " + std::to_string(value.rows()) + "x" +
                           std::to_string(value.cols()) + " does not match shape " +
                           shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  /// Rank-2 tensor from a matrix.
  explicit Tensor(Mat<S> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->shape = Shape{value.rows(), value.cols()};
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    const auto [r, c] = storage_dims(shape);
    return Tensor(shape, Mat<S>::Zero(r, c), requires_grad);
  }
  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    const auto [r, c] = storage_dims(shape);
    return Tensor(shape, Mat<S>::Ones(r, c), requires_grad);
  }
  static Tensor full(const Shape& shape, S v, bool requires_grad = false) {
    const auto [r, c] = storage_dims(shape);
    return Tensor(shape, Mat<S>::Constant(r, c, v), requires_grad);
  }
  static Tensor scalar(S v, bool requires_grad = false) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return Tensor(Shape{}, std::move(m), requires_grad);
  }
  static Tensor from(const Shape& shape, const std::vector<S>& data, bool requires_grad = false) {
    if (static_cast<Index>(data.size()) != numel(shape)) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    const auto [r, c] = storage_dims(shape);
    return Tensor(shape, Eigen::Map<const Mat<S>>(data.data(), r, c), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }

  const Mat<S>& value() const { return node_->value; }
  /// Mutable access bumps the version counter so caches can detect staleness.
  Mat<S>& mutable_value() {
    ++node_->version;
    return node_->value;
  }
  std::uint64_t version() const { return node_->version; }

  S item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return node_->grad.size() != 0; }
  /// Accumulated gradient, or zeros when nothing has reached this tensor.
  Mat<S> grad() const {
    if (has_grad()) return node_->grad;
    return Mat<S>::Zero(rows(), cols());
  }
  const Mat<S>* grad_ptr() const { return has_grad() ? &node_->grad : nullptr; }
  void zero_grad() { node_->grad.resize(0, 0); }

  /// Same values, no history, no gradient.
  Tensor detach() const { return Tensor(shape(), value(), false); }
  Tensor clone() const { return Tensor(shape(), value(), requires_grad()); }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape(), value().template cast<T>(), requires_grad());
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename S>
struct ActiveTape {
  static inline thread_local Tape<S>* current = nullptr;
};

template <typename S, typename Expr>
void accumulate(TensorNode<S>& node, const Expr& g) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

}  // namespace detail

/// Ordered record of differentiable operations. Single owner, single thread.
template <typename S>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<S>>;
  using BackwardFn = std::function<void(const Mat<S>&)>;

  struct Record {
    NodePtr output;
    std::vector<NodePtr> inputs;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return detail::ActiveTape<S>::current; }

  void record(const Tensor<S>& output, std::vector<NodePtr> inputs, BackwardFn fn) {
    records_.push_back(Record{output.node(), std::move(inputs), std::move(fn)});
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Reverse sweep from a scalar loss; every reachable requires_grad leaf
  /// accumulates d(loss)/d(leaf). The tape is cleared afterwards.
  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.is_leaf()) {
      const bool on_tape = std::any_of(records_.begin(), records_.end(), [&](const Record& r) {
        return r.output == loss.node();
      });
      if (!on_tape) throw ContractError("backward() loss was not produced on this tape");
    }
    detail::accumulate(*loss.node(), Mat<S>::Ones(1, 1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.size() == 0) continue;
      it->backward(it->output->grad);
    }
    clear();
  }

 private:
  std::vector<Record> records_;
};

/// Makes a tape the recording target for this thread until destroyed.
/// Passing nullptr suspends recording.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>* tape) : previous_(detail::ActiveTape<S>::current) {
    detail::ActiveTape<S>::current = tape;
  }
  explicit TapeScope(Tape<S>& tape) : TapeScope(&tape) {}
  ~TapeScope() { detail::ActiveTape<S>::current = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* previous_;
};

namespace detail {

/// Wraps a freshly computed value as an op result and, when a tape is active
/// and any input needs a gradient, records the backward rule.
template <typename S>
Tensor<S> emit(Shape shape, Mat<S> value, std::initializer_list<const Tensor<S>*> inputs,
               typename Tape<S>::BackwardFn fn) {
  Tensor<S> out(std::move(shape), std::move(value));
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  Tape<S>* tape = Tape<S>::current();
  if (!needs || tape == nullptr) return out;
  out.node()->requires_grad = true;
  out.node()->is_leaf = false;
  std::vector<typename Tape<S>::NodePtr> nodes;
  nodes.reserve(inputs.size());
  for (const auto* in : inputs) nodes.push_back(in->node());
  tape->record(out, std::move(nodes), std::move(fn));
  return out;
}

template <typename S>
bool recording(std::initializer_list<const Tensor<S>*> inputs) {
  if (Tape<S>::current() == nullptr) return false;
  for (const auto* in : inputs)
    if (in->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace lape
