#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sunet/tensor.hpp"

namespace sunet {

class NodeBase {
 public:
  virtual ~NodeBase() = default;
  virtual void propagate() = 0;
  virtual void release() = 0;
};

/// Ordered record of differentiable operations executed while the tape is active.
/// Only operations with at least one gradient-requiring input are recorded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<NodeBase> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  /// Runs every recorded adjoint once, newest first, then drops the record.
  void replay_reverse();
  void clear();

  /// The tape operations record onto in this thread, or nullptr.
  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<std::shared_ptr<NodeBase>> nodes_;
};

/// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording in the calling thread for the scope's lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

template <typename T>
class Node final : public NodeBase {
 public:
  explicit Node(Tensor<T> v, bool req) : value(std::move(v)), requires_grad(req) {}

  void propagate() override {
    if (has_grad && backward) backward(grad);
  }
  void release() override { backward = nullptr; }

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>::zeros(value.shape());
      has_grad = true;
    }
    return grad;
  }

  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::function<void(const Tensor<T>&)> backward;
};

/// Handle to a value in the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>(Tensor<T>(), false)) {}
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>(std::move(value), requires_grad)) {}
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::int64_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return node_->has_grad; }
  /// Accumulated gradient; zeros when no backward pass reached this node.
  Tensor<T> grad() const {
    return node_->has_grad ? node_->grad : Tensor<T>::zeros(node_->value.shape());
  }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = Tensor<T>();
  }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  bool same_node(const Var& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

/// Wraps a freshly computed value as an operation output. When a tape is
/// active and any input needs a gradient, the output is recorded with
/// `backward`, which receives d(loss)/d(output).
template <typename T>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> inputs,
               std::function<void(const Tensor<T>&)> backward) {
  Tape* tape = Tape::active();
  bool need = false;
  if (tape)
    for (const auto& in : inputs) need = need || in.requires_grad();
  auto node = std::make_shared<Node<T>>(std::move(value), need);
  if (need) {
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& inputs,
               std::function<void(const Tensor<T>&)> backward) {
  Tape* tape = Tape::active();
  bool need = false;
  if (tape)
    for (const auto& in : inputs) need = need || in.requires_grad();
  auto node = std::make_shared<Node<T>>(std::move(value), need);
  if (need) {
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Var<T>(std::move(node));
}

/// Named trainable tensor.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
};

/// Ordered parameter collection with unique names.
template <typename T>
class ParameterList {
 public:
  /// Registers a new trainable leaf; throws std::invalid_argument on a duplicate name.
  Var<T> add(const std::string& name, Tensor<T> value);

  std::span<const Parameter<T>> items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  const Parameter<T>* find(const std::string& name) const;
  std::int64_t scalar_count() const;
  void zero_grad() const;

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Seeds d(loss)/d(loss) = 1 and replays the tape. Throws ShapeError for a
/// non-scalar loss. A loss that needs no gradient leaves every grad untouched.
template <typename T>
void backward(Tape& tape, const Var<T>& loss);

/// Zeroes the parameters' gradients, runs backward, and returns name -> gradient.
template <typename T>
std::map<std::string, Tensor<T>> gradients(Tape& tape, const Var<T>& loss,
                                           const ParameterList<T>& params);

/// One scalar coordinate of a leaf tensor.
struct Coordinate {
  std::size_t leaf = 0;
  std::int64_t index = 0;
};

/// Compares analytic gradients of `loss` against central differences at the
/// given coordinates. Returns max |analytic - numeric| / max(1e-8, |numeric|),
/// skipping coordinates where both derivatives are below the difference
/// quotient's round-off level 10 * eps * max(1, |loss|) / step.
double grad_check_coordinates(const std::function<Var<double>()>& loss,
                              std::span<Var<double>> leaves,
                              std::span<const Coordinate> coords, double step);

/// Gradient check of an arbitrary op over every input coordinate. Non-scalar
/// outputs are reduced with fixed pseudo-random weights so the whole Jacobian
/// participates.
double grad_check(const std::function<Var<double>(const std::vector<Var<double>>&)>& op,
                  const std::vector<Tensor<double>>& inputs, double step,
                  std::uint64_t seed = 7);

extern template class ParameterList<float>;
extern template class ParameterList<double>;

}  // namespace sunet
