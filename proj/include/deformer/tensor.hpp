#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "deformer/errors.hpp"
#include "deformer/types.hpp"

namespace deformer {

template <typename S>
struct TensorData {
  Mat<S> value;
  Mat<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool on_tape = false;  // produced by a recorded primitive

  void ensure_grad() {
    if (grad.size() == 0) grad = Mat<S>::Zero(value.rows(), value.cols());
  }
};

// Shared handle to a value and its gradient slot. Values are immutable after
// forward creation except for leaves, which the optimizer updates between
// steps via mutable_value().
template <typename S>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData<S>>()) {}

  explicit Tensor(Mat<S> value, bool requires_grad = false) : d_(std::make_shared<TensorData<S>>()) {
    d_->value = std::move(value);
    d_->requires_grad = requires_grad;
  }

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false) {
    return Tensor(Mat<S>::Zero(rows, cols), requires_grad);
  }

  static Tensor ones(Index rows, Index cols) { return Tensor(Mat<S>::Ones(rows, cols)); }

  static Tensor constant(Index rows, Index cols, S value) {
    return Tensor(Mat<S>::Constant(rows, cols, value));
  }

  static Tensor scalar(S value) { return constant(1, 1, value); }

  const Mat<S>& value() const { return d_->value; }

  // Leaf updates only (parameter initialization and optimizer steps).
  Mat<S>& mutable_value() { return d_->value; }

  const Mat<S>& grad() const {
    d_->ensure_grad();
    return d_->grad;
  }

  void zero_grad() {
    if (d_->grad.size() != 0) d_->grad.setZero();
  }

  Index rows() const { return d_->value.rows(); }
  Index cols() const { return d_->value.cols(); }
  Index size() const { return d_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool flag) { d_->requires_grad = flag; }
  bool on_tape() const { return d_->on_tape; }
  void mark_on_tape() { d_->on_tape = true; }

  const std::shared_ptr<TensorData<S>>& data() const { return d_; }

 private:
  std::shared_ptr<TensorData<S>> d_;
};

// Thread-local switch consulted by every primitive; evaluation paths disable
// recording so frozen models can be shared across threads.
inline thread_local bool g_grad_enabled = true;

inline bool grad_enabled() { return g_grad_enabled; }

struct NoGradGuard {
  bool previous;
  NoGradGuard() : previous(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = previous; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Ordered log of executed primitives. Backward replays each entry exactly
// once, in reverse execution order, then clears the record.
template <typename S>
class GradTape {
 public:
  using Entry = std::function<void()>;

  static GradTape& instance() {
    thread_local GradTape tape;
    return tape;
  }

  void record(Entry entry) { entries_.push_back(std::move(entry)); }

  std::size_t size() const { return entries_.size(); }

  void clear() { entries_.clear(); }

  void replay_reverse() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<Entry> entries_;
};

template <typename S>
bool tracked(const Tensor<S>& t) {
  return grad_enabled() && (t.requires_grad() || t.on_tape());
}

// Populates grad for every tensor reachable from loss; gradients accumulate
// (sum) when a tensor feeds multiple consumers.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward: loss must be a 1x1 scalar, got " + std::to_string(loss.rows()) + "x" +
                     std::to_string(loss.cols()));
  }
  loss.data()->ensure_grad();
  loss.data()->grad(0, 0) = S(1);
  GradTape<S>::instance().replay_reverse();
  GradTape<S>::instance().clear();
}

}  // namespace deformer
