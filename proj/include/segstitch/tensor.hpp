#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "segstitch/common.hpp"

namespace segstitch {

template <typename T>
class TapeT;

// Dense row-major tensor with value semantics over shared storage. Copies
// alias the same data and gradient buffers. A tensor may carry a handle to
// the tape that produced it (or that watches it as a leaf); the handle is a
// weak reference so stale tensors never write into a destroyed tape.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T value);
  static TensorT ones(Shape shape) { return full(std::move(shape), T(1)); }
  static TensorT from(Shape shape, std::vector<T> values);
  static TensorT scalar(T value) { return from({}, {value}); }
  static TensorT identity(int64_t n);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  std::vector<T>& vec() { return *data_; }
  const std::vector<T>& vec() const { return *data_; }

  // Scalar extraction; throws UsageError unless numel()==1.
  T item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  // Gradient buffer, zero-initialized to the tensor's shape on first use.
  std::vector<T>& grad();
  const std::vector<T>* grad_if_any() const {
    return (grad_ && !grad_->v.empty()) ? &grad_->v : nullptr;
  }
  bool has_grad() const { return grad_ && !grad_->v.empty(); }
  void zero_grad();
  // Gradient as a tensor of the same shape (copies).
  TensorT grad_tensor() const;

  // Same data, no tape handle, no grad requirement.
  TensorT detach() const;
  TensorT clone() const;

  // Tape bookkeeping. node() is the id of the producing record, -1 for
  // leaves. on_tape() is true while the owning tape is alive.
  std::shared_ptr<TapeT<T>> tape() const { return tape_.lock(); }
  bool on_tape() const { return !tape_.expired(); }
  int node() const { return node_; }
  void attach(const std::shared_ptr<TapeT<T>>& tape, int node) {
    tape_ = tape;
    node_ = node;
  }

  bool same_storage(const TensorT& other) const { return data_ == other.data_; }

 private:
  struct GradSlot {
    std::vector<T> v;
  };

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<GradSlot> grad_;
  bool requires_grad_ = false;
  std::weak_ptr<TapeT<T>> tape_;
  int node_ = -1;
};

// Reverse-mode tape: an append-only, topologically ordered record list.
// record() returns the new record's id; ids of a record's inputs are always
// smaller than its own. backward_from() walks reachable records in reverse
// insertion order, so each is visited exactly once and consumers run before
// producers.
template <typename T>
class TapeT : public std::enable_shared_from_this<TapeT<T>> {
 public:
  static std::shared_ptr<TapeT> make() { return std::make_shared<TapeT>(); }

  // Marks a leaf so downstream ops record onto this tape and backward()
  // accumulates into its grad buffer.
  void watch(TensorT<T>& t) {
    t.set_requires_grad(true);
    t.attach(this->shared_from_this(), -1);
  }

  int record(std::vector<int> parents, std::function<void()> backward_fn) {
    records_.push_back({std::move(parents), std::move(backward_fn)});
    return static_cast<int>(records_.size()) - 1;
  }

  void backward_from(int root_node) {
    if (root_node < 0) return;  // leaf root: nothing recorded
    std::vector<char> live(records_.size(), 0);
    live[static_cast<size_t>(root_node)] = 1;
    for (int i = root_node; i >= 0; --i) {
      if (!live[static_cast<size_t>(i)]) continue;
      for (int p : records_[static_cast<size_t>(i)].parents)
        if (p >= 0) live[static_cast<size_t>(p)] = 1;
      records_[static_cast<size_t>(i)].backward();
    }
  }

  size_t size() const { return records_.size(); }

 private:
  struct Record {
    std::vector<int> parents;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
};

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  TensorT t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<T>>(
      static_cast<size_t>(shape_numel(t.shape_)), T(0));
  t.grad_ = std::make_shared<GradSlot>();
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
  TensorT t = zeros(std::move(shape));
  for (auto& x : *t.data_) x = value;
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  TensorT t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<T>>(std::move(values));
  t.grad_ = std::make_shared<GradSlot>();
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::identity(int64_t n) {
  TensorT t = zeros({n, n});
  for (int64_t i = 0; i < n; ++i) t.data()[i * n + i] = T(1);
  return t;
}

template <typename T>
T TensorT<T>::item() const {
  if (!defined() || numel() != 1)
    throw UsageError("item: tensor is not a scalar (shape " +
                     shape_str(shape_) + ")");
  return (*data_)[0];
}

template <typename T>
std::vector<T>& TensorT<T>::grad() {
  if (!grad_) grad_ = std::make_shared<GradSlot>();
  if (grad_->v.empty()) grad_->v.assign(static_cast<size_t>(numel()), T(0));
  return grad_->v;
}

template <typename T>
void TensorT<T>::zero_grad() {
  if (grad_) grad_->v.clear();
}

template <typename T>
TensorT<T> TensorT<T>::grad_tensor() const {
  TensorT g = zeros(shape_);
  if (grad_ && !grad_->v.empty()) *g.data_ = grad_->v;
  return g;
}

template <typename T>
TensorT<T> TensorT<T>::detach() const {
  TensorT t;
  t.shape_ = shape_;
  t.data_ = data_;
  t.grad_ = std::make_shared<GradSlot>();
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::clone() const {
  TensorT t = zeros(shape_);
  *t.data_ = *data_;
  return t;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using Tensor64 = TensorT<double>;
using Tape64 = TapeT<double>;

}  // namespace segstitch
