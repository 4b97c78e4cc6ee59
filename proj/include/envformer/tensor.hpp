#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "envformer/array.hpp"
#include "envformer/common.hpp"

namespace envformer {

template <typename T>
struct TensorImpl {
  Array<T> value;
  std::vector<T> grad;  // allocated (zero-filled) iff requires_grad
  bool requires_grad = false;
  std::int64_t node_id = -1;  // creation index on the tape; -1 for leaves
};

/// Shared handle to a value plus optional gradient buffer. Copies alias the
/// same storage; gradients accumulate across backward calls until zeroed.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor constant(Array<T> value) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->value = std::move(value);
    return t;
  }

  static Tensor param(Array<T> value) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->value = std::move(value);
    t.impl_->requires_grad = true;
    t.impl_->grad.assign(t.impl_->value.numel(), T(0));
    return t;
  }

  static Tensor make(std::vector<std::size_t> shape, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->value = Array<T>(std::move(shape));
    t.impl_->requires_grad = requires_grad;
    if (requires_grad) t.impl_->grad.assign(t.impl_->value.numel(), T(0));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return impl_->value.shape; }
  std::size_t numel() const { return impl_->value.numel(); }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  Array<T>& value() { return impl_->value; }
  const Array<T>& value() const { return impl_->value; }
  T* data() { return impl_->value.data.data(); }
  const T* data() const { return impl_->value.data.data(); }

  std::vector<T>& grad() {
    if (!impl_->requires_grad)
      throw ContractError("Tensor::grad: tensor does not require grad");
    return impl_->grad;
  }
  const std::vector<T>& grad() const {
    if (!impl_->requires_grad)
      throw ContractError("Tensor::grad: tensor does not require grad");
    return impl_->grad;
  }
  T* grad_data() { return impl_->grad.data(); }

  void zero_grad() {
    if (impl_ && impl_->requires_grad)
      std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  /// Scalar convenience accessor; contract-checked.
  T item() const {
    if (numel() != 1)
      throw ContractError("Tensor::item: tensor is not scalar, shape " +
                          shape_to_string(shape()));
    return impl_->value.data[0];
  }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

struct TapeOptions {
  bool recording = true;
  bool training = false;      // dropout active only when true
  bool check_finite = true;   // scan every op output for NaN/Inf
};

/// Records operations in creation order (which is a topological order of the
/// graph) and runs the backward pass by visiting the records exactly once in
/// reverse. Backward closures capture whatever forward state they need.
template <typename T>
class Tape {
 public:
  struct Entry {
    const char* op;
    std::int64_t id;
    std::vector<std::int64_t> input_ids;
    std::function<void()> backward;
  };

  explicit Tape(TapeOptions opts = {}) : opts_(opts) {}

  bool recording() const { return opts_.recording; }
  bool training() const { return opts_.training; }
  bool check_finite() const { return opts_.check_finite; }
  void set_training(bool on) { opts_.training = on; }

  std::size_t size() const { return entries_.size(); }

  void record(const char* op, const std::vector<Tensor<T>>& inputs,
              Tensor<T>& output, std::function<void()> backward) {
    Entry e;
    e.op = op;
    e.id = static_cast<std::int64_t>(entries_.size());
    for (const auto& in : inputs)
      if (in.defined()) e.input_ids.push_back(in.impl()->node_id);
    e.backward = std::move(backward);
    output.impl()->node_id = e.id;
    entries_.push_back(std::move(e));
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  /// Gradients accumulate into .grad buffers.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("Tape::backward: loss must be scalar, got shape " +
                          shape_to_string(loss.shape()));
    if (entries_.empty())
      throw ContractError("Tape::backward: tape is empty");
    if (!loss.requires_grad())
      throw ContractError(
          "Tape::backward: loss is not connected to any parameter");
    loss.impl()->grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      it->backward();
  }

  void reset() { entries_.clear(); }

  /// Introspection for structural tests: (op name, node id, input node ids).
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  TapeOptions opts_;
  std::vector<Entry> entries_;
};

namespace detail {

/// Fast whole-buffer finiteness test: a sum over the buffer is finite iff no
/// element is NaN/Inf (values large enough to overflow the sum are treated as
/// non-finite too, which is the right call for this library's value ranges).
template <typename T>
bool all_finite(const T* p, std::size_t n) {
  T acc0 = 0, acc1 = 0;
  std::size_t i = 0;
  for (; i + 1 < n; i += 2) {
    acc0 += p[i];
    acc1 += p[i + 1];
  }
  if (i < n) acc0 += p[i];
  return std::isfinite(static_cast<double>(acc0 + acc1));
}

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op) {
  if (!all_finite(t.data(), t.numel()))
    throw NumericError(std::string(op) +
                       ": produced non-finite values, output shape " +
                       shape_to_string(t.shape()));
}

}  // namespace detail

}  // namespace envformer
