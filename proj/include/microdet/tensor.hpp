#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace microdet {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes, axes or dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong lifecycle state (e.g. deploy before fuse).
class StateError : public Error {
 public:
  using Error::Error;
};

// Malformed file or serialized payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid user-facing configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem failure (unreadable, unwritable, missing).
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;
  bool consumed = false;  // node released by a kConsume backward pass

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// One recorded operation of the tape. `seq` grows monotonically per thread,
// so sorting by it yields a topological order of the graph.
template <typename T>
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T> out_grad)> backward;
};

std::uint64_t next_node_seq();

}  // namespace detail

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Dense row-major tensor with shared storage. Copies of a Tensor alias the
// same buffer; use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  std::span<T> data();
  std::span<const T> data() const;
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  // Detached deep copy (no tape linkage, requires_grad=false).
  Tensor clone() const;
  bool is_leaf() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<detail::TensorImpl<T>> impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl);

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

enum class BackwardMode {
  kConsume,  // tape released after the pass (default)
  kRetain,   // tape kept; a second call accumulates into leaf grads again
};

// Reverse pass from a scalar loss; accumulates into every requires_grad leaf.
template <typename T>
void backward(const Tensor<T>& loss, BackwardMode mode = BackwardMode::kConsume);

namespace detail {

// Builds an op result and, when recording is active and any input requires
// grad, attaches a tape node whose backward receives the output gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(std::span<const T>)> backward_fn);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(std::span<const T>)> backward_fn);

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_mode_enabled()) return false;
  for (const auto* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

// Gradient sink for an input, or nullptr when it does not take gradient.
template <typename T>
T* grad_sink(const std::shared_ptr<TensorImpl<T>>& impl) {
  if (!impl || !impl->requires_grad) return nullptr;
  return impl->grad_buffer().data();
}

}  // namespace detail

}  // namespace microdet
