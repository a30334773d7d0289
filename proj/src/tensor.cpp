#include "microdet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace microdet {

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_node_seq = 0;
}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

std::uint64_t detail::next_node_seq() { return ++g_node_seq; }

namespace {
void check_shape(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (shape[i] <= 0)
      throw ShapeError("tensor dimension " + std::to_string(i) + " must be positive, got shape " +
                       shape_str(shape));
}
}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  check_shape(shape);
  impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->shape;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return s[static_cast<std::size_t>(axis)];
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0);
}

template <typename T>
std::span<T> Tensor<T>::data() {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!impl_) throw StateError("use of an undefined tensor");
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), impl_->data);
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl_ && !impl_->node;
}

template <typename T>
void backward(const Tensor<T>& loss, BackwardMode mode) {
  if (!loss.defined()) throw StateError("backward: undefined loss tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw StateError("backward: loss is detached (no tensor in its graph requires grad)");

  using Impl = detail::TensorImpl<T>;
  auto root = loss.impl();
  if (root->consumed)
    throw StateError("backward: tape already consumed; use BackwardMode::kRetain to backpropagate twice");

  // Gather every impl reachable through tape nodes.
  // Owning handles: releasing a consumed node must not free impls still queued.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::shared_ptr<Impl>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    std::shared_ptr<Impl> cur = std::move(stack.back());
    stack.pop_back();
    if (!cur->node) continue;
    for (const auto& in : cur->node->inputs)
      if (seen.insert(in.get()).second) stack.push_back(in);
    order.push_back(std::move(cur));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->node->seq > b->node->seq; });

  root->grad_buffer()[0] += T(1);
  for (const auto& cur : order) {
    if (!cur->grad.empty()) {
      std::vector<T> g = std::move(cur->grad);
      cur->grad.clear();
      cur->node->backward(g);
    }
    if (mode == BackwardMode::kConsume) {
      cur->node.reset();
      cur->consumed = true;
    }
  }
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(std::span<const T>)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!any_requires_grad<T>(inputs)) return out;
  auto node = std::make_shared<Node<T>>();
  node->seq = next_node_seq();
  node->op = op;
  for (const auto* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) node->inputs.push_back(t->impl());
  node->backward = std::move(backward_fn);
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->node = std::move(node);
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(std::span<const T>)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  bool needed = false;
  if (grad_mode_enabled())
    for (const auto& t : inputs) needed = needed || t.requires_grad();
  if (!needed) return out;
  auto node = std::make_shared<Node<T>>();
  node->seq = next_node_seq();
  node->op = op;
  for (const auto& t : inputs)
    if (t.requires_grad()) node->inputs.push_back(t.impl());
  node->backward = std::move(backward_fn);
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->node = std::move(node);
  return out;
}

template Tensor<float> make_result(Shape, std::vector<float>, const char*,
                                   std::initializer_list<const Tensor<float>*>,
                                   std::function<void(std::span<const float>)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*,
                                    std::initializer_list<const Tensor<double>*>,
                                    std::function<void(std::span<const double>)>);
template Tensor<float> make_result(Shape, std::vector<float>, const char*,
                                   const std::vector<Tensor<float>>&,
                                   std::function<void(std::span<const float>)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*,
                                    const std::vector<Tensor<double>>&,
                                    std::function<void(std::span<const double>)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&, BackwardMode);
template void backward(const Tensor<double>&, BackwardMode);

}  // namespace microdet
