#pragma once

#include <functional>
#include <string>
#include <vector>

#include "microdet/tensor.hpp"

namespace microdet::nn {

template <typename T>
class Module;

template <typename T>
class ModuleVisitor {
 public:
  virtual ~ModuleVisitor() = default;
  virtual void param(const std::string& name, Tensor<T>& tensor) = 0;
  virtual void buffer(const std::string& name, Tensor<T>& tensor) = 0;
  virtual void child(const std::string& name, Module<T>& module) = 0;
};

template <typename T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = default;
  Module(Module&&) noexcept = default;
  Module& operator=(const Module&) = default;
  Module& operator=(Module&&) noexcept = default;
  virtual ~Module() = default;

  // Lists own parameters, buffers and children, in a fixed order.
  virtual void visit(ModuleVisitor<T>& v) = 0;

  // Switches this module and every descendant between training and eval.
  void train(bool on = true);
  void eval() { train(false); }
  bool is_training() const { return training_; }

 protected:
  bool training_ = true;
};

// A module with a single input and output feature map.
template <typename T>
class Layer : public Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
};

enum class TensorKind { kParam, kBuffer };

template <typename T>
struct NamedTensor {
  std::string path;
  Tensor<T> tensor;
  TensorKind kind;
};

// Flattens the module tree into dotted paths ("neck.fc4.cv_out.conv.weight").
template <typename T>
std::vector<NamedTensor<T>> named_tensors(Module<T>& root, const std::string& prefix = "");

// Parameters only (what the optimizer updates).
template <typename T>
std::vector<NamedTensor<T>> named_parameters(Module<T>& root, const std::string& prefix = "");

template <typename T>
void for_each_module(Module<T>& root, const std::function<void(const std::string&, Module<T>&)>& fn,
                     const std::string& prefix = "");

template <typename T>
std::int64_t parameter_count(Module<T>& root);

}  // namespace microdet::nn
