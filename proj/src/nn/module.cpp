#include "microdet/nn/module.hpp"

#include <unordered_set>

namespace microdet::nn {

namespace {

template <typename T>
std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
class ModeSetter : public ModuleVisitor<T> {
 public:
  explicit ModeSetter(bool on) : on_(on) {}
  void param(const std::string&, Tensor<T>&) override {}
  void buffer(const std::string&, Tensor<T>&) override {}
  void child(const std::string&, Module<T>& m) override { m.train(on_); }

 private:
  bool on_;
};

template <typename T>
class Collector : public ModuleVisitor<T> {
 public:
  Collector(std::vector<NamedTensor<T>>& out, std::string prefix, bool with_buffers)
      : out_(out), prefix_(std::move(prefix)), with_buffers_(with_buffers) {}
  void param(const std::string& name, Tensor<T>& t) override {
    out_.push_back({join<T>(prefix_, name), t, TensorKind::kParam});
  }
  void buffer(const std::string& name, Tensor<T>& t) override {
    if (with_buffers_) out_.push_back({join<T>(prefix_, name), t, TensorKind::kBuffer});
  }
  void child(const std::string& name, Module<T>& m) override {
    Collector sub(out_, join<T>(prefix_, name), with_buffers_);
    m.visit(sub);
  }

 private:
  std::vector<NamedTensor<T>>& out_;
  std::string prefix_;
  bool with_buffers_;
};

template <typename T>
class Walker : public ModuleVisitor<T> {
 public:
  Walker(const std::function<void(const std::string&, Module<T>&)>& fn, std::string prefix)
      : fn_(fn), prefix_(std::move(prefix)) {}
  void param(const std::string&, Tensor<T>&) override {}
  void buffer(const std::string&, Tensor<T>&) override {}
  void child(const std::string& name, Module<T>& m) override {
    const std::string path = join<T>(prefix_, name);
    fn_(path, m);
    Walker sub(fn_, path);
    m.visit(sub);
  }

 private:
  const std::function<void(const std::string&, Module<T>&)>& fn_;
  std::string prefix_;
};

template <typename T>
std::vector<NamedTensor<T>> collect(Module<T>& root, const std::string& prefix, bool with_buffers) {
  std::vector<NamedTensor<T>> out;
  Collector<T> c(out, prefix, with_buffers);
  root.visit(c);
  std::unordered_set<std::string> seen;
  std::unordered_set<const void*> storage;
  for (const auto& nt : out) {
    if (!seen.insert(nt.path).second) throw StateError("duplicate tensor path '" + nt.path + "'");
    if (!storage.insert(nt.tensor.impl().get()).second)
      throw StateError("tensor registered twice (second path '" + nt.path + "')");
  }
  return out;
}

}  // namespace

template <typename T>
void Module<T>::train(bool on) {
  training_ = on;
  ModeSetter<T> setter(on);
  visit(setter);
}

template <typename T>
std::vector<NamedTensor<T>> named_tensors(Module<T>& root, const std::string& prefix) {
  return collect(root, prefix, true);
}

template <typename T>
std::vector<NamedTensor<T>> named_parameters(Module<T>& root, const std::string& prefix) {
  return collect(root, prefix, false);
}

template <typename T>
void for_each_module(Module<T>& root, const std::function<void(const std::string&, Module<T>&)>& fn,
                     const std::string& prefix) {
  fn(prefix, root);
  Walker<T> w(fn, prefix);
  root.visit(w);
}

template <typename T>
std::int64_t parameter_count(Module<T>& root) {
  std::int64_t n = 0;
  for (const auto& p : named_parameters(root)) n += p.tensor.numel();
  return n;
}

#define MICRODET_INSTANTIATE_MODULE(T)                                                                    \
  template class Module<T>;                                                                              \
  template std::vector<NamedTensor<T>> named_tensors(Module<T>&, const std::string&);                   \
  template std::vector<NamedTensor<T>> named_parameters(Module<T>&, const std::string&);                \
  template void for_each_module(Module<T>&, const std::function<void(const std::string&, Module<T>&)>&, \
                                const std::string&);                                                      \
  template std::int64_t parameter_count(Module<T>&);

MICRODET_INSTANTIATE_MODULE(float)
MICRODET_INSTANTIATE_MODULE(double)

}  // namespace microdet::nn
