#pragma once

#include "microdet/nn/module.hpp"
#include "microdet/ops.hpp"
#include "microdet/rng.hpp"

namespace microdet::nn {

// Kaiming-uniform with a = sqrt(5): bound = 1 / sqrt(fan_in).
template <typename T>
void kaiming_uniform(Tensor<T>& t, std::int64_t fan_in, Rng& rng);
template <typename T>
void uniform_fill(Tensor<T>& t, double bound, Rng& rng);

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d() = default;
  Conv2d(std::int64_t c_in, std::int64_t c_out, int kernel, int stride, int groups, bool bias, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Conv2dOptions& options() const { return opt_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  Conv2dOptions opt_;
};

template <typename T>
class BatchNorm2d : public Layer<T> {
 public:
  BatchNorm2d() = default;
  // shift=false drops beta (for a BN whose output only feeds another conv+BN).
  explicit BatchNorm2d(std::int64_t channels, bool shift = true);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
  bool shift_ = true;
};

// Conv -> BatchNorm -> SiLU (activation optional). Padding is kernel/2.
template <typename T>
class Cbs : public Layer<T> {
 public:
  Cbs() = default;
  Cbs(std::int64_t c_in, std::int64_t c_out, int kernel, int stride, Rng& rng, int groups = 1, bool act = true,
      bool bn_shift = true);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

  Conv2d<T>& conv() { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  bool act_ = true;
};

// y = x W + b over the last axis; W stored as (in, out). The bias is optional.
template <typename T>
class Linear : public Layer<T> {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias = true);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_;
};

template <typename T>
class LayerNorm : public Layer<T> {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

 private:
  Tensor<T> gamma_, beta_;
};

}  // namespace microdet::nn
