#include "microdet/nn/layers.hpp"

#include <cmath>

namespace microdet::nn {

template <typename T>
void uniform_fill(Tensor<T>& t, double bound, Rng& rng) {
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void kaiming_uniform(Tensor<T>& t, std::int64_t fan_in, Rng& rng) {
  uniform_fill(t, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::int64_t c_in, std::int64_t c_out, int kernel, int stride, int groups, bool bias, Rng& rng)
    : opt_{stride, kernel / 2, groups} {
  if (kernel % 2 == 0) throw ConfigError("conv kernel size must be odd, got " + std::to_string(kernel));
  if (c_in % groups != 0 || c_out % groups != 0)
    throw ConfigError("conv channels " + std::to_string(c_in) + "->" + std::to_string(c_out) +
                      " not divisible by groups " + std::to_string(groups));
  const std::int64_t fan_in = (c_in / groups) * kernel * kernel;
  weight_ = Tensor<T>(Shape{c_out, c_in / groups, kernel, kernel});
  kaiming_uniform(weight_, fan_in, rng);
  weight_.set_requires_grad(true);
  if (bias) {
    bias_ = Tensor<T>(Shape{c_out});
    uniform_fill(bias_, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    bias_.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  return conv2d(x, weight_, bias_, opt_);
}

template <typename T>
void Conv2d<T>::visit(ModuleVisitor<T>& v) {
  v.param("weight", weight_);
  if (bias_.defined()) v.param("bias", bias_);
}

// ---------------------------------------------------------------- BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels, bool shift)
    : gamma_(Shape{channels}, T(1)),
      beta_(Shape{channels}, T(0)),
      running_mean_(Shape{channels}, T(0)),
      running_var_(Shape{channels}, T(1)),
      shift_(shift) {
  gamma_.set_requires_grad(true);
  beta_.set_requires_grad(shift);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  return batch_norm(x, gamma_, beta_, running_mean_, running_var_, {kEps, kMomentum, this->training_});
}

template <typename T>
void BatchNorm2d<T>::visit(ModuleVisitor<T>& v) {
  v.param("weight", gamma_);
  if (shift_) v.param("bias", beta_);
  v.buffer("running_mean", running_mean_);
  v.buffer("running_var", running_var_);
}

// ---------------------------------------------------------------- Cbs

template <typename T>
Cbs<T>::Cbs(std::int64_t c_in, std::int64_t c_out, int kernel, int stride, Rng& rng, int groups, bool act,
            bool bn_shift)
    : conv_(c_in, c_out, kernel, stride, groups, false, rng), bn_(c_out, bn_shift), act_(act) {}

template <typename T>
Tensor<T> Cbs<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = bn_.forward(conv_.forward(x));
  return act_ ? silu(y) : y;
}

template <typename T>
void Cbs<T>::visit(ModuleVisitor<T>& v) {
  v.child("conv", conv_);
  v.child("bn", bn_);
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias) : weight_(Shape{in, out}) {
  kaiming_uniform(weight_, in, rng);
  weight_.set_requires_grad(true);
  if (bias) {
    bias_ = Tensor<T>(Shape{out});
    uniform_fill(bias_, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    bias_.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = matmul(x, weight_);
  return bias_.defined() ? add(y, bias_) : y;
}

template <typename T>
void Linear<T>::visit(ModuleVisitor<T>& v) {
  v.param("weight", weight_);
  if (bias_.defined()) v.param("bias", bias_);
}

// ---------------------------------------------------------------- LayerNorm

template <typename T>
LayerNorm<T>::LayerNorm(std::int64_t dim) : gamma_(Shape{dim}, T(1)), beta_(Shape{dim}, T(0)) {
  gamma_.set_requires_grad(true);
  beta_.set_requires_grad(true);
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) {
  return layer_norm(x, gamma_, beta_, 1e-5);
}

template <typename T>
void LayerNorm<T>::visit(ModuleVisitor<T>& v) {
  v.param("weight", gamma_);
  v.param("bias", beta_);
}

#define MICRODET_INSTANTIATE_LAYERS(T)                                 \
  template void uniform_fill(Tensor<T>&, double, Rng&);                \
  template void kaiming_uniform(Tensor<T>&, std::int64_t, Rng&);       \
  template class Conv2d<T>;                                            \
  template class BatchNorm2d<T>;                                       \
  template class Cbs<T>;                                               \
  template class Linear<T>;                                            \
  template class LayerNorm<T>;

MICRODET_INSTANTIATE_LAYERS(float)
MICRODET_INSTANTIATE_LAYERS(double)

}  // namespace microdet::nn
