#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "microdet/tensor.hpp"

namespace microdet {

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

// Cross-correlation over NCHW input with OIHW kernel. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dOptions& opt = {});

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  bool training = true;
};

// Per-channel normalization of NCHW input. In training mode batch statistics
// are used and the running buffers are updated in place.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var,
                     const BatchNormOptions& opt = {});

enum class Activation { kSilu, kSigmoid, kRelu };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind);

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x);
template <typename T>
Tensor<T> activation(std::string_view kind, const Tensor<T>& x) {
  return activation(parse_activation(kind), x);
}
template <typename T>
Tensor<T> silu(const Tensor<T>& x) { return activation(Activation::kSilu, x); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(Activation::kSigmoid, x); }
template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::kRelu, x); }

// (M,K)x(K,N), (B,M,K)x(K,N) or (B,M,K)x(B,K,N).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

// Elementwise with numpy-style broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& sizes);

// Mean over the listed axes, keeping them as size-1 dimensions.
template <typename T>
Tensor<T> mean_over(const Tensor<T>& x, const std::vector<int>& axes);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// Pads with -inf. Ties route the gradient to the lowest linear index.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int pad);
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);

// Normalizes over the last axis; gamma/beta have that axis' length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

// Multiply-accumulate accounting for conv2d/matmul forwards on this thread.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t total() const { return total_; }

 private:
  friend void count_macs(std::uint64_t n);
  std::uint64_t total_ = 0;
  MacCounter* parent_;
};

void count_macs(std::uint64_t n);

// Records the smallest distance to a non-differentiable point (relu at 0,
// max-pool ties) seen by kernels on this thread while alive.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;
  double min_distance() const { return min_distance_; }

 private:
  friend void report_kink(double distance);
  double min_distance_;
  KinkProbe* parent_;
};

void report_kink(double distance);
bool kink_probe_active();

}  // namespace microdet
