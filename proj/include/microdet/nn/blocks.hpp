#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "microdet/nn/layers.hpp"

namespace microdet::nn {

// Ghost convolution: a primary conv yields m = c_out / ratio intrinsic maps,
// each of which spawns ratio-1 more maps through a cheap depthwise conv.
// Output channels [0, m) are the intrinsic maps themselves.
struct GhostSpec {
  std::int64_t c_in = 0;
  std::int64_t c_out = 0;
  int ratio = 2;
  int primary_kernel = 1;
  int cheap_kernel = 3;
  int stride = 1;

  std::int64_t intrinsic() const { return c_out / ratio; }
  void validate() const;
};

template <typename T>
class GhostConv : public Layer<T> {
 public:
  GhostConv(const GhostSpec& spec, Rng& rng, bool act = true, bool bn_shift = true);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;
  const GhostSpec& spec() const { return spec_; }

 private:
  GhostSpec spec_;
  Cbs<T> primary_;
  std::optional<Cbs<T>> cheap_;
};

// Two ghost convs (expand, project) with an optional stride-2 depthwise
// stage between them, plus a residual shortcut. Stages without activation
// carry no BN shift: every consumer starts with conv + BN, which cancels a
// per-channel offset exactly, so such a shift could never receive gradient.
template <typename T>
class GhostBottleneck : public Layer<T> {
 public:
  GhostBottleneck(std::int64_t c_in, std::int64_t c_mid, std::int64_t c_out, int stride, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

  GhostConv<T>& project() { return ghost2_; }
  bool identity_shortcut() const { return !shortcut_dw_.has_value(); }

 private:
  GhostConv<T> ghost1_;
  std::optional<Cbs<T>> dw_;
  GhostConv<T> ghost2_;
  std::optional<Cbs<T>> shortcut_dw_;
  std::optional<Cbs<T>> shortcut_pw_;
};

template <typename T>
class Bottleneck : public Layer<T> {
 public:
  Bottleneck(std::int64_t c_in, std::int64_t c_out, bool shortcut, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

 private:
  Cbs<T> cv1_, cv2_;
  bool add_;
};

// CSP block with three convs; the inner chain holds standard or ghost
// bottlenecks.
template <typename T>
class C3 : public Layer<T> {
 public:
  C3(std::int64_t c_in, std::int64_t c_out, int n, bool shortcut, bool ghost, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

 private:
  Cbs<T> cv1_, cv2_, cv3_;
  std::vector<std::unique_ptr<Layer<T>>> m_;
};

enum class RepMode { kTrain, kDeploy };

// Conv weight + bias equivalent to conv followed by eval-mode batch norm.
template <typename T>
struct FoldedConv {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
FoldedConv<T> fold_conv_bn(Conv2d<T>& conv, BatchNorm2d<T>& bn);

// Dense 3x3 + 1x1 branches (no identity branch), SiLU on the sum. After
// fuse() a single 3x3 conv reproduces the branch sum in eval mode.
template <typename T>
class RepConvN : public Layer<T> {
 public:
  RepConvN(std::int64_t c_in, std::int64_t c_out, int stride, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> forward(const Tensor<T>& x, RepMode mode);
  void visit(ModuleVisitor<T>& v) override;

  void fuse();
  bool deployed() const { return fused_.has_value(); }
  const FoldedConv<T>& fused() const;

  Cbs<T>& dense() { return dense_; }
  Cbs<T>& pointwise() { return pointwise_; }

 private:
  Cbs<T> dense_;      // 3x3 conv + BN, no activation
  Cbs<T> pointwise_;  // 1x1 conv + BN, no activation
  int stride_;
  std::optional<FoldedConv<T>> fused_;
};

// Multi-input fusion node: concatenated inputs feed a 1x1 pass-through path
// and a chain of RepConvN -> 3x3 CBS stages; the pass-through and every stage
// output are concatenated and projected to c_out.
template <typename T>
class FcBlock : public Module<T> {
 public:
  FcBlock(std::vector<std::int64_t> c_ins, std::int64_t c_out, int depth, Rng& rng);

  Tensor<T> forward(const std::vector<Tensor<T>>& inputs);
  void visit(ModuleVisitor<T>& v) override;
  std::int64_t c_out() const { return c_out_; }

 private:
  struct Stage {
    RepConvN<T> rep;
    Cbs<T> cbs;
  };
  std::vector<std::int64_t> c_ins_;
  std::int64_t c_out_;
  Cbs<T> cv_pass_, cv_chain_;
  std::vector<Stage> stages_;
  Cbs<T> cv_out_;
};

// Coordinate attention: per-row and per-column sigmoid gates computed from
// directional average pooling. Output shape equals input shape.
template <typename T>
class CoordAttention : public Layer<T> {
 public:
  CoordAttention(std::int64_t channels, int reduction, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

  Conv2d<T>& gate_h() { return gate_h_; }
  Conv2d<T>& gate_w() { return gate_w_; }
  std::int64_t reduced_channels() const { return mip_; }

 private:
  std::int64_t mip_;
  Cbs<T> reduce_;
  Conv2d<T> gate_h_, gate_w_;
};

struct EncoderSpec {
  int heads = 4;
  int mlp_ratio = 2;
  int layers = 1;
  std::int64_t max_tokens = 64;
};

// Post-norm transformer encoder over the H*W positions of a feature map.
// The key projection has no bias: softmax is invariant to it.
template <typename T>
class TransformerEncoder : public Layer<T> {
 public:
  TransformerEncoder(std::int64_t channels, const EncoderSpec& spec, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

  struct EncoderLayer : public Module<T> {
    EncoderLayer(std::int64_t c, int mlp_ratio, Rng& rng);
    void visit(ModuleVisitor<T>& v) override;
    Linear<T> q, k, v, o;
    LayerNorm<T> ln1;
    Linear<T> mlp1, mlp2;
    LayerNorm<T> ln2;
  };

  std::vector<EncoderLayer>& layers() { return layers_; }
  Tensor<T>& positional() { return pos_; }
  // Softmax weights (batch*heads, L, L) of the last layer from the latest forward.
  const Tensor<T>& last_attention() const { return last_attention_; }

 private:
  std::int64_t c_;
  EncoderSpec spec_;
  Tensor<T> pos_;
  std::vector<EncoderLayer> layers_;
  Tensor<T> last_attention_;
};

template <typename T>
class Sppf : public Layer<T> {
 public:
  Sppf(std::int64_t c_in, std::int64_t c_out, int kernel, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) override;
  void visit(ModuleVisitor<T>& v) override;

 private:
  Cbs<T> cv1_, cv2_;
  int kernel_;
};

}  // namespace microdet::nn
