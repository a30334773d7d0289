#include "microdet/nn/blocks.hpp"

#include <cmath>

namespace microdet::nn {

void GhostSpec::validate() const {
  if (c_in <= 0 || c_out <= 0) throw ConfigError("ghost conv channels must be positive");
  if (ratio < 1) throw ConfigError("ghost ratio s must be >= 1, got " + std::to_string(ratio));
  if (c_out % ratio != 0)
    throw ConfigError("ghost conv: c_out " + std::to_string(c_out) + " not divisible by s = " + std::to_string(ratio));
  if (primary_kernel % 2 == 0 || cheap_kernel % 2 == 0) throw ConfigError("ghost conv kernels must be odd");
}

namespace {
const GhostSpec& checked(const GhostSpec& s) {
  s.validate();
  return s;
}
}  // namespace

// ---------------------------------------------------------------- GhostConv

template <typename T>
GhostConv<T>::GhostConv(const GhostSpec& spec, Rng& rng, bool act, bool bn_shift)
    : spec_(checked(spec)),
      primary_(spec.c_in, spec.intrinsic(), spec.primary_kernel, spec.stride, rng, 1, act, bn_shift) {
  if (spec.ratio > 1) {
    const std::int64_t m = spec.intrinsic();
    cheap_.emplace(m, m * (spec.ratio - 1), spec.cheap_kernel, 1, rng, static_cast<int>(m), act, bn_shift);
  }
}

template <typename T>
Tensor<T> GhostConv<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = primary_.forward(x);
  if (!cheap_) return y;
  return concat<T>({y, cheap_->forward(y)}, 1);
}

template <typename T>
void GhostConv<T>::visit(ModuleVisitor<T>& v) {
  v.child("primary", primary_);
  if (cheap_) v.child("cheap", *cheap_);
}

// ---------------------------------------------------------------- GhostBottleneck

template <typename T>
GhostBottleneck<T>::GhostBottleneck(std::int64_t c_in, std::int64_t c_mid, std::int64_t c_out, int stride, Rng& rng)
    : ghost1_(GhostSpec{c_in, c_mid, 2, 1, 3, 1}, rng, true),
      ghost2_([&]() -> GhostConv<T> {
        if (stride != 1 && stride != 2)
          throw ConfigError("ghost bottleneck stride must be 1 or 2, got " + std::to_string(stride));
        if (stride == 2) dw_.emplace(c_mid, c_mid, 3, 2, rng, static_cast<int>(c_mid), false, false);
        return GhostConv<T>(GhostSpec{c_mid, c_out, 2, 1, 3, 1}, rng, false, false);
      }()) {
  if (stride != 1 || c_in != c_out) {
    shortcut_dw_.emplace(c_in, c_in, 3, stride, rng, static_cast<int>(c_in), false, false);
    shortcut_pw_.emplace(c_in, c_out, 1, 1, rng, 1, false, false);
  }
}

template <typename T>
Tensor<T> GhostBottleneck<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = ghost1_.forward(x);
  if (dw_) y = dw_->forward(y);
  y = ghost2_.forward(y);
  Tensor<T> shortcut = shortcut_dw_ ? shortcut_pw_->forward(shortcut_dw_->forward(x)) : x;
  return add(y, shortcut);
}

template <typename T>
void GhostBottleneck<T>::visit(ModuleVisitor<T>& v) {
  v.child("ghost1", ghost1_);
  if (dw_) v.child("dw", *dw_);
  v.child("ghost2", ghost2_);
  if (shortcut_dw_) {
    v.child("shortcut_dw", *shortcut_dw_);
    v.child("shortcut_pw", *shortcut_pw_);
  }
}

// ---------------------------------------------------------------- Bottleneck / C3

template <typename T>
Bottleneck<T>::Bottleneck(std::int64_t c_in, std::int64_t c_out, bool shortcut, Rng& rng)
    : cv1_(c_in, c_out, 1, 1, rng), cv2_(c_out, c_out, 3, 1, rng), add_(shortcut && c_in == c_out) {}

template <typename T>
Tensor<T> Bottleneck<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = cv2_.forward(cv1_.forward(x));
  return add_ ? add(x, y) : y;
}

template <typename T>
void Bottleneck<T>::visit(ModuleVisitor<T>& v) {
  v.child("cv1", cv1_);
  v.child("cv2", cv2_);
}

template <typename T>
C3<T>::C3(std::int64_t c_in, std::int64_t c_out, int n, bool shortcut, bool ghost, Rng& rng)
    : cv1_(c_in, c_out / 2, 1, 1, rng), cv2_(c_in, c_out / 2, 1, 1, rng), cv3_(2 * (c_out / 2), c_out, 1, 1, rng) {
  if (n < 0) throw ConfigError("C3 bottleneck count must be >= 0");
  const std::int64_t hidden = c_out / 2;
  for (int i = 0; i < n; ++i) {
    if (ghost)
      m_.push_back(std::make_unique<GhostBottleneck<T>>(hidden, hidden, hidden, 1, rng));
    else
      m_.push_back(std::make_unique<Bottleneck<T>>(hidden, hidden, shortcut, rng));
  }
}

template <typename T>
Tensor<T> C3<T>::forward(const Tensor<T>& x) {
  Tensor<T> a = cv1_.forward(x);
  for (auto& b : m_) a = b->forward(a);
  return cv3_.forward(concat<T>({a, cv2_.forward(x)}, 1));
}

template <typename T>
void C3<T>::visit(ModuleVisitor<T>& v) {
  v.child("cv1", cv1_);
  v.child("cv2", cv2_);
  for (std::size_t i = 0; i < m_.size(); ++i) v.child("m." + std::to_string(i), *m_[i]);
  v.child("cv3", cv3_);
}

// ---------------------------------------------------------------- RepConvN

template <typename T>
FoldedConv<T> fold_conv_bn(Conv2d<T>& conv, BatchNorm2d<T>& bn) {
  const Tensor<T>& w = conv.weight();
  const std::int64_t o = w.dim(0);
  const std::int64_t per = w.numel() / o;
  FoldedConv<T> f{Tensor<T>(w.shape()), Tensor<T>(Shape{o})};
  const auto g = bn.gamma().data();
  const auto b = bn.beta().data();
  const auto mu = bn.running_mean().data();
  const auto var = bn.running_var().data();
  auto wo = f.weight.data();
  auto bo = f.bias.data();
  const auto wi = w.data();
  for (std::int64_t c = 0; c < o; ++c) {
    const double k = static_cast<double>(g[c]) / std::sqrt(static_cast<double>(var[c]) + BatchNorm2d<T>::kEps);
    for (std::int64_t i = 0; i < per; ++i) wo[c * per + i] = static_cast<T>(wi[c * per + i] * k);
    double bias = static_cast<double>(b[c]) - static_cast<double>(mu[c]) * k;
    if (conv.bias().defined()) bias += static_cast<double>(conv.bias().data()[c]) * k;
    bo[c] = static_cast<T>(bias);
  }
  return f;
}

template <typename T>
RepConvN<T>::RepConvN(std::int64_t c_in, std::int64_t c_out, int stride, Rng& rng)
    : dense_(c_in, c_out, 3, stride, rng, 1, false), pointwise_(c_in, c_out, 1, stride, rng, 1, false), stride_(stride) {}

template <typename T>
Tensor<T> RepConvN<T>::forward(const Tensor<T>& x) {
  return forward(x, deployed() ? RepMode::kDeploy : RepMode::kTrain);
}

template <typename T>
Tensor<T> RepConvN<T>::forward(const Tensor<T>& x, RepMode mode) {
  if (mode == RepMode::kDeploy) {
    if (!fused_) throw StateError("RepConvN: deploy-mode forward requires fuse() first");
    return silu(conv2d(x, fused_->weight, fused_->bias, {stride_, 1, 1}));
  }
  return silu(add(dense_.forward(x), pointwise_.forward(x)));
}

template <typename T>
void RepConvN<T>::fuse() {
  if (fused_) throw StateError("RepConvN: already deployed (fused twice)");
  if (this->training_) throw StateError("RepConvN: fuse() needs eval mode (finalized batch-norm statistics)");
  FoldedConv<T> d = fold_conv_bn(dense_.conv(), dense_.bn());
  FoldedConv<T> p = fold_conv_bn(pointwise_.conv(), pointwise_.bn());
  const std::int64_t o = d.weight.dim(0), i = d.weight.dim(1);
  auto wd = d.weight.data();
  const auto wp = p.weight.data();
  for (std::int64_t oc = 0; oc < o; ++oc)
    for (std::int64_t ic = 0; ic < i; ++ic) wd[((oc * i + ic) * 3 + 1) * 3 + 1] += wp[oc * i + ic];
  auto bd = d.bias.data();
  const auto bp = p.bias.data();
  for (std::int64_t oc = 0; oc < o; ++oc) bd[oc] += bp[oc];
  fused_ = std::move(d);
}

template <typename T>
const FoldedConv<T>& RepConvN<T>::fused() const {
  if (!fused_) throw StateError("RepConvN: not fused");
  return *fused_;
}

template <typename T>
void RepConvN<T>::visit(ModuleVisitor<T>& v) {
  v.child("dense", dense_);
  v.child("pointwise", pointwise_);
}

// ---------------------------------------------------------------- FcBlock

template <typename T>
FcBlock<T>::FcBlock(std::vector<std::int64_t> c_ins, std::int64_t c_out, int depth, Rng& rng)
    : c_ins_(std::move(c_ins)), c_out_(c_out) {
  if (c_ins_.empty()) throw ConfigError("fusion block needs at least one input");
  if (depth < 1) throw ConfigError("fusion block depth must be >= 1");
  std::int64_t total = 0;
  for (auto c : c_ins_) total += c;
  const std::int64_t hidden = std::max<std::int64_t>(c_out / 2, 1);
  cv_pass_ = Cbs<T>(total, hidden, 1, 1, rng);
  cv_chain_ = Cbs<T>(total, hidden, 1, 1, rng);
  for (int s = 0; s < depth; ++s) {
    RepConvN<T> rep(hidden, hidden, 1, rng);
    Cbs<T> cbs(hidden, hidden, 3, 1, rng);
    stages_.push_back(Stage{std::move(rep), std::move(cbs)});
  }
  cv_out_ = Cbs<T>(hidden * (1 + depth), c_out, 1, 1, rng);
}

template <typename T>
Tensor<T> FcBlock<T>::forward(const std::vector<Tensor<T>>& inputs) {
  if (inputs.size() != c_ins_.size())
    throw ShapeError("fusion block expects " + std::to_string(c_ins_.size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  for (std::size_t i = 1; i < inputs.size(); ++i)
    if (inputs[i].dim(2) != inputs[0].dim(2) || inputs[i].dim(3) != inputs[0].dim(3))
      throw ShapeError("fusion block input " + std::to_string(i) + " spatial size " + shape_str(inputs[i].shape()) +
                       " differs from input 0 " + shape_str(inputs[0].shape()));
  Tensor<T> x = inputs.size() == 1 ? inputs[0] : concat(inputs, 1);
  std::vector<Tensor<T>> parts{cv_pass_.forward(x)};
  Tensor<T> h = cv_chain_.forward(x);
  for (auto& s : stages_) {
    h = s.cbs.forward(s.rep.forward(h));
    parts.push_back(h);
  }
  return cv_out_.forward(concat(parts, 1));
}

template <typename T>
void FcBlock<T>::visit(ModuleVisitor<T>& v) {
  v.child("cv_pass", cv_pass_);
  v.child("cv_chain", cv_chain_);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    v.child("stages." + std::to_string(i) + ".rep", stages_[i].rep);
    v.child("stages." + std::to_string(i) + ".cbs", stages_[i].cbs);
  }
  v.child("cv_out", cv_out_);
}

// ---------------------------------------------------------------- CoordAttention

template <typename T>
CoordAttention<T>::CoordAttention(std::int64_t channels, int reduction, Rng& rng)
    : mip_([&] {
        if (reduction < 1) throw ConfigError("coordinate attention reduction must be >= 1");
        return std::max<std::int64_t>(8, channels / reduction);
      }()),
      reduce_(channels, mip_, 1, 1, rng),
      gate_h_(mip_, channels, 1, 1, 1, true, rng),
      gate_w_(mip_, channels, 1, 1, 1, true, rng) {}

template <typename T>
Tensor<T> CoordAttention<T>::forward(const Tensor<T>& x) {
  const std::int64_t h = x.dim(2), w = x.dim(3);
  Tensor<T> pool_h = mean_over(x, {3});                           // (N,C,H,1)
  Tensor<T> pool_w = permute(mean_over(x, {2}), {0, 1, 3, 2});    // (N,C,W,1)
  Tensor<T> y = reduce_.forward(concat<T>({pool_h, pool_w}, 2));  // (N,mip,H+W,1)
  auto parts = split(y, 2, {h, w});
  Tensor<T> gh = sigmoid(gate_h_.forward(parts[0]));                               // (N,C,H,1)
  Tensor<T> gw = sigmoid(gate_w_.forward(permute(parts[1], {0, 1, 3, 2})));        // (N,C,1,W)
  return mul(mul(x, gh), gw);
}

template <typename T>
void CoordAttention<T>::visit(ModuleVisitor<T>& v) {
  v.child("reduce", reduce_);
  v.child("gate_h", gate_h_);
  v.child("gate_w", gate_w_);
}

// ---------------------------------------------------------------- TransformerEncoder

template <typename T>
TransformerEncoder<T>::EncoderLayer::EncoderLayer(std::int64_t c, int mlp_ratio, Rng& rng)
    : q(c, c, rng), k(c, c, rng, false), v(c, c, rng), o(c, c, rng), ln1(c), mlp1(c, c * mlp_ratio, rng),
      mlp2(c * mlp_ratio, c, rng), ln2(c) {}

template <typename T>
void TransformerEncoder<T>::EncoderLayer::visit(ModuleVisitor<T>& vis) {
  vis.child("q", q);
  vis.child("k", k);
  vis.child("v", v);
  vis.child("o", o);
  vis.child("ln1", ln1);
  vis.child("mlp1", mlp1);
  vis.child("mlp2", mlp2);
  vis.child("ln2", ln2);
}

template <typename T>
TransformerEncoder<T>::TransformerEncoder(std::int64_t channels, const EncoderSpec& spec, Rng& rng)
    : c_(channels), spec_(spec) {
  if (spec.heads < 1 || channels % spec.heads != 0)
    throw ConfigError("transformer encoder: channels " + std::to_string(channels) + " not divisible by heads " +
                      std::to_string(spec.heads));
  if (spec.layers < 1 || spec.mlp_ratio < 1 || spec.max_tokens < 1)
    throw ConfigError("transformer encoder: layers, mlp_ratio and max_tokens must be positive");
  pos_ = Tensor<T>(Shape{spec.max_tokens, channels});
  for (auto& p : pos_.data()) p = static_cast<T>(0.02 * rng.normal());
  pos_.set_requires_grad(true);
  for (int i = 0; i < spec.layers; ++i) layers_.emplace_back(channels, spec.mlp_ratio, rng);
}

template <typename T>
Tensor<T> TransformerEncoder<T>::forward(const Tensor<T>& x) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c != c_) throw ShapeError("transformer encoder: expected " + std::to_string(c_) + " channels, got " + shape_str(x.shape()));
  const std::int64_t L = h * w;
  if (L > spec_.max_tokens)
    throw ShapeError("transformer encoder: " + std::to_string(L) + " tokens exceed positional capacity " +
                     std::to_string(spec_.max_tokens));
  const std::int64_t heads = spec_.heads, d = c / heads;
  Tensor<T> pos = L == spec_.max_tokens ? pos_ : split(pos_, 0, {L, spec_.max_tokens - L})[0];
  Tensor<T> t = add(permute(reshape(x, {n, c, L}), {0, 2, 1}), pos);  // (N,L,C)
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  for (auto& layer : layers_) {
    Tensor<T> q = reshape(permute(reshape(layer.q.forward(t), {n, L, heads, d}), {0, 2, 1, 3}), {n * heads, L, d});
    Tensor<T> kt = reshape(permute(reshape(layer.k.forward(t), {n, L, heads, d}), {0, 2, 3, 1}), {n * heads, d, L});
    Tensor<T> v = reshape(permute(reshape(layer.v.forward(t), {n, L, heads, d}), {0, 2, 1, 3}), {n * heads, L, d});
    Tensor<T> attn = softmax(scale(matmul(q, kt), inv_sqrt_d), -1);
    last_attention_ = attn;
    Tensor<T> ctx = reshape(permute(reshape(matmul(attn, v), {n, heads, L, d}), {0, 2, 1, 3}), {n, L, c});
    t = layer.ln1.forward(add(t, layer.o.forward(ctx)));
    t = layer.ln2.forward(add(t, layer.mlp2.forward(silu(layer.mlp1.forward(t)))));
  }
  return reshape(permute(t, {0, 2, 1}), {n, c, h, w});
}

template <typename T>
void TransformerEncoder<T>::visit(ModuleVisitor<T>& v) {
  v.param("pos", pos_);
  for (std::size_t i = 0; i < layers_.size(); ++i) v.child("layers." + std::to_string(i), layers_[i]);
}

// ---------------------------------------------------------------- SPPF

template <typename T>
Sppf<T>::Sppf(std::int64_t c_in, std::int64_t c_out, int kernel, Rng& rng)
    : cv1_(c_in, std::max<std::int64_t>(c_in / 2, 1), 1, 1, rng),
      cv2_(4 * std::max<std::int64_t>(c_in / 2, 1), c_out, 1, 1, rng),
      kernel_(kernel) {
  if (kernel % 2 == 0 || kernel < 1) throw ConfigError("SPPF kernel must be odd, got " + std::to_string(kernel));
}

template <typename T>
Tensor<T> Sppf<T>::forward(const Tensor<T>& x) {
  Tensor<T> a = cv1_.forward(x);
  Tensor<T> y1 = max_pool2d(a, kernel_, 1, kernel_ / 2);
  Tensor<T> y2 = max_pool2d(y1, kernel_, 1, kernel_ / 2);
  Tensor<T> y3 = max_pool2d(y2, kernel_, 1, kernel_ / 2);
  return cv2_.forward(concat<T>({a, y1, y2, y3}, 1));
}

template <typename T>
void Sppf<T>::visit(ModuleVisitor<T>& v) {
  v.child("cv1", cv1_);
  v.child("cv2", cv2_);
}

#define MICRODET_INSTANTIATE_BLOCKS(T)                                   \
  template class GhostConv<T>;                                           \
  template class GhostBottleneck<T>;                                     \
  template class Bottleneck<T>;                                          \
  template class C3<T>;                                                  \
  template FoldedConv<T> fold_conv_bn(Conv2d<T>&, BatchNorm2d<T>&);      \
  template class RepConvN<T>;                                            \
  template class FcBlock<T>;                                             \
  template class CoordAttention<T>;                                      \
  template class TransformerEncoder<T>;                                  \
  template class Sppf<T>;

MICRODET_INSTANTIATE_BLOCKS(float)
MICRODET_INSTANTIATE_BLOCKS(double)

}  // namespace microdet::nn
