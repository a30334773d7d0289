#include "microdet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ops_internal.hpp"

namespace microdet {

using detail::normalize_axis;

namespace {

thread_local MacCounter* g_mac_top = nullptr;
thread_local KinkProbe* g_kink_top = nullptr;

Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

struct Broadcast {
  Shape out;
  Shape a_strides;  // strides of a expressed in out's index space (0 = broadcast)
  Shape b_strides;
  bool same = false;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  bc.out.assign(r, 1);
  Shape ap(r, 1), bp(r, 1);
  std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                       " at dimension " + std::to_string(i));
    bc.out[i] = std::max(ap[i], bp[i]);
  }
  const Shape as = strides_of(ap), bs = strides_of(bp);
  bc.a_strides.resize(r);
  bc.b_strides.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    bc.a_strides[i] = ap[i] == 1 ? 0 : as[i];
    bc.b_strides[i] = bp[i] == 1 ? 0 : bs[i];
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::int64_t n = shape_numel(bc.out);
  if (bc.same) {
    for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = bc.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ai = 0, bi = 0;
  const std::int64_t inner = bc.out[r - 1];
  const std::int64_t sa = bc.a_strides[r - 1], sb = bc.b_strides[r - 1];
  for (std::int64_t o = 0; o < n; o += inner) {
    for (std::int64_t k = 0; k < inner; ++k) f(o + k, ai + k * sa, bi + k * sb);
    // advance all but the last dimension
    for (int d = static_cast<int>(r) - 2; d >= 0; --d) {
      ++idx[d];
      ai += bc.a_strides[d];
      bi += bc.b_strides[d];
      if (idx[d] < bc.out[d]) break;
      ai -= bc.a_strides[d] * idx[d];
      bi -= bc.b_strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  Broadcast bc = broadcast_shapes(a.shape(), b.shape(), op);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(bc.out)));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  switch (kind) {
    case BinaryKind::kAdd:
      for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) { out[o] = pa[i] + pb[j]; });
      break;
    case BinaryKind::kSub:
      for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) { out[o] = pa[i] - pb[j]; });
      break;
    case BinaryKind::kMul:
      for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) { out[o] = pa[i] * pb[j]; });
      break;
  }
  auto ia = a.impl(), ib = b.impl();
  Shape out_shape = bc.out;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), op, {&a, &b},
      [ia, ib, bc = std::move(bc), kind](std::span<const T> g) {
        T* ga = detail::grad_sink(ia);
        T* gb = detail::grad_sink(ib);
        const T* va = ia->data.data();
        const T* vb = ib->data.data();
        switch (kind) {
          case BinaryKind::kAdd:
          case BinaryKind::kSub: {
            const T sign = kind == BinaryKind::kSub ? T(-1) : T(1);
            for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
              if (ga) ga[i] += g[o];
              if (gb) gb[j] += sign * g[o];
            });
            break;
          }
          case BinaryKind::kMul:
            for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
              if (ga) ga[i] += g[o] * vb[j];
              if (gb) gb[j] += g[o] * va[i];
            });
            break;
        }
      });
}

}  // namespace

// ---------------------------------------------------------------- counters

MacCounter::MacCounter() : parent_(g_mac_top) { g_mac_top = this; }
MacCounter::~MacCounter() { g_mac_top = parent_; }

void count_macs(std::uint64_t n) {
  for (MacCounter* c = g_mac_top; c != nullptr; c = c->parent_) c->total_ += n;
}

KinkProbe::KinkProbe()
    : min_distance_(std::numeric_limits<double>::infinity()), parent_(g_kink_top) {
  g_kink_top = this;
}
KinkProbe::~KinkProbe() { g_kink_top = parent_; }

void report_kink(double distance) {
  for (KinkProbe* p = g_kink_top; p != nullptr; p = p->parent_)
    p->min_distance_ = std::min(p->min_distance_, distance);
}

bool kink_probe_active() { return g_kink_top != nullptr; }

// ---------------------------------------------------------------- activations

Activation parse_activation(std::string_view name) {
  if (name == "silu") return Activation::kSilu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected silu, sigmoid or relu)");
}

std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::kSilu: return "silu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kRelu: return "relu";
  }
  return "?";
}

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  const auto in = x.data();
  const std::size_t n = in.size();
  std::vector<T> out(n);
  switch (kind) {
    case Activation::kSilu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] / (T(1) + std::exp(-in[i]));
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-in[i]));
      break;
    case Activation::kRelu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
      if (kink_probe_active()) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) d = std::min(d, std::abs(static_cast<double>(in[i])));
        report_kink(d);
      }
      break;
  }
  std::vector<T> saved;
  if (kind == Activation::kSigmoid && grad_mode_enabled() && x.requires_grad()) saved = out;
  auto ix = x.impl();
  return detail::make_result<T>(
      x.shape(), std::move(out), "activation", {&x},
      [ix, kind, saved = std::move(saved)](std::span<const T> g) {
        T* gx = detail::grad_sink(ix);
        if (!gx) return;
        const T* v = ix->data.data();
        const std::size_t m = g.size();
        switch (kind) {
          case Activation::kSilu:
            for (std::size_t i = 0; i < m; ++i) {
              const T s = T(1) / (T(1) + std::exp(-v[i]));
              gx[i] += g[i] * s * (T(1) + v[i] * (T(1) - s));
            }
            break;
          case Activation::kSigmoid:
            for (std::size_t i = 0; i < m; ++i) gx[i] += g[i] * saved[i] * (T(1) - saved[i]);
            break;
          case Activation::kRelu:
            for (std::size_t i = 0; i < m; ++i)
              if (v[i] > T(0)) gx[i] += g[i];
            break;
        }
      });
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
  auto ix = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "scale", {&x},
                                [ix, factor](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
                                });
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int r = static_cast<int>(s0.size());
  axis = normalize_axis(axis, r, "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (static_cast<int>(s.size()) != r)
      throw ShapeError("concat: input " + std::to_string(p) + " has rank " + std::to_string(s.size()) +
                       ", expected " + std::to_string(r));
    for (int d = 0; d < r; ++d)
      if (d != axis && s[d] != s0[d])
        throw ShapeError("concat: input " + std::to_string(p) + " shape " + shape_str(s) +
                         " differs from " + shape_str(s0) + " at dimension " + std::to_string(d));
    out_shape[axis] += s[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < r; ++d) inner *= s0[d];
  const std::int64_t out_row = out_shape[axis] * inner;

  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t len = p.shape()[axis] * inner;
    const T* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(src + o * len, len, out.data() + o * out_row + off);
    off += len;
  }
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), "concat", parts,
      [impls, offsets, outer, inner, out_row, axis](std::span<const T> g) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          T* gp = detail::grad_sink(impls[k]);
          if (!gp) continue;
          const std::int64_t len = impls[k]->shape[axis] * inner;
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = g.data() + o * out_row + offsets[k];
            T* dst = gp + o * len;
            for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& sizes) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  axis = normalize_axis(axis, r, "split");
  std::int64_t total = 0;
  for (auto z : sizes) {
    if (z <= 0) throw ShapeError("split: section sizes must be positive");
    total += z;
  }
  if (total != s[axis])
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but dimension " +
                     std::to_string(axis) + " of " + shape_str(s) + " is " + std::to_string(s[axis]));
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < r; ++d) inner *= s[d];
  const std::int64_t in_row = s[axis] * inner;

  std::vector<Tensor<T>> outs;
  std::int64_t off = 0;
  auto ix = x.impl();
  for (auto z : sizes) {
    Shape os = s;
    os[axis] = z;
    const std::int64_t len = z * inner;
    std::vector<T> out(static_cast<std::size_t>(outer * len));
    const T* src = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o) std::copy_n(src + o * in_row + off, len, out.data() + o * len);
    outs.push_back(detail::make_result<T>(std::move(os), std::move(out), "split", {&x},
                                          [ix, outer, len, in_row, off](std::span<const T> g) {
                                            T* gx = detail::grad_sink(ix);
                                            if (!gx) return;
                                            for (std::int64_t o = 0; o < outer; ++o) {
                                              T* dst = gx + o * in_row + off;
                                              const T* src = g.data() + o * len;
                                              for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
                                            }
                                          }));
    off += len;
  }
  return outs;
}

template <typename T>
Tensor<T> mean_over(const Tensor<T>& x, const std::vector<int>& axes) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  std::vector<bool> reduce(r, false);
  for (int a : axes) {
    const int ax = normalize_axis(a, r, "mean_over");
    if (reduce[ax]) throw ShapeError("mean_over: axis " + std::to_string(ax) + " listed twice");
    reduce[ax] = true;
  }
  Shape out_shape = s;
  std::int64_t count = 1;
  for (int d = 0; d < r; ++d)
    if (reduce[d]) {
      count *= s[d];
      out_shape[d] = 1;
    }
  // Map input positions onto output positions through output strides.
  const Shape ost = strides_of(out_shape);
  Broadcast bc;
  bc.out = s;
  bc.a_strides.resize(r);
  bc.b_strides.assign(r, 0);
  for (int d = 0; d < r; ++d) bc.a_strides[d] = reduce[d] ? 0 : ost[d];

  std::vector<double> acc(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
  const T* in = x.data().data();
  for_each_broadcast(bc, [&](std::int64_t i, std::int64_t o, std::int64_t) { acc[o] += in[i]; });
  std::vector<T> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / static_cast<double>(count));
  auto ix = x.impl();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "mean_over", {&x},
                                [ix, bc = std::move(bc), count](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  const T inv = T(1) / static_cast<T>(count);
                                  for_each_broadcast(bc, [&](std::int64_t i, std::int64_t o, std::int64_t) {
                                    gx[i] += g[o] * inv;
                                  });
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  auto ix = x.impl();
  return detail::make_result<T>(Shape{1}, std::vector<T>{static_cast<T>(acc)}, "sum", {&x},
                                [ix](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += g[0];
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto ix = x.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {&x},
                                [ix](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (static_cast<int>(perm.size()) != r)
    throw ShapeError("permute: permutation length " + std::to_string(perm.size()) +
                     " does not match rank of " + shape_str(s));
  std::vector<bool> used(r, false);
  for (int p : perm) {
    if (p < 0 || p >= r || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  const Shape ist = strides_of(s);
  Broadcast bc;
  bc.out.resize(r);
  bc.a_strides.resize(r);
  bc.b_strides.assign(r, 0);
  for (int d = 0; d < r; ++d) {
    bc.out[d] = s[perm[d]];
    bc.a_strides[d] = ist[perm[d]];
  }
  std::vector<T> out(x.data().size());
  const T* in = x.data().data();
  for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t) { out[o] = in[i]; });
  auto ix = x.impl();
  Shape out_shape = bc.out;
  return detail::make_result<T>(std::move(out_shape), std::move(out), "permute", {&x},
                                [ix, bc = std::move(bc)](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t) {
                                    gx[i] += g[o];
                                  });
                                });
}

#define MICRODET_INSTANTIATE_OPS(T)                                                             \
  template Tensor<T> activation(Activation, const Tensor<T>&);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                \
  template std::vector<Tensor<T>> split(const Tensor<T>&, int, const std::vector<std::int64_t>&); \
  template Tensor<T> mean_over(const Tensor<T>&, const std::vector<int>&);                      \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);

MICRODET_INSTANTIATE_FLOATING(MICRODET_INSTANTIATE_OPS)

}  // namespace microdet
