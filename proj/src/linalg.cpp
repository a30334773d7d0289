#include <algorithm>
#include <cmath>

#include "microdet/ops.hpp"
#include "ops_internal.hpp"

namespace microdet {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  bool batched_rhs = false;
  if (as.size() == 2 && bs.size() == 2) {
    m = as[0];
    k = as[1];
    n = bs[1];
    if (bs[0] != k) throw ShapeError("matmul: inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
  } else if (as.size() == 3 && bs.size() == 2) {
    // Shared right operand: fold the batch into rows.
    m = as[0] * as[1];
    k = as[2];
    n = bs[1];
    if (bs[0] != k) throw ShapeError("matmul: inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
  } else if (as.size() == 3 && bs.size() == 3) {
    batch = as[0];
    m = as[1];
    k = as[2];
    n = bs[2];
    if (bs[0] != batch) throw ShapeError("matmul: batch dims differ: " + shape_str(as) + " x " + shape_str(bs));
    if (bs[1] != k) throw ShapeError("matmul: inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
    batched_rhs = true;
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_str(as) + " x " + shape_str(bs));
  }
  count_macs(static_cast<std::uint64_t>(batch * m * k * n));
  Shape out_shape = as.size() == 2 ? Shape{m, n} : Shape{as[0], as[1], n};
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::ConstMatMap<T> am(a.data().data() + i * m * k, m, k);
    detail::ConstMatMap<T> bm(b.data().data() + (batched_rhs ? i * k * n : 0), k, n);
    detail::MatMap<T> om(out.data() + i * m * n, m, n);
    om.noalias() = am * bm;
  }
  auto ia = a.impl(), ib = b.impl();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), "matmul", {&a, &b},
      [ia, ib, batch, m, k, n, batched_rhs](std::span<const T> g) {
        T* ga = detail::grad_sink(ia);
        T* gb = detail::grad_sink(ib);
        for (std::int64_t i = 0; i < batch; ++i) {
          detail::ConstMatMap<T> gm(g.data() + i * m * n, m, n);
          const std::int64_t boff = batched_rhs ? i * k * n : 0;
          if (ga) {
            detail::ConstMatMap<T> bm(ib->data.data() + boff, k, n);
            detail::MatMap<T> gam(ga + i * m * k, m, k);
            gam.noalias() += gm * bm.transpose();
          }
          if (gb) {
            detail::ConstMatMap<T> am(ia->data.data() + i * m * k, m, k);
            detail::MatMap<T> gbm(gb + boff, k, n);
            gbm.noalias() += am.transpose() * gm;
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  axis = detail::normalize_axis(axis, r, "softmax");
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < r; ++d) inner *= s[d];
  const std::int64_t len = s[axis];
  const T* in = x.data().data();
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * len * inner + i;
      T mx = in[base];
      for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      T total = T(0);
      for (std::int64_t j = 0; j < len; ++j) {
        const T e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::int64_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
    }
  std::vector<T> saved;
  if (detail::any_requires_grad<T>({&x})) saved = out;
  auto ix = x.impl();
  return detail::make_result<T>(s, std::move(out), "softmax", {&x},
                                [ix, y = std::move(saved), outer, inner, len](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  for (std::int64_t o = 0; o < outer; ++o)
                                    for (std::int64_t i = 0; i < inner; ++i) {
                                      const std::int64_t base = o * len * inner + i;
                                      T dot = T(0);
                                      for (std::int64_t j = 0; j < len; ++j)
                                        dot += g[base + j * inner] * y[base + j * inner];
                                      for (std::int64_t j = 0; j < len; ++j) {
                                        const std::int64_t q = base + j * inner;
                                        gx[q] += y[q] * (g[q] - dot);
                                      }
                                    }
                                });
}

#define MICRODET_INSTANTIATE_LINALG(T)                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> softmax(const Tensor<T>&, int);

MICRODET_INSTANTIATE_FLOATING(MICRODET_INSTANTIATE_LINALG)

}  // namespace microdet
