#include <cmath>

#include "microdet/ops.hpp"
#include "ops_internal.hpp"

namespace microdet {

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, const BatchNormOptions& opt) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "batch_norm", "input");
  if (!(opt.eps > 0)) throw ShapeError("batch_norm: eps must be positive");
  const std::int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  for (const Tensor<T>* t : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
                              static_cast<const Tensor<T>*>(&running_var)})
    if (t->numel() != c)
      throw ShapeError("batch_norm: per-channel tensor has " + std::to_string(t->numel()) +
                       " elements but input channels (dim 1) = " + std::to_string(c));
  const std::int64_t m = n * plane;
  const T* in = x.data().data();
  std::vector<T> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));

  if (opt.training) {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s1 = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* src = in + (b * c + ch) * plane;
        for (std::int64_t p = 0; p < plane; ++p) s1 += src[p];
      }
      const double mu = s1 / static_cast<double>(m);
      double s2 = 0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* src = in + (b * c + ch) * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
          const double d = src[p] - mu;
          s2 += d * d;
        }
      }
      const double var = s2 / static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      rm[ch] = static_cast<T>((1.0 - opt.momentum) * rm[ch] + opt.momentum * mu);
      rv[ch] = static_cast<T>((1.0 - opt.momentum) * rv[ch] + opt.momentum * unbiased);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + opt.eps));
    }
  }

  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> out(xhat.size());
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t base = (b * c + ch) * plane;
      const T mu = mean[ch], is = inv_std[ch], ga = gv[ch], be = bv[ch];
      for (std::int64_t p = 0; p < plane; ++p) {
        const T xh = (in[base + p] - mu) * is;
        xhat[base + p] = xh;
        out[base + p] = ga * xh + be;
      }
    }

  auto ix = x.impl(), ig = gamma.impl(), ibeta = beta.impl();
  const bool training = opt.training;
  if (!detail::any_requires_grad<T>({&x, &gamma, &beta})) xhat.clear();
  return detail::make_result<T>(
      s, std::move(out), "batch_norm", {&x, &gamma, &beta},
      [ix, ig, ibeta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane, m,
       training](std::span<const T> g) {
        T* gx = detail::grad_sink(ix);
        T* gg = detail::grad_sink(ig);
        T* gb = detail::grad_sink(ibeta);
        const T* ga = ig->data.data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sum_g = 0, sum_gx = 0;
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t base = (b * c + ch) * plane;
            for (std::int64_t p = 0; p < plane; ++p) {
              sum_g += g[base + p];
              sum_gx += static_cast<double>(g[base + p]) * xhat[base + p];
            }
          }
          if (gg) gg[ch] += static_cast<T>(sum_gx);
          if (gb) gb[ch] += static_cast<T>(sum_g);
          if (!gx) continue;
          const T k = ga[ch] * inv_std[ch];
          if (training) {
            const T mean_g = static_cast<T>(sum_g / static_cast<double>(m));
            const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(m));
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t base = (b * c + ch) * plane;
              for (std::int64_t p = 0; p < plane; ++p)
                gx[base + p] += k * (g[base + p] - mean_g - xhat[base + p] * mean_gx);
            }
          } else {
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t base = (b * c + ch) * plane;
              for (std::int64_t p = 0; p < plane; ++p) gx[base + p] += k * g[base + p];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  const Shape& s = x.shape();
  const std::int64_t d = s.back();
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " elements (last dim of " +
                     shape_str(s) + ")");
  const std::int64_t rows = x.numel() / d;
  const T* in = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  std::vector<T> xhat(static_cast<std::size_t>(x.numel())), out(xhat.size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = in + r * d;
    double s1 = 0;
    for (std::int64_t i = 0; i < d; ++i) s1 += src[i];
    const double mu = s1 / static_cast<double>(d);
    double s2 = 0;
    for (std::int64_t i = 0; i < d; ++i) s2 += (src[i] - mu) * (src[i] - mu);
    const T is = static_cast<T>(1.0 / std::sqrt(s2 / static_cast<double>(d) + eps));
    inv_std[r] = is;
    for (std::int64_t i = 0; i < d; ++i) {
      const T xh = (src[i] - static_cast<T>(mu)) * is;
      xhat[r * d + i] = xh;
      out[r * d + i] = gv[i] * xh + bv[i];
    }
  }
  auto ix = x.impl(), ig = gamma.impl(), ib = beta.impl();
  return detail::make_result<T>(
      s, std::move(out), "layer_norm", {&x, &gamma, &beta},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](std::span<const T> g) {
        T* gx = detail::grad_sink(ix);
        T* gg = detail::grad_sink(ig);
        T* gb = detail::grad_sink(ib);
        const T* ga = ig->data.data();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* xr = xhat.data() + r * d;
          double sum_d = 0, sum_dx = 0;
          for (std::int64_t i = 0; i < d; ++i) {
            const double dxh = static_cast<double>(gr[i]) * ga[i];
            sum_d += dxh;
            sum_dx += dxh * xr[i];
            if (gg) gg[i] += gr[i] * xr[i];
            if (gb) gb[i] += gr[i];
          }
          if (!gx) continue;
          const T mean_d = static_cast<T>(sum_d / static_cast<double>(d));
          const T mean_dx = static_cast<T>(sum_dx / static_cast<double>(d));
          for (std::int64_t i = 0; i < d; ++i)
            gx[r * d + i] += inv_std[r] * (gr[i] * ga[i] - mean_d - xr[i] * mean_dx);
        }
      });
}

#define MICRODET_INSTANTIATE_NORM(T)                                                                      \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                const BatchNormOptions&);                                                 \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);

MICRODET_INSTANTIATE_FLOATING(MICRODET_INSTANTIATE_NORM)

}  // namespace microdet
