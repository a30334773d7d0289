#include <algorithm>
#include <cmath>
#include <limits>

#include "microdet/ops.hpp"
#include "ops_internal.hpp"

namespace microdet {

namespace {

struct ConvGeometry {
  std::int64_t n, c, h, w;     // input
  std::int64_t o, kh, kw;      // kernel
  std::int64_t ho, wo;         // output
  std::int64_t groups, cg, og; // channels per group (in / out)
  int stride, pad;

  std::int64_t plane() const { return ho * wo; }
  std::int64_t k() const { return cg * kh * kw; }
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOptions& opt) {
  detail::require_rank(xs, 4, "conv2d", "input");
  detail::require_rank(ws, 4, "conv2d", "kernel");
  if (opt.stride <= 0) throw ShapeError("conv2d: stride must be positive, got " + std::to_string(opt.stride));
  if (opt.pad < 0) throw ShapeError("conv2d: pad must be non-negative, got " + std::to_string(opt.pad));
  if (opt.groups <= 0) throw ShapeError("conv2d: groups must be positive, got " + std::to_string(opt.groups));
  ConvGeometry g{};
  g.n = xs[0];
  g.c = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.o = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.groups = opt.groups;
  g.stride = opt.stride;
  g.pad = opt.pad;
  if (g.c % g.groups != 0)
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(g.c) + " not divisible by groups " +
                     std::to_string(g.groups));
  if (g.o % g.groups != 0)
    throw ShapeError("conv2d: output channels (kernel dim 0) = " + std::to_string(g.o) +
                     " not divisible by groups " + std::to_string(g.groups));
  g.cg = g.c / g.groups;
  g.og = g.o / g.groups;
  if (ws[1] != g.cg)
    throw ShapeError("conv2d: kernel dim 1 = " + std::to_string(ws[1]) + " but input channels / groups = " +
                     std::to_string(g.cg) + " (input " + shape_str(xs) + ", kernel " + shape_str(ws) + ")");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw || g.ho <= 0 || g.wo <= 0)
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(xs) + ", kernel " + shape_str(ws) +
                     ", stride " + std::to_string(g.stride) + ", pad " + std::to_string(g.pad));
  return g;
}

// Column matrix (K x N*P) for group `grp`: row = (c*kh + ky)*kw + kx.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::int64_t grp, T* col) {
  const std::int64_t np = g.n * g.plane();
  for (std::int64_t c = 0; c < g.cg; ++c) {
    const std::int64_t ch = grp * g.cg + c;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * np;
        for (std::int64_t b = 0; b < g.n; ++b) {
          const T* src = x + (b * g.c + ch) * g.h * g.w;
          T* dst = row + b * g.plane();
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            T* drow = dst + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill_n(drow, g.wo, T(0));
              continue;
            }
            const T* srow = src + iy * g.w;
            if (g.stride == 1) {
              for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                const std::int64_t ix = ox - g.pad + kx;
                drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : T(0);
              }
            } else {
              for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                const std::int64_t ix = ox * g.stride - g.pad + kx;
                drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, std::int64_t grp, T* dx) {
  const std::int64_t np = g.n * g.plane();
  for (std::int64_t c = 0; c < g.cg; ++c) {
    const std::int64_t ch = grp * g.cg + c;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * np;
        for (std::int64_t b = 0; b < g.n; ++b) {
          T* dst = dx + (b * g.c + ch) * g.h * g.w;
          const T* src = row + b * g.plane();
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            T* drow = dst + iy * g.w;
            const T* srow = src + oy * g.wo;
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// One input channel per group: direct loops beat per-group GEMMs.
template <typename T>
void depthwise_forward(const T* x, const T* w, const ConvGeometry& g, T* out) {
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t oc = 0; oc < g.o; ++oc) {
      const std::int64_t ic = oc / g.og;
      const T* src = x + (b * g.c + ic) * g.h * g.w;
      const T* ker = w + oc * g.kh * g.kw;
      T* dst = out + (b * g.o + oc) * g.plane();
      for (std::int64_t oy = 0; oy < g.ho; ++oy)
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          T acc = T(0);
          for (std::int64_t ky = 0; ky < g.kh; ++ky) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.w) continue;
              acc += ker[ky * g.kw + kx] * src[iy * g.w + ix];
            }
          }
          dst[oy * g.wo + ox] = acc;
        }
    }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const ConvGeometry& g, const T* gout, T* gx, T* gw) {
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t oc = 0; oc < g.o; ++oc) {
      const std::int64_t ic = oc / g.og;
      const T* src = x + (b * g.c + ic) * g.h * g.w;
      T* dsrc = gx ? gx + (b * g.c + ic) * g.h * g.w : nullptr;
      const T* ker = w + oc * g.kh * g.kw;
      T* dker = gw ? gw + oc * g.kh * g.kw : nullptr;
      const T* go = gout + (b * g.o + oc) * g.plane();
      for (std::int64_t oy = 0; oy < g.ho; ++oy)
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          const T gv = go[oy * g.wo + ox];
          for (std::int64_t ky = 0; ky < g.kh; ++ky) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.w) continue;
              if (dsrc) dsrc[iy * g.w + ix] += ker[ky * g.kw + kx] * gv;
              if (dker) dker[ky * g.kw + kx] += src[iy * g.w + ix] * gv;
            }
          }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const Conv2dOptions& opt) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), opt);
  if (bias.defined() && bias.numel() != g.o)
    throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " elements, expected " +
                     std::to_string(g.o) + " (output channels)");
  count_macs(static_cast<std::uint64_t>(g.n * g.o * g.plane() * g.k()));

  const std::int64_t np = g.n * g.plane();
  std::vector<T> out(static_cast<std::size_t>(g.n * g.o * g.plane()));
  const bool depthwise = g.cg == 1;
  const bool needs_grad = detail::any_requires_grad<T>({&x, &w, &bias});
  std::vector<std::vector<T>> cols;

  if (depthwise) {
    depthwise_forward(x.data().data(), w.data().data(), g, out.data());
  } else {
    std::vector<T> col(static_cast<std::size_t>(g.k() * np));
    detail::RowMat<T> res(g.og, np);
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      im2col(x.data().data(), g, grp, col.data());
      detail::ConstMatMap<T> wm(w.data().data() + grp * g.og * g.k(), g.og, g.k());
      detail::ConstMatMap<T> cm(col.data(), g.k(), np);
      res.noalias() = wm * cm;
      for (std::int64_t oc = 0; oc < g.og; ++oc)
        for (std::int64_t b = 0; b < g.n; ++b)
          std::copy_n(res.data() + oc * np + b * g.plane(), g.plane(),
                      out.data() + (b * g.o + grp * g.og + oc) * g.plane());
      if (needs_grad) cols.push_back(col);
    }
  }
  if (bias.defined()) {
    const T* bv = bias.data().data();
    for (std::int64_t b = 0; b < g.n; ++b)
      for (std::int64_t oc = 0; oc < g.o; ++oc) {
        T* dst = out.data() + (b * g.o + oc) * g.plane();
        for (std::int64_t p = 0; p < g.plane(); ++p) dst[p] += bv[oc];
      }
  }

  auto ix = x.impl(), iw = w.impl();
  auto ib = bias.defined() ? bias.impl() : nullptr;
  return detail::make_result<T>(
      Shape{g.n, g.o, g.ho, g.wo}, std::move(out), "conv2d", {&x, &w, &bias},
      [ix, iw, ib, g, depthwise, cols = std::move(cols)](std::span<const T> gout) {
        T* gx = detail::grad_sink(ix);
        T* gw = detail::grad_sink(iw);
        T* gb = detail::grad_sink(ib);
        if (gb)
          for (std::int64_t b = 0; b < g.n; ++b)
            for (std::int64_t oc = 0; oc < g.o; ++oc) {
              const T* src = gout.data() + (b * g.o + oc) * g.plane();
              T acc = T(0);
              for (std::int64_t p = 0; p < g.plane(); ++p) acc += src[p];
              gb[oc] += acc;
            }
        if (depthwise) {
          depthwise_backward(ix->data.data(), iw->data.data(), g, gout.data(), gx, gw);
          return;
        }
        const std::int64_t np = g.n * g.plane();
        detail::RowMat<T> go(g.og, np);
        detail::RowMat<T> dcol;
        for (std::int64_t grp = 0; grp < g.groups; ++grp) {
          for (std::int64_t oc = 0; oc < g.og; ++oc)
            for (std::int64_t b = 0; b < g.n; ++b)
              std::copy_n(gout.data() + (b * g.o + grp * g.og + oc) * g.plane(), g.plane(),
                          go.data() + oc * np + b * g.plane());
          detail::ConstMatMap<T> cm(cols[static_cast<std::size_t>(grp)].data(), g.k(), np);
          if (gw) {
            detail::MatMap<T> gwm(gw + grp * g.og * g.k(), g.og, g.k());
            gwm.noalias() += go * cm.transpose();
          }
          if (gx) {
            detail::ConstMatMap<T> wm(iw->data.data() + grp * g.og * g.k(), g.og, g.k());
            dcol.noalias() = wm.transpose() * go;
            col2im(dcol.data(), g, grp, gx);
          }
        }
      });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int pad) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "max_pool2d", "input");
  if (kernel <= 0 || stride <= 0 || pad < 0 || pad > kernel / 2)
    throw ShapeError("max_pool2d: invalid kernel/stride/pad " + std::to_string(kernel) + "/" +
                     std::to_string(stride) + "/" + std::to_string(pad));
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::int64_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - kernel) / stride + 1;
  if (h + 2 * pad < kernel || w + 2 * pad < kernel || ho <= 0 || wo <= 0)
    throw ShapeError("max_pool2d: non-positive output size for input " + shape_str(s));
  const bool probe = kink_probe_active();
  double min_gap = std::numeric_limits<double>::infinity();

  std::vector<T> out(static_cast<std::size_t>(n * c * ho * wo));
  std::vector<std::int32_t> arg(out.size());
  const T* in = x.data().data();
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const T* src = in + plane * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        T second = -std::numeric_limits<T>::infinity();
        std::int32_t best_i = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const std::int64_t ixx = ox * stride - pad + kx;
            if (ixx < 0 || ixx >= w) continue;
            const T v = src[iy * w + ixx];
            if (v > best) {
              second = best;
              best = v;
              best_i = static_cast<std::int32_t>(iy * w + ixx);
            } else if (v > second && v < best) {
              // Exact duplicates are copies from an earlier pool, not a tie.
              second = v;
            }
          }
        }
        const std::int64_t o = (plane * ho + oy) * wo + ox;
        out[o] = best;
        arg[o] = best_i;
        if (probe && std::isfinite(static_cast<double>(second)))
          min_gap = std::min(min_gap, static_cast<double>(best - second));
      }
  }
  if (probe) report_kink(min_gap);
  auto ix = x.impl();
  return detail::make_result<T>(Shape{n, c, ho, wo}, std::move(out), "max_pool2d", {&x},
                                [ix, arg = std::move(arg), h, w, ho, wo](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  const std::int64_t per = ho * wo;
                                  for (std::size_t o = 0; o < g.size(); ++o) {
                                    const std::int64_t plane = static_cast<std::int64_t>(o) / per;
                                    gx[plane * h * w + arg[o]] += g[o];
                                  }
                                });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "upsample_nearest", "input");
  if (factor <= 0) throw ShapeError("upsample_nearest: factor must be positive");
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::int64_t ho = h * factor, wo = w * factor;
  std::vector<T> out(static_cast<std::size_t>(n * c * ho * wo));
  const T* in = x.data().data();
  for (std::int64_t plane = 0; plane < n * c; ++plane)
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const T* srow = in + (plane * h + oy / factor) * w;
      T* drow = out.data() + (plane * ho + oy) * wo;
      for (std::int64_t ox = 0; ox < wo; ++ox) drow[ox] = srow[ox / factor];
    }
  auto ix = x.impl();
  return detail::make_result<T>(Shape{n, c, ho, wo}, std::move(out), "upsample_nearest", {&x},
                                [ix, n, c, h, w, factor](std::span<const T> g) {
                                  T* gx = detail::grad_sink(ix);
                                  if (!gx) return;
                                  const std::int64_t ho = h * factor, wo = w * factor;
                                  for (std::int64_t plane = 0; plane < n * c; ++plane)
                                    for (std::int64_t oy = 0; oy < ho; ++oy) {
                                      T* drow = gx + (plane * h + oy / factor) * w;
                                      const T* srow = g.data() + (plane * ho + oy) * wo;
                                      for (std::int64_t ox = 0; ox < wo; ++ox) drow[ox / factor] += srow[ox];
                                    }
                                });
}

#define MICRODET_INSTANTIATE_CONV(T)                                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dOptions&); \
  template Tensor<T> max_pool2d(const Tensor<T>&, int, int, int);                                \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);

MICRODET_INSTANTIATE_FLOATING(MICRODET_INSTANTIATE_CONV)

}  // namespace microdet
