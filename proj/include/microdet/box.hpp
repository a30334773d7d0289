#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "microdet/dual.hpp"

namespace microdet {

// Axis-aligned box (cx, cy, w, h). Detector outputs, losses and metrics work
// in pixels; label files store the same fields normalized to [0, 1].
template <typename S>
struct BoxT {
  S cx{}, cy{}, w{}, h{};
  S x1() const { return cx - w / S(2); }
  S y1() const { return cy - h / S(2); }
  S x2() const { return cx + w / S(2); }
  S y2() const { return cy + h / S(2); }
  static BoxT from_corners(S x1, S y1, S x2, S y2) { return {(x1 + x2) / S(2), (y1 + y2) / S(2), x2 - x1, y2 - y1}; }
};

using BBox = BoxT<double>;

struct GroundTruth {
  BBox box;  // pixels
  int class_id = 0;
};

struct Detection {
  BBox box;  // pixels
  int class_id = 0;
  double confidence = 0.0;
};

struct NwdParams {
  double c = 12.8;
};

template <typename S>
S intersection_area(const BoxT<S>& a, const BoxT<S>& b) {
  const S iw = smin(a.x2(), b.x2()) - smax(a.x1(), b.x1());
  const S ih = smin(a.y2(), b.y2()) - smax(a.y1(), b.y1());
  if (value_of(iw) <= 0.0 || value_of(ih) <= 0.0) return S(0.0);
  return iw * ih;
}

template <typename S>
S iou(const BoxT<S>& a, const BoxT<S>& b) {
  // Areas from the same corner differences as the intersection, so that
  // identical boxes give exactly 1.
  const S inter = intersection_area(a, b);
  const S uni = (a.x2() - a.x1()) * (a.y2() - a.y1()) + (b.x2() - b.x1()) * (b.y2() - b.y1()) - inter;
  return inter / uni;
}

// IoU - rho^2 / c^2 - alpha * v, with v = 4/pi^2 (atan(wb/hb) - atan(wa/ha))^2
// and alpha = v / (v - IoU + 1 + 1e-9); c is the enclosing-box diagonal.
template <typename S>
S ciou(const BoxT<S>& a, const BoxT<S>& b) {
  using std::atan;
  const S i = iou(a, b);
  const S cw = smax(a.x2(), b.x2()) - smin(a.x1(), b.x1());
  const S ch = smax(a.y2(), b.y2()) - smin(a.y1(), b.y1());
  const S c2 = cw * cw + ch * ch + S(1e-9);
  const S dx = a.cx - b.cx, dy = a.cy - b.cy;
  const S rho2 = dx * dx + dy * dy;
  const S dat = atan(b.w / b.h) - atan(a.w / a.h);
  const S v = S(4.0 / (std::numbers::pi * std::numbers::pi)) * dat * dat;
  const S alpha = v / (v - i + S(1.0 + 1e-9));
  return i - rho2 / c2 - alpha * v;
}

template <typename S>
S wasserstein2_sq(const BoxT<S>& a, const BoxT<S>& b) {
  const S dx = a.cx - b.cx, dy = a.cy - b.cy;
  const S dw = a.w / S(2) - b.w / S(2), dh = a.h / S(2) - b.h / S(2);
  return dx * dx + dy * dy + dw * dw + dh * dh;
}

// exp(-sqrt(W2^2) / C). Coincident boxes give exactly 1 with zero gradient.
template <typename S>
S nwd(const BoxT<S>& a, const BoxT<S>& b, const NwdParams& p = {}) {
  using std::exp;
  using std::sqrt;
  const S w2 = wasserstein2_sq(a, b);
  if (value_of(w2) == 0.0) return S(1.0);
  const S floored = value_of(w2) < 1e-12 ? S(1e-12) : w2;
  return exp(-sqrt(floored) / S(p.c));
}

}  // namespace microdet
