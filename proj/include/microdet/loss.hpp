#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "microdet/box.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

inline constexpr int kNumScales = 3;
inline constexpr int kAnchorsPerScale = 3;
inline constexpr std::array<int, kNumScales> kStrides{8, 16, 32};

struct AnchorWH {
  double w = 0.0, h = 0.0;
};

// Pixel anchors per scale (P3, P4, P5), each sorted ascending by area.
struct AnchorSet {
  std::array<std::array<AnchorWH, kAnchorsPerScale>, kNumScales> wh{};

  // Defaults designed for 64 px inputs, scaled linearly with img_size.
  static AnchorSet defaults(int img_size);
  void validate() const;
};

// Sigmoid-based cell decode shared by the loss and inference.
template <typename S>
BoxT<S> decode_cell(const S& tx, const S& ty, const S& tw, const S& th, int gx, int gy, int stride,
                    const AnchorWH& anchor) {
  const S two(2.0), half(0.5);
  const S sx = sigmoid(tx), sy = sigmoid(ty), sw = sigmoid(tw), sh = sigmoid(th);
  const S bw = two * sw, bh = two * sh;
  return {(two * sx - half + S(gx)) * S(stride), (two * sy - half + S(gy)) * S(stride), bw * bw * S(anchor.w),
          bh * bh * S(anchor.h)};
}

struct Assignment {
  int batch = 0;
  int anchor = 0;
  int gy = 0, gx = 0;
  // Target in grid units: center relative to the cell corner (in (-0.5, 1.5))
  // and size.
  double ox = 0.0, oy = 0.0, gw = 0.0, gh = 0.0;
  int class_id = 0;
  int gt_index = 0;  // index into that image's ground-truth list
};

struct AssignedTargets {
  std::array<std::vector<Assignment>, kNumScales> scales;
  int unassigned = 0;  // ground truths matched by no anchor at any scale
  std::size_t total() const { return scales[0].size() + scales[1].size() + scales[2].size(); }
};

inline constexpr double kAnchorRatio = 4.0;

// Ratio filter max(w/aw, aw/w, h/ah, ah/h) < 4, then the containing cell plus
// the nearer horizontal and vertical neighbor (fractional offset < 0.5 rule).
AssignedTargets assign(const std::vector<std::vector<GroundTruth>>& batch_gts, const AnchorSet& anchors,
                       int img_size);

// Logits that decode_cell maps back onto the assignment's ground truth.
struct EncodedBox {
  double tx, ty, tw, th;
};
EncodedBox encode(const Assignment& a, const AnchorSet& anchors, int scale);

struct LossConfig {
  int n_classes = 1;
  bool nwd = false;             // toggle IV: NWD instead of CIoU
  double nwd_mix = 1.0;         // sim = (1 - mix) * ciou + mix * nwd when nwd is on
  NwdParams nwd_params{};
  std::array<double, kNumScales> balance{4.0, 1.0, 0.4};
  double box_weight = 0.05;
  double obj_weight = 1.0;
  double cls_weight = 0.5;
};

struct LossBreakdown {
  double total = 0.0, box = 0.0, obj = 0.0, cls = 0.0;
  std::vector<double> similarity;  // per assignment, scale-major
};

// total = box_w * mean(1 - sim) + obj_w * sum_s balance_s * BCE_s(obj) +
// cls_w * BCE(cls on positives). The objectness target of a positive cell is
// clamp(sim, 0, 1) treated as a constant; `frozen_similarity` substitutes
// precomputed values (used to check gradients with a fixed target).
template <typename T>
Tensor<T> composite_loss(const std::array<Tensor<T>, kNumScales>& raw, const AssignedTargets& targets,
                         const AnchorSet& anchors, const LossConfig& cfg, LossBreakdown* breakdown = nullptr,
                         std::span<const double> frozen_similarity = {});

}  // namespace microdet
