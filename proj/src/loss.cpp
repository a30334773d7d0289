#include "microdet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "microdet/ops.hpp"
#include "ops_internal.hpp"

namespace microdet {

AnchorSet AnchorSet::defaults(int img_size) {
  const double k = img_size / 64.0;
  AnchorSet a;
  a.wh = {{{{{3, 3}, {6, 3}, {3, 6}}}, {{{6, 6}, {9, 5}, {5, 9}}}, {{{10, 10}, {16, 16}, {28, 28}}}}};
  for (auto& scale : a.wh)
    for (auto& x : scale) {
      x.w *= k;
      x.h *= k;
    }
  return a;
}

void AnchorSet::validate() const {
  for (int s = 0; s < kNumScales; ++s) {
    double prev = 0.0;
    for (int k = 0; k < kAnchorsPerScale; ++k) {
      const AnchorWH& x = wh[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)];
      const std::string at = "anchor " + std::to_string(k) + " of scale " + std::to_string(s);
      if (!(x.w > 0) || !(x.h > 0) || !std::isfinite(x.w) || !std::isfinite(x.h))
        throw ConfigError(at + " must have positive finite size");
      if (x.w * x.h < prev) throw ConfigError(at + " breaks ascending-area order");
      prev = x.w * x.h;
    }
  }
}

AssignedTargets assign(const std::vector<std::vector<GroundTruth>>& batch_gts, const AnchorSet& anchors,
                       int img_size) {
  AssignedTargets out;
  for (std::size_t b = 0; b < batch_gts.size(); ++b) {
    const auto& gts = batch_gts[b];
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const GroundTruth& gt = gts[g];
      bool any = false;
      for (int s = 0; s < kNumScales; ++s) {
        const int stride = kStrides[static_cast<std::size_t>(s)];
        const int grid = img_size / stride;
        const double gx = gt.box.cx / stride, gy = gt.box.cy / stride;
        const double gw = gt.box.w / stride, gh = gt.box.h / stride;
        const double fx = gx - std::floor(gx), fy = gy - std::floor(gy);
        const int cx = std::clamp(static_cast<int>(std::floor(gx)), 0, grid - 1);
        const int cy = std::clamp(static_cast<int>(std::floor(gy)), 0, grid - 1);
        // Center cell, then the neighbor nearer to the center along each axis.
        std::vector<std::pair<int, int>> cells{{cx, cy}};
        if (fx < 0.5 && gx > 1.0) cells.emplace_back(cx - 1, cy);
        if (fy < 0.5 && gy > 1.0) cells.emplace_back(cx, cy - 1);
        if (fx > 0.5 && gx < grid - 1.0) cells.emplace_back(cx + 1, cy);
        if (fy > 0.5 && gy < grid - 1.0) cells.emplace_back(cx, cy + 1);
        for (int k = 0; k < kAnchorsPerScale; ++k) {
          const AnchorWH& an = anchors.wh[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)];
          const double rw = gt.box.w / an.w, rh = gt.box.h / an.h;
          const double worst = std::max({rw, 1.0 / rw, rh, 1.0 / rh});
          if (!(worst < kAnchorRatio)) continue;
          any = true;
          for (const auto& [ix, iy] : cells) {
            Assignment a;
            a.batch = static_cast<int>(b);
            a.anchor = k;
            a.gx = ix;
            a.gy = iy;
            a.ox = gx - ix;
            a.oy = gy - iy;
            a.gw = gw;
            a.gh = gh;
            a.class_id = gt.class_id;
            a.gt_index = static_cast<int>(g);
            out.scales[static_cast<std::size_t>(s)].push_back(a);
          }
        }
      }
      if (!any) ++out.unassigned;
    }
  }
  return out;
}

namespace {
double logit(double p) { return std::log(p / (1.0 - p)); }
}  // namespace

EncodedBox encode(const Assignment& a, const AnchorSet& anchors, int scale) {
  const int stride = kStrides[static_cast<std::size_t>(scale)];
  const AnchorWH& an = anchors.wh[static_cast<std::size_t>(scale)][static_cast<std::size_t>(a.anchor)];
  return {logit((a.ox + 0.5) / 2.0), logit((a.oy + 0.5) / 2.0), logit(std::sqrt(a.gw * stride / an.w) / 2.0),
          logit(std::sqrt(a.gh * stride / an.h) / 2.0)};
}

namespace {

// Numerically stable binary cross-entropy with logits and its derivative.
double bce(double x, double y) { return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))); }
double bce_grad(double x, double y) { return sigmoid(x) - y; }

struct PositiveGrad {
  std::size_t scale;
  std::int64_t base;  // flat index of tx for this anchor/cell; channel step = plane
  std::array<double, 4> dsim;
};

}  // namespace

template <typename T>
Tensor<T> composite_loss(const std::array<Tensor<T>, kNumScales>& raw, const AssignedTargets& targets,
                         const AnchorSet& anchors, const LossConfig& cfg, LossBreakdown* breakdown,
                         std::span<const double> frozen_similarity) {
  const int nc = cfg.n_classes;
  const int per_anchor = 5 + nc;
  const std::size_t n_assigned = targets.total();
  if (!frozen_similarity.empty() && frozen_similarity.size() != n_assigned)
    throw ShapeError("composite_loss: frozen similarity has " + std::to_string(frozen_similarity.size()) +
                     " entries for " + std::to_string(n_assigned) + " assignments");
  const std::int64_t batch = raw[0].dim(0);
  for (int s = 0; s < kNumScales; ++s) {
    const auto& r = raw[static_cast<std::size_t>(s)];
    if (r.rank() != 4 || r.dim(1) != kAnchorsPerScale * per_anchor || r.dim(0) != batch)
      throw ShapeError("composite_loss: scale " + std::to_string(s) + " prediction has shape " + shape_str(r.shape()) +
                       ", expected (N, " + std::to_string(kAnchorsPerScale * per_anchor) + ", H, W)");
  }
  const bool probe = kink_probe_active();

  std::vector<PositiveGrad> positives;
  positives.reserve(n_assigned);
  std::vector<double> sims;
  sims.reserve(n_assigned);
  std::array<std::vector<double>, kNumScales> obj_target;
  double box_sum = 0.0, cls_sum = 0.0;
  std::vector<std::pair<std::int64_t, int>> cls_entries;  // (flat index of class 0 logit, class id) per positive

  for (std::size_t s = 0; s < kNumScales; ++s) {
    const auto& r = raw[s];
    const std::int64_t h = r.dim(2), w = r.dim(3), plane = h * w;
    const int stride = kStrides[s];
    const auto data = r.data();
    obj_target[s].assign(static_cast<std::size_t>(r.numel()), 0.0);
    for (const Assignment& a : targets.scales[s]) {
      if (a.gx < 0 || a.gx >= w || a.gy < 0 || a.gy >= h || a.batch < 0 || a.batch >= batch)
        throw ShapeError("composite_loss: assignment outside the scale-" + std::to_string(s) + " grid");
      const std::int64_t base =
          ((static_cast<std::int64_t>(a.batch) * r.dim(1) + a.anchor * per_anchor) * h + a.gy) * w + a.gx;
      using D = Dual<4>;
      const AnchorWH& an = anchors.wh[s][static_cast<std::size_t>(a.anchor)];
      const BoxT<D> pred = decode_cell(D::variable(data[base], 0), D::variable(data[base + plane], 1),
                                       D::variable(data[base + 2 * plane], 2), D::variable(data[base + 3 * plane], 3),
                                       a.gx, a.gy, stride, an);
      const BoxT<D> gt{D((a.gx + a.ox) * stride), D((a.gy + a.oy) * stride), D(a.gw * stride), D(a.gh * stride)};
      if (probe) {
        const double sx = 0.5 * stride + 2.0 * an.w, sy = 0.5 * stride + 2.0 * an.h;
        const double iw = std::min(pred.x2().v, gt.x2().v) - std::max(pred.x1().v, gt.x1().v);
        const double ih = std::min(pred.y2().v, gt.y2().v) - std::max(pred.y1().v, gt.y1().v);
        report_kink(std::min({std::abs(pred.x1().v - gt.x1().v) / sx, std::abs(pred.x2().v - gt.x2().v) / sx,
                              std::abs(pred.y1().v - gt.y1().v) / sy, std::abs(pred.y2().v - gt.y2().v) / sy,
                              std::abs(iw) / sx, std::abs(ih) / sy}));
      }
      D sim = ciou(pred, gt);
      if (cfg.nwd) {
        const D n = nwd(pred, gt, cfg.nwd_params);
        sim = cfg.nwd_mix == 1.0 ? n : D(1.0 - cfg.nwd_mix) * sim + D(cfg.nwd_mix) * n;
      }
      box_sum += 1.0 - sim.v;
      sims.push_back(sim.v);
      positives.push_back({s, base, sim.d});
      const double target =
          std::clamp(frozen_similarity.empty() ? sim.v : frozen_similarity[sims.size() - 1], 0.0, 1.0);
      double& slot = obj_target[s][static_cast<std::size_t>(base + 4 * plane)];
      slot = std::max(slot, target);
      const std::int64_t cls0 = base + 5 * plane;
      for (int c = 0; c < nc; ++c) cls_sum += bce(data[cls0 + c * plane], c == a.class_id ? 1.0 : 0.0);
      cls_entries.emplace_back(cls0, a.class_id);
    }
  }

  std::array<double, kNumScales> obj_scale{};
  std::array<std::int64_t, kNumScales> obj_count{};
  for (std::size_t s = 0; s < kNumScales; ++s) {
    const auto& r = raw[s];
    const std::int64_t h = r.dim(2), w = r.dim(3), plane = h * w;
    const auto data = r.data();
    double acc = 0.0;
    for (std::int64_t b = 0; b < batch; ++b)
      for (int a = 0; a < kAnchorsPerScale; ++a) {
        const std::int64_t off = (b * r.dim(1) + a * per_anchor + 4) * plane;
        for (std::int64_t p = 0; p < plane; ++p)
          acc += bce(data[off + p], obj_target[s][static_cast<std::size_t>(off + p)]);
      }
    obj_count[s] = batch * kAnchorsPerScale * plane;
    obj_scale[s] = acc / static_cast<double>(obj_count[s]);
  }

  const double n = static_cast<double>(n_assigned);
  const double box = n_assigned ? box_sum / n : 0.0;
  const double cls = n_assigned ? cls_sum / (n * nc) : 0.0;
  double obj = 0.0;
  for (std::size_t s = 0; s < kNumScales; ++s) obj += cfg.balance[s] * obj_scale[s];
  const double total = cfg.box_weight * box + cfg.obj_weight * obj + cfg.cls_weight * cls;

  if (breakdown) {
    breakdown->total = total;
    breakdown->box = box;
    breakdown->obj = obj;
    breakdown->cls = cls;
    breakdown->similarity = sims;
  }

  std::vector<Tensor<T>> inputs(raw.begin(), raw.end());
  auto impls = std::array{raw[0].impl(), raw[1].impl(), raw[2].impl()};
  return detail::make_result<T>(
      Shape{1}, {static_cast<T>(total)}, "composite_loss", inputs,
      [impls, obj_target = std::move(obj_target), positives = std::move(positives),
       cls_entries = std::move(cls_entries), obj_count, cfg, nc, per_anchor, n_assigned](std::span<const T> g) {
        const double go = g[0];
        for (std::size_t s = 0; s < kNumScales; ++s) {
          T* sink = detail::grad_sink(impls[s]);
          if (!sink) continue;
          const auto& shape = impls[s]->shape;
          const std::int64_t plane = shape[2] * shape[3];
          const T* data = impls[s]->data.data();
          const double k = go * cfg.obj_weight * cfg.balance[s] / static_cast<double>(obj_count[s]);
          for (std::int64_t b = 0; b < shape[0]; ++b)
            for (int a = 0; a < kAnchorsPerScale; ++a) {
              const std::int64_t off = (b * shape[1] + a * per_anchor + 4) * plane;
              for (std::int64_t p = 0; p < plane; ++p)
                sink[off + p] += static_cast<T>(k * bce_grad(data[off + p], obj_target[s][static_cast<std::size_t>(off + p)]));
            }
        }
        if (n_assigned == 0) return;
        const double kb = -go * cfg.box_weight / static_cast<double>(n_assigned);
        const double kc = go * cfg.cls_weight / (static_cast<double>(n_assigned) * nc);
        for (std::size_t i = 0; i < positives.size(); ++i) {
          const PositiveGrad& pg = positives[i];
          T* sink = detail::grad_sink(impls[pg.scale]);
          if (!sink) continue;
          const auto& shape = impls[pg.scale]->shape;
          const std::int64_t plane = shape[2] * shape[3];
          const T* data = impls[pg.scale]->data.data();
          for (int j = 0; j < 4; ++j) sink[pg.base + j * plane] += static_cast<T>(kb * pg.dsim[static_cast<std::size_t>(j)]);
          const auto [cls0, cid] = cls_entries[i];
          for (int c = 0; c < nc; ++c)
            sink[cls0 + c * plane] += static_cast<T>(kc * bce_grad(data[cls0 + c * plane], c == cid ? 1.0 : 0.0));
        }
      });
}

template Tensor<float> composite_loss(const std::array<Tensor<float>, kNumScales>&, const AssignedTargets&,
                                      const AnchorSet&, const LossConfig&, LossBreakdown*, std::span<const double>);
template Tensor<double> composite_loss(const std::array<Tensor<double>, kNumScales>&, const AssignedTargets&,
                                       const AnchorSet&, const LossConfig&, LossBreakdown*, std::span<const double>);

}  // namespace microdet
