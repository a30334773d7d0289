#pragma once

// Independent re-implementations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "microdet/metrics.hpp"
#include "microdet/rng.hpp"

namespace microdet::testing {

inline BBox random_box(Rng& rng, double lo = 1.0, double hi = 30.0, double extent = 64.0) {
  const double w = rng.uniform(lo, hi), h = rng.uniform(lo, hi);
  return {rng.uniform(w / 2, extent - w / 2), rng.uniform(h / 2, extent - h / 2), w, h};
}

// Up to 6 ground truths and up to 6 detections, most of them jittered copies
// of ground truths so that matches actually occur.
struct MatchScene {
  std::vector<GroundTruth> gts;
  std::vector<Detection> dets;
};

inline MatchScene random_match_scene(Rng& rng, int n_classes = 2) {
  MatchScene s;
  const auto ng = rng.below(7), nd = rng.below(7);
  const auto nc = static_cast<std::uint64_t>(n_classes);
  for (std::uint64_t i = 0; i < ng; ++i)
    s.gts.push_back({{rng.uniform(5, 59), rng.uniform(5, 59), rng.uniform(3, 12), rng.uniform(3, 12)},
                     static_cast<int>(rng.below(nc))});
  for (std::uint64_t i = 0; i < nd; ++i) {
    Detection d;
    if (!s.gts.empty() && rng.bernoulli(0.7)) {
      const auto& g = s.gts[rng.below(s.gts.size())];
      d.box = {g.box.cx + rng.uniform(-2, 2), g.box.cy + rng.uniform(-2, 2), g.box.w * rng.uniform(0.7, 1.3),
               g.box.h * rng.uniform(0.7, 1.3)};
      d.class_id = rng.bernoulli(0.85) ? g.class_id : static_cast<int>(rng.below(nc));
    } else {
      d.box = {rng.uniform(5, 59), rng.uniform(5, 59), rng.uniform(3, 12), rng.uniform(3, 12)};
      d.class_id = static_cast<int>(rng.below(nc));
    }
    // Coarse confidences so that ties occur.
    d.confidence = static_cast<double>(1 + rng.below(8)) / 8.0;
    s.dets.push_back(d);
  }
  return s;
}

// Full IoU table first, then the matching rule applied literally.
inline MatchResult exhaustive_match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double thr) {
  std::vector<std::vector<double>> table(dets.size(), std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t g = 0; g < gts.size(); ++g) table[i][g] = iou(dets[i].box, gts[g].box);
  MatchResult r{std::vector<bool>(dets.size(), false), std::vector<bool>(gts.size(), false)};
  std::vector<bool> done(dets.size(), false);
  for (std::size_t step = 0; step < dets.size(); ++step) {
    // Highest confidence not yet visited, lowest index on ties.
    std::size_t pick = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (!done[i] && (pick == dets.size() || dets[i].confidence > dets[pick].confidence)) pick = i;
    done[pick] = true;
    std::vector<std::size_t> cands;
    for (std::size_t g = 0; g < gts.size(); ++g)
      if (!r.gt_matched[g] && gts[g].class_id == dets[pick].class_id && table[pick][g] >= thr) cands.push_back(g);
    if (cands.empty()) continue;
    std::size_t best = cands[0];
    for (std::size_t g : cands)
      if (table[pick][g] > table[pick][best]) best = g;
    r.tp[pick] = true;
    r.gt_matched[best] = true;
  }
  return r;
}

// Dense-grid integral of the interpolated precision max{P_j : R_j >= r}. The
// grid is the first multiple of n_gt at or above 1e4 points, so its cells
// never straddle a recall step.
inline double dense_grid_ap(const PrCurve& c) {
  const std::int64_t n = ((10000 + c.n_gt - 1) / c.n_gt) * c.n_gt;
  double acc = 0;
  for (std::int64_t k = 0; k < n; ++k) {
    const double r = (static_cast<double>(k) + 0.5) / static_cast<double>(n);
    double best = 0;
    for (const auto& p : c.points)
      if (p.recall >= r) best = std::max(best, p.precision);
    acc += best;
  }
  return acc / static_cast<double>(n);
}

}  // namespace microdet::testing
