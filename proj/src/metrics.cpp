#include "microdet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>


namespace microdet {

MatchResult match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double iou_threshold) {
  MatchResult r;
  r.tp.assign(dets.size(), false);
  r.gt_matched.assign(gts.size(), false);
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  for (std::size_t i : order) {
    const Detection& d = dets[i];
    double best_iou = -1.0;
    std::size_t best = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (r.gt_matched[g] || gts[g].class_id != d.class_id) continue;
      const double v = iou(d.box, gts[g].box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best < gts.size()) {
      r.gt_matched[best] = true;
      r.tp[i] = true;
    }
  }
  return r;
}

PrecisionRecall precision_recall(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw ConfigError("precision_recall: counts must be non-negative");
  PrecisionRecall pr;
  if (tp + fp > 0) pr.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) pr.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return pr;
}

PrCurve build_curve(std::vector<ScoredMatch> scored, std::int64_t n_gt) {
  std::stable_sort(scored.begin(), scored.end(),
                   [](const ScoredMatch& a, const ScoredMatch& b) { return a.confidence > b.confidence; });
  PrCurve c;
  c.n_gt = n_gt;
  std::int64_t tp = 0, fp = 0;
  for (const auto& s : scored) {
    (s.tp ? tp : fp) += 1;
    const auto pr = precision_recall(tp, fp, std::max<std::int64_t>(n_gt - tp, 0));
    c.points.push_back({pr.precision, pr.recall, s.confidence});
  }
  return c;
}

std::optional<double> average_precision(const PrCurve& curve) {
  if (curve.n_gt <= 0) return std::nullopt;
  const auto& p = curve.points;
  std::vector<double> env(p.size());
  double run = 0.0;
  for (std::size_t i = p.size(); i-- > 0;) {
    run = std::max(run, p[i].precision);
    env[i] = run;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].recall > prev_recall) {
      ap += (p[i].recall - prev_recall) * env[i];
      prev_recall = p[i].recall;
    }
  }
  return ap;
}

std::string EvalReport::csv_row() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%lld,%lld,%lld", map50, precision, recall,
                static_cast<long long>(tp), static_cast<long long>(fp), static_cast<long long>(fn));
  return buf;
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                    int n_classes, double conf_thresh, double iou_threshold) {
  if (gts.empty()) throw ConfigError("evaluate: empty split (no images)");
  if (dets.size() != gts.size())
    throw ConfigError("evaluate: " + std::to_string(dets.size()) + " detection lists for " +
                      std::to_string(gts.size()) + " images");
  if (n_classes < 1) throw ConfigError("evaluate: n_classes must be >= 1");
  EvalReport rep;
  rep.n_classes = n_classes;
  rep.conf_thresh = conf_thresh;
  std::vector<std::vector<ScoredMatch>> scored(static_cast<std::size_t>(n_classes));
  std::vector<std::int64_t> n_gt(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t img = 0; img < gts.size(); ++img) {
    for (const auto& g : gts[img]) {
      if (g.class_id < 0 || g.class_id >= n_classes)
        throw ConfigError("evaluate: ground-truth class " + std::to_string(g.class_id) + " out of range");
      ++n_gt[static_cast<std::size_t>(g.class_id)];
    }
    // Greedy matching visits detections by confidence, so the matches of the
    // detections above conf_thresh are the same as matching that subset alone.
    const MatchResult m = match(dets[img], gts[img], iou_threshold);
    for (std::size_t i = 0; i < dets[img].size(); ++i) {
      const Detection& d = dets[img][i];
      if (d.class_id < 0 || d.class_id >= n_classes)
        throw ConfigError("evaluate: detection class " + std::to_string(d.class_id) + " out of range");
      scored[static_cast<std::size_t>(d.class_id)].push_back({d.confidence, m.tp[i]});
      if (d.confidence > conf_thresh) (m.tp[i] ? rep.tp : rep.fp) += 1;
    }
  }
  std::int64_t total_gt = 0;
  double sum_ap = 0.0;
  int defined = 0;
  for (int c = 0; c < n_classes; ++c) {
    const auto ap = average_precision(build_curve(scored[static_cast<std::size_t>(c)], n_gt[static_cast<std::size_t>(c)]));
    rep.ap.push_back(ap);
    total_gt += n_gt[static_cast<std::size_t>(c)];
    if (ap) {
      sum_ap += *ap;
      ++defined;
    }
  }
  rep.map50 = defined ? sum_ap / defined : 0.0;
  rep.fn = total_gt - rep.tp;
  const auto pr = precision_recall(rep.tp, rep.fp, rep.fn);
  rep.precision = pr.precision;
  rep.recall = pr.recall;
  return rep;
}

}  // namespace microdet
