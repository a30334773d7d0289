#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "microdet/box.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

struct MatchResult {
  std::vector<bool> tp;          // per detection, in input order
  std::vector<bool> gt_matched;  // per ground truth
};

// Greedy matching for one image. Detections are visited by descending
// confidence (ties keep input order); each takes the unmatched same-class
// ground truth with the highest IoU >= iou_threshold, lowest index on ties.
MatchResult match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                  double iou_threshold = 0.5);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

// P = TP / (TP + FP), R = TP / (TP + FN); 0/0 is reported as 0.
PrecisionRecall precision_recall(std::int64_t tp, std::int64_t fp, std::int64_t fn);

struct PrPoint {
  double precision = 0.0;
  double recall = 0.0;
  double confidence = 0.0;
};

// One class's confidence sweep.
struct PrCurve {
  std::vector<PrPoint> points;  // by descending confidence
  std::int64_t n_gt = 0;
};

struct ScoredMatch {
  double confidence = 0.0;
  bool tp = false;
};

PrCurve build_curve(std::vector<ScoredMatch> scored, std::int64_t n_gt);

// Exact area under the monotone precision envelope. Undefined (nullopt) for a
// class without ground truth.
std::optional<double> average_precision(const PrCurve& curve);

struct EvalReport {
  std::vector<std::optional<double>> ap;  // per class
  double map50 = 0.0;                     // mean over classes with ground truth
  double precision = 0.0, recall = 0.0;   // at conf_thresh
  std::int64_t tp = 0, fp = 0, fn = 0;    // at conf_thresh
  int n_classes = 0;
  double conf_thresh = 0.25;

  static std::string csv_header() { return "map50,precision,recall,tp,fp,fn"; }
  std::string csv_row() const;
};

// Detections must come from a full sweep (low threshold): AP uses all of
// them, counts and P/R only those with confidence > conf_thresh.
EvalReport evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                    int n_classes, double conf_thresh = 0.25, double iou_threshold = 0.5);

}  // namespace microdet
