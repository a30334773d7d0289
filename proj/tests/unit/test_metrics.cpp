#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "microdet/metrics.hpp"
#include "microdet/rng.hpp"
#include "oracles.hpp"

using namespace microdet;

using namespace microdet::testing;

TEST_CASE("match examples") {
  const GroundTruth g{{20, 20, 10, 10}, 0};
  const BBox near{20.3, 20, 10, 10};
  CHECK(iou(near, g.box) > 0.9);
  auto one = match({{near, 0, 0.9}}, {g});
  CHECK(one.tp[0]);
  CHECK(one.gt_matched[0]);
  auto two = match({{near, 0, 0.7}, {near, 0, 0.8}}, {g});
  CHECK_FALSE(two.tp[0]);
  CHECK(two.tp[1]);
  auto wrong_class = match({{near, 1, 0.9}}, {g});
  CHECK_FALSE(wrong_class.tp[0]);
  // Exactly at the threshold counts.
  const BBox half{20, 20, 20, 5};  // inter 50, union 100+100-50 -> 1/3
  CHECK_FALSE(match({{half, 0, 1}}, {g}).tp[0]);
  CHECK(match({{half, 0, 1}}, {g}, 1.0 / 3.0).tp[0]);
}

TEST_CASE("greedy matching equals the exhaustive matcher") {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const MatchScene s = random_match_scene(rng);
    const auto a = match(s.dets, s.gts), b = exhaustive_match(s.dets, s.gts, 0.5);
    CHECK(a.tp == b.tp);
    CHECK(a.gt_matched == b.gt_matched);
  }
}

TEST_CASE("precision and recall") {
  auto pr = precision_recall(3, 1, 2);
  CHECK(pr.precision == 0.75);
  CHECK(pr.recall == 0.6);
  pr = precision_recall(0, 0, 5);
  CHECK(pr.precision == 0.0);
  CHECK(pr.recall == 0.0);
  pr = precision_recall(5, 0, 0);
  CHECK(pr.precision == 1.0);
  CHECK(pr.recall == 1.0);
  CHECK_THROWS_AS(precision_recall(-1, 0, 0), ConfigError);
}

TEST_CASE("average precision examples") {
  CHECK(average_precision(build_curve({{0.9, true}, {0.8, true}}, 2)).value() == 1.0);
  CHECK(average_precision(build_curve({{0.9, false}, {0.8, true}}, 1)).value() == 0.5);
  CHECK_FALSE(average_precision(build_curve({{0.9, false}}, 0)).has_value());
  CHECK(average_precision(build_curve({}, 3)).value() == 0.0);
  // Envelope: a later, higher precision lifts earlier recall levels.
  const auto c = build_curve({{0.9, true}, {0.8, false}, {0.7, true}, {0.6, true}}, 4);
  CHECK(average_precision(c).value() == doctest::Approx(0.25 * 1.0 + 0.5 * 0.75));
}

TEST_CASE("average precision equals the dense-grid integral") {
  Rng rng(2);
  int compared = 0;
  for (int i = 0; i < 500; ++i) {
    const MatchScene s = random_match_scene(rng, 1);
    if (s.gts.empty()) continue;
    const auto m = match(s.dets, s.gts);
    std::vector<ScoredMatch> sc;
    for (std::size_t k = 0; k < s.dets.size(); ++k) sc.push_back({s.dets[k].confidence, m.tp[k]});
    const auto curve = build_curve(sc, static_cast<std::int64_t>(s.gts.size()));
    CHECK(std::abs(average_precision(curve).value() - dense_grid_ap(curve)) < 1e-6);
    ++compared;
  }
  CHECK(compared > 400);
}

TEST_CASE("average precision properties") {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    std::vector<ScoredMatch> sc;
    const auto n = 1 + rng.below(10);
    std::int64_t tps = 0;
    for (std::uint64_t k = 0; k < n; ++k) {
      sc.push_back({rng.uniform(0.01, 0.99), rng.bernoulli(0.5)});
      tps += sc.back().tp;
    }
    const std::int64_t n_gt = tps + static_cast<std::int64_t>(rng.below(3)) + 1;
    const double ap = average_precision(build_curve(sc, n_gt)).value();
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
    // Rank-only dependence.
    auto warped = sc;
    for (auto& x : warped) x.confidence = std::pow(x.confidence, 3.0) * 0.5;
    CHECK(average_precision(build_curve(warped, n_gt)).value() == ap);
    // A false positive below everything never helps.
    auto extra_fp = sc;
    extra_fp.push_back({0.001, false});
    CHECK(average_precision(build_curve(extra_fp, n_gt)).value() <= ap);
    // An extra true positive (for an unmatched gt) never hurts.
    if (tps < n_gt) {
      auto extra_tp = sc;
      extra_tp.push_back({rng.uniform(0.0, 1.0), true});
      CHECK(average_precision(build_curve(extra_tp, n_gt)).value() >= ap - 1e-15);
    }
  }
}

TEST_CASE("evaluate examples") {
  std::vector<std::vector<GroundTruth>> gts{{{{20, 20, 8, 8}, 0}, {{40, 40, 6, 6}, 1}}, {{{10, 50, 5, 9}, 0}}};
  std::vector<std::vector<Detection>> exact(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (const auto& g : gts[i]) exact[i].push_back({g.box, g.class_id, 1.0});
  auto r = evaluate(exact, gts, 2);
  CHECK(r.map50 == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.csv_row() == "1.000000,1.000000,1.000000,3,0,0");
  CHECK(EvalReport::csv_header() == "map50,precision,recall,tp,fp,fn");

  auto none = evaluate({{}, {}}, gts, 2);
  CHECK(none.map50 == 0.0);
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.fn == 3);

  // Class 0 perfect, class 1 never predicted.
  std::vector<std::vector<Detection>> half(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (const auto& g : gts[i])
      if (g.class_id == 0) half[i].push_back({g.box, 0, 0.9});
  auto h = evaluate(half, gts, 2);
  CHECK(h.ap[0].value() == 1.0);
  CHECK(h.ap[1].value() == 0.0);
  CHECK(h.map50 == 0.5);

  // A class without ground truth is excluded from the mean.
  auto three = evaluate(exact, gts, 3);
  CHECK_FALSE(three.ap[2].has_value());
  CHECK(three.map50 == 1.0);

  // Thresholding affects counts, not AP.
  auto strict = evaluate(exact, gts, 2, 1.0);
  CHECK(strict.tp == 0);
  CHECK(strict.precision == 0.0);
  CHECK(strict.map50 == 1.0);

  CHECK_THROWS_AS(evaluate({}, {}, 2), ConfigError);
}

TEST_CASE("counts law") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::vector<GroundTruth>> gts;
    std::vector<std::vector<Detection>> dets;
    std::int64_t total = 0;
    for (int k = 0; k < 3; ++k) {
      auto s = random_match_scene(rng);
      total += static_cast<std::int64_t>(s.gts.size());
      gts.push_back(s.gts);
      dets.push_back(s.dets);
    }
    const auto r = evaluate(dets, gts, 2, rng.uniform(0, 1));
    CHECK(r.tp + r.fn == total);
    const auto pr = precision_recall(r.tp, r.fp, r.fn);
    CHECK(pr.precision == r.precision);
    CHECK(pr.recall == r.recall);
  }
}
