#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "microdet/augment.hpp"
#include "microdet/dataset.hpp"
#include "microdet/tensor.hpp"
#include "test_util.hpp"

using namespace microdet;
using microdet::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Extent {
  double x1, y1, x2, y2;
  bool empty = false;
};

// Tight pixel bounding box of the pixels where a and b differ.
Extent changed_pixels(const Image& a, const Image& b) {
  int x1 = a.width, y1 = a.height, x2 = -1, y2 = -1;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x)
        if (a.at(c, y, x) != b.at(c, y, x)) {
          x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x), y2 = std::max(y2, y);
        }
  if (x2 < 0) return {0, 0, 0, 0, true};
  return {double(x1), double(y1), double(x2 + 1), double(y2 + 1)};
}

// Sub-pixel extent of a coverage mask: the outermost non-empty row/column
// contributes the fraction given by its peak coverage.
Extent coverage_extent(const Image& m) {
  std::vector<double> col(static_cast<std::size_t>(m.width), 0.0), row(static_cast<std::size_t>(m.height), 0.0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      col[static_cast<std::size_t>(x)] = std::max<double>(col[static_cast<std::size_t>(x)], m.at(0, y, x));
      row[static_cast<std::size_t>(y)] = std::max<double>(row[static_cast<std::size_t>(y)], m.at(0, y, x));
    }
  auto ends = [](const std::vector<double>& p, double& lo, double& hi) {
    std::size_t a = 0, b = p.size();
    while (a < p.size() && p[a] <= 1e-6) ++a;
    while (b > a && p[b - 1] <= 1e-6) --b;
    if (a == b) return false;
    lo = static_cast<double>(a) + 1.0 - std::min(1.0, p[a]);
    hi = static_cast<double>(b - 1) + std::min(1.0, p[b - 1]);
    return true;
  };
  Extent e{};
  e.empty = !ends(col, e.x1, e.x2) || !ends(row, e.y1, e.y2);
  return e;
}

double edge_error(const Extent& e, const BBox& b) {
  return std::max({std::abs(e.x1 - b.x1()), std::abs(e.y1 - b.y1()), std::abs(e.x2 - b.x2()), std::abs(e.y2 - b.y2())});
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

}  // namespace

TEST_CASE("ppm round trip and errors") {
  Image img(5, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i % 256) / 255.0f;
  const std::string bytes = encode_ppm(img);
  CHECK(bytes.rfind("P6\n5 3\n255\n", 0) == 0);
  CHECK(bytes.size() == 11 + 45);
  CHECK(decode_ppm(bytes) == img);
  CHECK(to_byte(-0.5f) == 0);
  CHECK(to_byte(2.0f) == 255);
  CHECK(to_byte(0.5f) == 128);

  const std::string body = bytes.substr(11);
  CHECK(decode_ppm("P6 # comment\n5 3\n# another\n255\n" + body) == img);
  CHECK_THROWS_WITH_AS(decode_ppm("P3\n5 3\n255\n" + body, "x.ppm"), doctest::Contains("x.ppm: byte 0: bad magic"),
                       FormatError);
  CHECK_THROWS_WITH_AS(decode_ppm("P6\n5 3\n65535\n" + body), doctest::Contains("maxval"), FormatError);
  CHECK_THROWS_WITH_AS(decode_ppm("P6\n5 3\n255\n" + body.substr(1)), doctest::Contains("truncated pixel data"),
                       FormatError);
  CHECK_THROWS_WITH_AS(decode_ppm("P6\n5 3\n255\n" + body + "x"), doctest::Contains("1 trailing bytes"), FormatError);
  CHECK_THROWS_WITH_AS(decode_ppm("P6\n5"), doctest::Contains("missing height"), FormatError);
  CHECK_THROWS_WITH_AS(decode_ppm("P6\n0 3\n255\n"), doctest::Contains("positive"), FormatError);
  CHECK_THROWS_AS(read_ppm("/nonexistent/dir/x.ppm"), IoError);
}

TEST_CASE("labels format and parse") {
  const std::vector<GroundTruth> gts{{{32, 16, 8, 4}, 0}, {{10.5, 20.25, 3, 2.5}, 1}};
  const std::string text = format_labels(gts, 64);
  CHECK(text == "0 0.500000 0.250000 0.125000 0.062500\n1 0.164062 0.316406 0.046875 0.039062\n");
  const auto back = parse_labels(text, 64, 2, "l.txt");
  REQUIRE(back.size() == 2);
  CHECK(back[0].box.cx == 32.0);
  CHECK(std::abs(back[1].box.cx / 64 - gts[1].box.cx / 64) <= 5e-7);
  CHECK(parse_labels("", 64, 2, "l.txt").empty());

  auto err = [](const std::string& t) { return parse_labels(t, 64, 2, "l.txt"); };
  CHECK_THROWS_WITH_AS(err("0 0.5 0.5 0.1 0.1\n0 1.5 0.5 0.1 0.1\n"), doctest::Contains("l.txt:2: cx 1.5 out of range"),
                       FormatError);
  CHECK_THROWS_WITH_AS(err("2 0.5 0.5 0.1 0.1\n"), doctest::Contains("l.txt:1: unknown class id 2"), FormatError);
  CHECK_THROWS_WITH_AS(err("0 0.5 0.5 0.1\n"), doctest::Contains("expected 5 fields, got 4"), FormatError);
  CHECK_THROWS_WITH_AS(err("x 0.5 0.5 0.1 0.1\n"), doctest::Contains("not an integer"), FormatError);
  CHECK_THROWS_WITH_AS(err("0 0.5 abc 0.1 0.1\n"), doctest::Contains("cy 'abc' is not a number"), FormatError);
  CHECK_THROWS_WITH_AS(err("0 0.5 0.5 0 0.1\n"), doctest::Contains("positive"), FormatError);
  CHECK_THROWS_WITH_AS(err("0 0.02 0.5 0.1 0.1\n"), doctest::Contains("outside the image"), FormatError);
  CHECK_THROWS_WITH_AS(err("0 0.5 0.5 0.1 0.1\r\n"), doctest::Contains("CR"), FormatError);
  CHECK_THROWS_WITH_AS(err("0 0.5 0.5 0.1 0.1\n\n"), doctest::Contains("l.txt:2: expected 5 fields"), FormatError);
}

TEST_CASE("scene invariants over 1000 samples") {
  for (Difficulty diff : {Difficulty::kEasy, Difficulty::kHard}) {
    SceneSpec spec = SceneSpec::small(3);
    spec.difficulty = diff;
    std::array<int, 2> per_class{};
    int total = 0, max_count = 0;
    for (int i = 0; i < 1000; ++i) {
      const Sample s = synth_sample(spec, i);
      CHECK(s.image.width == 64);
      CHECK(static_cast<int>(s.gts.size()) <= spec.max_defects);
      max_count = std::max(max_count, static_cast<int>(s.gts.size()));
      for (const auto& g : s.gts) {
        const double eps = 1e-6 * 64;
        CHECK(g.box.x1() >= -eps);
        CHECK(g.box.y1() >= -eps);
        CHECK(g.box.x2() <= 64 + eps);
        CHECK(g.box.y2() <= 64 + eps);
        CHECK(g.box.w >= 2.0 - eps);
        CHECK(g.box.h >= 2.0 - eps);
        CHECK(g.box.w <= spec.max_size * 64 + eps);
        CHECK(g.box.h <= spec.max_size * 64 + eps);
        CHECK(std::max(g.box.w, g.box.h) >= spec.min_size * 64 - eps);
        ++per_class[static_cast<std::size_t>(g.class_id)];
        ++total;
      }
      const auto [lo, hi] = std::minmax_element(s.image.data.begin(), s.image.data.end());
      CHECK(*lo >= 0.0f);
      CHECK(*hi <= 1.0f);
    }
    CHECK(max_count == spec.max_defects);
    CHECK(per_class[0] > total / 3);
    CHECK(per_class[1] > total / 3);
  }
  SceneSpec one = SceneSpec::micro();
  one.n_classes = 1;
  for (int i = 0; i < 50; ++i)
    for (const auto& g : synth_sample(one, i).gts) CHECK(g.class_id == 0);
}

TEST_CASE("labels agree with the rendered raster") {
  int measured = 0;
  for (Difficulty diff : {Difficulty::kEasy, Difficulty::kHard}) {
    for (int size : {32, 64}) {
      SceneSpec spec = size == 32 ? SceneSpec::micro(11) : SceneSpec::small(11);
      spec.difficulty = diff;
      for (int i = 0; i < 150; ++i) {
        const Scene sc = sample_scene(spec, Rng::derive(spec.seed, static_cast<std::uint64_t>(i)));
        const Image bg = quantized(render_background(sc));
        const Sample s = synth_sample(spec, i);
        REQUIRE(s.gts.size() == sc.defects.size());
        for (std::size_t k = 0; k < sc.defects.size(); ++k) {
          Image one = render_background(sc);
          draw_defect(one, sc.defects[k]);
          const Extent e = changed_pixels(quantized(one), bg);
          REQUIRE_FALSE(e.empty);
          // Written label, re-read from its 6-decimal text.
          CHECK(edge_error(e, s.gts[k].box) <= 1.0);
          ++measured;
        }
        CHECK(s.image == quantized(render(sc)));
      }
    }
  }
  CHECK(measured > 1000);
}

TEST_CASE("generate layout, manifest and determinism") {
  TempDir tmp;
  SceneSpec spec = SceneSpec::micro(7);
  const auto rep = generate(spec, 100, tmp.path / "a");
  CHECK(rep.counts == std::array<std::int64_t, 3>{80, 10, 10});
  for (const char* split : {"train", "val", "test"}) {
    std::size_t n = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp.path / "a" / split / "images")) ++n;
    CHECK(n == (std::string(split) == "train" ? 80u : 10u));
  }
  CHECK(fs::exists(tmp.path / "a" / "train" / "labels" / "7_000000.txt"));
  CHECK(fs::exists(tmp.path / "a" / "val" / "images" / "7_000008.ppm"));
  CHECK(fs::exists(tmp.path / "a" / "test" / "images" / "7_000009.ppm"));

  const auto m = DatasetManifest::parse(read_file(tmp.path / "a" / "manifest.txt"), "manifest.txt");
  CHECK(m.spec.seed == 7);
  CHECK(m.spec.img_size == 32);
  CHECK(m.count == 100);
  CHECK(m.counts[1] == 10);
  CHECK(m.spec.min_size == 0.02);

  generate(spec, 100, tmp.path / "b");
  CHECK(read_tree(tmp.path / "a") == read_tree(tmp.path / "b"));
  spec.seed = 8;
  generate(spec, 100, tmp.path / "c");
  CHECK(read_tree(tmp.path / "a") != read_tree(tmp.path / "c"));

  CHECK_THROWS_WITH_AS(generate(spec, 5, tmp.path / "d"), doctest::Contains("at least 10"), ConfigError);
  CHECK_THROWS_WITH_AS(generate(spec, 10, tmp.path / "d", {8, 2, 1}), doctest::Contains("too small"), ConfigError);
  CHECK_THROWS_WITH_AS(generate(spec, 100, tmp.path / "a"), doctest::Contains("not empty"), ConfigError);
  write_file(tmp.path / "plain", "x");
  CHECK_THROWS_AS(generate(spec, 100, tmp.path / "plain" / "sub"), IoError);
  CHECK(SplitRatios{}.split_of(18) == Split::kVal);
  CHECK(SplitRatios{}.split_of(19) == Split::kTest);
  CHECK(SplitRatios{}.split_of(20) == Split::kTrain);
}

TEST_CASE("load round trip and errors") {
  TempDir tmp;
  const SceneSpec spec = SceneSpec::micro(3);
  generate(spec, 20, tmp.path / "d");
  const Dataset val = Dataset::open(tmp.path / "d", Split::kVal);
  REQUIRE(val.size() == 2);
  CHECK(val.id(0) == "3_000008");
  CHECK(val.id(1) == "3_000018");
  for (std::size_t i = 0; i < val.size(); ++i) {
    const Sample got = val.get(i);
    const Sample want = synth_sample(spec, i == 0 ? 8 : 18);
    CHECK(got.image == want.image);
    REQUIRE(got.gts.size() == want.gts.size());
    for (std::size_t k = 0; k < got.gts.size(); ++k) {
      CHECK(std::abs(got.gts[k].box.cx - want.gts[k].box.cx) / 32 <= 1e-6);
      CHECK(std::abs(got.gts[k].box.w - want.gts[k].box.w) / 32 <= 1e-6);
      CHECK(got.gts[k].class_id == want.gts[k].class_id);
    }
  }
  CHECK(Dataset::open(tmp.path / "d", Split::kTrain).load_all().size() == 16);

  const fs::path labels = tmp.path / "d" / "val" / "labels";
  write_file(labels / "3_000008.txt", "");
  CHECK(Dataset::open(tmp.path / "d", Split::kVal).gts(0).empty());
  write_file(labels / "3_000008.txt", "0 0.5 0.5 0.1 0.1\n1 0.5 1.5 0.1 0.1\n");
  CHECK_THROWS_WITH_AS(Dataset::open(tmp.path / "d", Split::kVal), doctest::Contains("3_000008.txt:2:"), FormatError);
  fs::remove(labels / "3_000008.txt");
  CHECK_THROWS_WITH_AS(Dataset::open(tmp.path / "d", Split::kVal), doctest::Contains("missing label file"), FormatError);
  write_file(labels / "3_000008.txt", "");
  write_file(labels / "orphan.txt", "");
  CHECK_THROWS_WITH_AS(Dataset::open(tmp.path / "d", Split::kVal), doctest::Contains("without a matching image"),
                       FormatError);
  fs::remove(labels / "orphan.txt");
  write_file(tmp.path / "d" / "val" / "images" / "3_000018.ppm", "P6\n4 4\n255\n");
  CHECK_THROWS_WITH_AS(Dataset::open(tmp.path / "d", Split::kVal).get(1), doctest::Contains("3_000018.ppm: byte"),
                       FormatError);
  Image wrong(16, 16);
  write_ppm(tmp.path / "d" / "val" / "images" / "3_000018.ppm", wrong);
  CHECK_THROWS_WITH_AS(Dataset::open(tmp.path / "d", Split::kVal).get(1), doctest::Contains("img_size is 32"),
                       FormatError);

  CHECK_THROWS_AS(Dataset::open(tmp.path / "missing", Split::kVal), IoError);
  write_file(tmp.path / "d" / "manifest.txt", "seed = 1\nbogus = 2\n");
  CHECK_THROWS_WITH_AS(Dataset::open(tmp.path / "d", Split::kVal), doctest::Contains("manifest.txt:2: unknown manifest key"),
                       FormatError);
}

TEST_CASE("augment identities") {
  const Sample s = synth_sample(SceneSpec::small(5), 3);
  REQUIRE_FALSE(s.gts.empty());
  const Sample twice = hflip(hflip(s));
  CHECK(twice.image == s.image);
  for (std::size_t k = 0; k < s.gts.size(); ++k) CHECK(twice.gts[k].box.cx == s.gts[k].box.cx);
  AugmentPolicy forced = AugmentPolicy::none();
  forced.hflip_p = 1.0;
  Rng rng(1);
  CHECK(augment(augment(s, forced, rng), forced, rng).image == s.image);

  const Sample full = crop_resize(s, 0, 0, 64);
  CHECK(full.image == s.image);
  REQUIRE(full.gts.size() == s.gts.size());
  for (std::size_t k = 0; k < s.gts.size(); ++k) {
    CHECK(full.gts[k].box.cx == doctest::Approx(s.gts[k].box.cx).epsilon(1e-12));
    CHECK(full.gts[k].box.w == doctest::Approx(s.gts[k].box.w).epsilon(1e-12));
  }
  CHECK(augment(s, AugmentPolicy::none(), rng).image == s.image);
  CHECK_THROWS_AS(crop_resize(s, 10, 0, 60), ConfigError);
}

TEST_CASE("augment crop keeps, clips and drops boxes") {
  Sample s{"x", Image(64, 64, 0.5f), {{{10, 10, 8, 8}, 0}, {{49.6, 32, 8, 8}, 1}, {{60, 60, 6, 6}, 1}}};
  // Crop [0, 48) scaled by 4/3: box 0 stays whole, box 1 keeps 30% of its
  // area (x in [45.6, 48)), box 2 leaves the window.
  const Sample c = crop_resize(s, 0, 0, 48);
  REQUIRE(c.gts.size() == 2);
  CHECK(c.gts[0].box.x1() == doctest::Approx(6 * 4.0 / 3));
  CHECK(c.gts[1].box.x2() == doctest::Approx(64));
  CHECK(c.gts[1].box.w == doctest::Approx(2.4 * 4.0 / 3));
  // At 47 only 17.5% would remain.
  const Sample d = crop_resize(s, 0, 0, 47);
  CHECK(d.gts.size() == 1);
}

TEST_CASE("augment random policies") {
  const AugmentPolicy policy;
  double worst = 0.0;
  int measured = 0;
  for (int i = 0; i < 300; ++i) {
    const Sample s = synth_sample(SceneSpec::small(9), i);
    Rng a(static_cast<std::uint64_t>(i)), b(static_cast<std::uint64_t>(i));
    const Sample out = augment(s, policy, a);
    CHECK(augment(s, policy, b).image == out.image);
    const auto [lo, hi] = std::minmax_element(out.image.data.begin(), out.image.data.end());
    CHECK(*lo >= 0.0f);
    CHECK(*hi <= 1.0f);
    for (const auto& g : out.gts) {
      CHECK(g.box.w > 0);
      CHECK(g.box.h > 0);
      CHECK(g.box.x1() >= -1e-9);
      CHECK(g.box.y1() >= -1e-9);
      CHECK(g.box.x2() <= 64 + 1e-9);
      CHECK(g.box.y2() <= 64 + 1e-9);
    }

    // Re-measure each defect through the geometric part of the same draw:
    // its coverage mask alone, flipped and cropped like the image.
    const Scene sc = sample_scene(SceneSpec::small(9), Rng::derive(9, static_cast<std::uint64_t>(i)));
    Rng g(static_cast<std::uint64_t>(i));
    const bool flip = g.bernoulli(policy.hflip_p);
    const double side = g.uniform(policy.crop_min, policy.crop_max) * 64;
    const double x0 = g.uniform(0.0, 64 - side), y0 = g.uniform(0.0, 64 - side);
    const double r = side / 64;
    for (std::size_t k = 0; k < sc.defects.size(); ++k) {
      Defect unit = sc.defects[k];
      unit.delta = 1.0;
      Sample m{"m", Image(64, 64), {{unit.box, unit.class_id}}};
      draw_defect(m.image, unit);
      if (flip) m = hflip(m);
      const BBox before = m.gts[0].box;
      m = crop_resize(m, x0, y0, side);
      if (m.gts.empty()) continue;
      const BBox& after = m.gts[0].box;
      // Only boxes the crop did not clip: a clipped box bounds the kept
      // region, not the defect pixels inside it.
      if (std::abs(after.w - before.w / r) > 1e-9 || std::abs(after.h - before.h / r) > 1e-9) continue;
      const Extent e = coverage_extent(m.image);
      REQUIRE_FALSE(e.empty);
      // Crop-resize magnifies by 1 / r, so the raster's one-pixel resolution
      // is 1 / r output pixels.
      const double err = edge_error(e, after) * r;
      worst = std::max(worst, err);
      CHECK(err <= 1.0);
      ++measured;
    }
  }
  CHECK(measured > 300);
  MESSAGE("worst re-measured edge error (source pixels): " << worst);
}
