#include "microdet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "microdet/dataset.hpp"
#include "microdet/rng.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

namespace fs = std::filesystem;

std::string to_string(Difficulty d) { return d == Difficulty::kEasy ? "easy" : "hard"; }

Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::kEasy;
  if (s == "hard") return Difficulty::kHard;
  throw ConfigError("unknown difficulty '" + s + "' (expected easy or hard)");
}

void SceneSpec::validate() const {
  if (img_size < 16 || img_size > 1024) throw ConfigError("img_size must be in [16, 1024], got " + std::to_string(img_size));
  if (n_classes != 1 && n_classes != 2) throw ConfigError("classes must be 1 or 2, got " + std::to_string(n_classes));
  if (min_defects < 0 || max_defects < min_defects)
    throw ConfigError("defect count range [" + std::to_string(min_defects) + ", " + std::to_string(max_defects) +
                      "] is invalid");
  if (!(min_size > 0.0) || !(max_size >= min_size) || max_size > 0.5)
    throw ConfigError("defect size range must satisfy 0 < min <= max <= 0.5");
  if (max_size * img_size < 2.0)
    throw ConfigError("max_size * img_size must be at least 2 pixels");
}

SceneSpec SceneSpec::micro(std::uint64_t seed) {
  SceneSpec s;
  s.img_size = 32;
  s.seed = seed;
  return s;
}

SceneSpec SceneSpec::small(std::uint64_t seed) {
  SceneSpec s;
  s.img_size = 64;
  s.seed = seed;
  return s;
}

namespace {

bool boxes_touch(const BBox& a, const BBox& b, double margin) {
  return a.x1() - margin < b.x2() && b.x1() - margin < a.x2() && a.y1() - margin < b.y2() && b.y1() - margin < a.y2();
}

double segment_dist2(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return qx * qx + qy * qy;
}

bool inside(const Defect& d, double x, double y) {
  if (d.class_id == kScratch) {
    const auto& p = d.poly;
    const double r2 = d.half_width * d.half_width;
    return segment_dist2(x, y, p[0], p[1], p[2], p[3]) <= r2 || segment_dist2(x, y, p[2], p[3], p[4], p[5]) <= r2;
  }
  const double a = d.box.w / 2, b = d.box.h / 2;
  const double u = (x - d.box.cx) / a, v = (y - d.box.cy) / b;
  return u * u + v * v <= 1.0;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace

Scene sample_scene(const SceneSpec& spec, std::uint64_t image_seed) {
  spec.validate();
  Rng rng(image_seed);
  const bool hard = spec.difficulty == Difficulty::kHard;
  const int S = spec.img_size;
  Scene sc;
  sc.size = S;
  const double gray = rng.uniform(0.3, 0.5);
  for (auto& b : sc.base) b = gray + rng.uniform(-0.03, 0.03);
  sc.grad_x = rng.uniform(-0.06, 0.06);
  sc.grad_y = rng.uniform(-0.06, 0.06);
  if (hard) {
    sc.noise_cell = std::max(4, S / 8);
    sc.noise_amp = 0.06;
    const int n = S / sc.noise_cell + 2;
    sc.noise.resize(static_cast<std::size_t>(n * n));
    for (double& v : sc.noise) v = rng.uniform(-1.0, 1.0);
  }

  const double lo = std::max(2.0, spec.min_size * S), hi = std::max(lo, spec.max_size * S);
  const auto n_defects = spec.min_defects + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_defects - spec.min_defects + 1)));
  for (int k = 0; k < n_defects; ++k) {
    Defect d;
    d.class_id = spec.n_classes == 1 ? kScratch : static_cast<int>(rng.below(2));
    const double w = rng.uniform(lo, hi), h = rng.uniform(lo, hi);
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      const double x1 = rng.uniform(0.0, S - w), y1 = rng.uniform(0.0, S - h);
      d.box = BBox::from_corners(x1, y1, x1 + w, y1 + h);
      placed = std::none_of(sc.defects.begin(), sc.defects.end(),
                            [&](const Defect& o) { return boxes_touch(o.box, d.box, 1.0); });
    }
    if (!placed) continue;
    if (d.class_id == kScratch) {
      d.half_width = 0.6;
      const double ix1 = d.box.x1() + d.half_width, ix2 = d.box.x2() - d.half_width;
      const double iy1 = d.box.y1() + d.half_width, iy2 = d.box.y2() - d.half_width;
      // End points on opposite corners of the inset box keep the stroke's
      // bounding box equal to d.box.
      const bool anti = rng.bernoulli(0.5);
      const double ay = anti ? iy2 : iy1, by = anti ? iy1 : iy2;
      const double t = rng.uniform(0.3, 0.7);
      const double mx = std::clamp(ix1 + t * (ix2 - ix1) + rng.uniform(-0.2, 0.2) * (ix2 - ix1), ix1, ix2);
      const double my = std::clamp(ay + t * (by - ay) + rng.uniform(-0.2, 0.2) * (iy2 - iy1), iy1, iy2);
      d.poly = {ix1, ay, mx, my, ix2, by};
      d.delta = hard ? rng.uniform(0.10, 0.18) : rng.uniform(0.30, 0.40);
    } else {
      d.delta = hard ? -rng.uniform(0.08, 0.14) : -rng.uniform(0.18, 0.25);
    }
    sc.defects.push_back(d);
  }

  if (hard) {
    const auto n_specks = 4 + static_cast<int>(rng.below(8));
    for (int k = 0; k < n_specks; ++k) {
      for (int attempt = 0; attempt < 10; ++attempt) {
        const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(S)));
        const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(S)));
        const BBox px = BBox::from_corners(x, y, x + 1, y + 1);
        if (std::any_of(sc.defects.begin(), sc.defects.end(),
                        [&](const Defect& o) { return boxes_touch(o.box, px, 1.0); }))
          continue;
        sc.specks.push_back({x, y, (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.08, 0.16)});
        break;
      }
    }
  }
  return sc;
}

Image render_background(const Scene& sc) {
  const int S = sc.size;
  Image img(S, S);
  const int lattice = sc.noise_cell ? S / sc.noise_cell + 2 : 0;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      double v = sc.grad_x * ((x + 0.5) / S - 0.5) + sc.grad_y * ((y + 0.5) / S - 0.5);
      if (sc.noise_cell) {
        const double fx = (x + 0.5) / sc.noise_cell, fy = (y + 0.5) / sc.noise_cell;
        const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
        const double tx = smooth(fx - ix), ty = smooth(fy - iy);
        auto n = [&](int i, int j) { return sc.noise[static_cast<std::size_t>(j * lattice + i)]; };
        const double top = n(ix, iy) + tx * (n(ix + 1, iy) - n(ix, iy));
        const double bot = n(ix, iy + 1) + tx * (n(ix + 1, iy + 1) - n(ix, iy + 1));
        v += sc.noise_amp * (top + ty * (bot - top));
      }
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(sc.base[static_cast<std::size_t>(c)] + v);
    }
  }
  for (const auto& s : sc.specks)
    for (int c = 0; c < 3; ++c) img.at(c, s.y, s.x) += static_cast<float>(s.delta);
  return img;
}

void draw_defect(Image& img, const Defect& d) {
  const int x0 = std::max(0, static_cast<int>(std::floor(d.box.x1())));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(d.box.x2())));
  const int y0 = std::max(0, static_cast<int>(std::floor(d.box.y1())));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(d.box.y2())));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) hits += inside(d, x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0);
      if (!hits) continue;
      const auto add = static_cast<float>(d.delta * hits / 16.0);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) += add;
    }
  }
}

Image render(const Scene& scene) {
  Image img = render_background(scene);
  for (const auto& d : scene.defects) draw_defect(img, d);
  return img;
}

std::string sample_id(std::uint64_t seed, std::int64_t index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%llu_%06lld", static_cast<unsigned long long>(seed), static_cast<long long>(index));
  return buf;
}

Sample synth_sample(const SceneSpec& spec, std::int64_t index) {
  const Scene sc = sample_scene(spec, Rng::derive(spec.seed, static_cast<std::uint64_t>(index)));
  Sample s;
  s.id = sample_id(spec.seed, index);
  s.image = quantized(render(sc));
  for (const auto& d : sc.defects) s.gts.push_back({d.box, d.class_id});
  // Labels are stored with 6 decimals; keep the in-memory copy identical.
  s.gts = parse_labels(format_labels(s.gts, spec.img_size), spec.img_size, spec.n_classes, s.id);
  return s;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

Split SplitRatios::split_of(std::int64_t index) const {
  const std::int64_t r = index % (train + val + test);
  if (r < train) return Split::kTrain;
  return r < train + val ? Split::kVal : Split::kTest;
}

GenerateReport generate(const SceneSpec& spec, std::int64_t count, const fs::path& root, const SplitRatios& ratios) {
  spec.validate();
  if (count < 10) throw ConfigError("count must be at least 10, got " + std::to_string(count));
  if (ratios.train < 1 || ratios.val < 1 || ratios.test < 1) throw ConfigError("split ratios must be positive");
  GenerateReport rep;
  for (std::int64_t i = 0; i < count; ++i) ++rep.counts[static_cast<std::size_t>(ratios.split_of(i))];
  for (int s = 0; s < 3; ++s)
    if (rep.counts[static_cast<std::size_t>(s)] == 0)
      throw ConfigError("count " + std::to_string(count) + " is too small to populate the " +
                        to_string(static_cast<Split>(s)) + " split");

  std::error_code ec;
  if (fs::exists(root, ec) && !fs::is_empty(root, ec))
    throw ConfigError(root.string() + ": output directory exists and is not empty");
  for (const char* split : {"train", "val", "test"})
    for (const char* sub : {"images", "labels"}) {
      fs::create_directories(root / split / sub, ec);
      if (ec) throw IoError((root / split / sub).string() + ": cannot create directory: " + ec.message());
    }

  for (std::int64_t i = 0; i < count; ++i) {
    const Sample s = synth_sample(spec, i);
    const fs::path dir = root / to_string(ratios.split_of(i));
    write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
    write_file(dir / "labels" / (s.id + ".txt"), format_labels(s.gts, spec.img_size));
  }

  DatasetManifest m;
  m.spec = spec;
  m.count = count;
  m.ratios = ratios;
  m.counts = rep.counts;
  write_file(root / "manifest.txt", m.to_text());
  return rep;
}

}  // namespace microdet
