#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "microdet/box.hpp"
#include "microdet/image.hpp"

namespace microdet {

enum class Difficulty { kEasy, kHard };
std::string to_string(Difficulty d);
Difficulty parse_difficulty(const std::string& s);

inline constexpr int kScratch = 0;  // thin anti-aliased polyline
inline constexpr int kBlemish = 1;  // filled ellipse

struct SceneSpec {
  int img_size = 64;
  int n_classes = 2;  // 1: scratches only
  int min_defects = 0, max_defects = 6;
  double min_size = 0.02, max_size = 0.12;  // box side as a fraction of img_size
  Difficulty difficulty = Difficulty::kEasy;
  std::uint64_t seed = 0;

  void validate() const;
  // Desk-scale presets: micro 32 px / 100 train images, small 64 px / 800.
  static SceneSpec micro(std::uint64_t seed = 0);
  static SceneSpec small(std::uint64_t seed = 0);
};

// Image count whose 8:1:1 split yields the preset's training size.
inline constexpr int kMicroCount = 124;
inline constexpr int kSmallCount = 1000;

struct Defect {
  int class_id = kScratch;
  BBox box;                          // pixels; tight around the shape
  std::array<double, 6> poly{};      // scratch: three vertices (x, y)
  double half_width = 0.0;           // scratch stroke half-width
  double delta = 0.0;                // additive intensity change
};

struct Speck {
  int x = 0, y = 0;
  double delta = 0.0;
};

// Every random choice of one image, so rendering is a pure function.
struct Scene {
  int size = 0;
  std::array<double, 3> base{};
  double grad_x = 0.0, grad_y = 0.0;
  int noise_cell = 0;                // 0 = no value noise
  double noise_amp = 0.0;
  std::vector<double> noise;         // (cells + 1)^2 lattice values in [-1, 1]
  std::vector<Speck> specks;
  std::vector<Defect> defects;
};

Scene sample_scene(const SceneSpec& spec, std::uint64_t image_seed);
Image render_background(const Scene& scene);
// Adds one defect with 4x4-supersampled coverage.
void draw_defect(Image& img, const Defect& d);
Image render(const Scene& scene);

struct Sample {
  std::string id;
  Image image;
  std::vector<GroundTruth> gts;  // pixels
};

// Stable identifier of image `index` of a run seeded with `seed`.
std::string sample_id(std::uint64_t seed, std::int64_t index);
// Quantized image and labels exactly as generate() writes them.
Sample synth_sample(const SceneSpec& spec, std::int64_t index);

enum class Split { kTrain, kVal, kTest };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct SplitRatios {
  int train = 8, val = 1, test = 1;
  // Index i goes to the split owning position i mod (train + val + test).
  Split split_of(std::int64_t index) const;
};

struct GenerateReport {
  std::array<std::int64_t, 3> counts{};  // train, val, test
};

// Writes <root>/{train,val,test}/{images,labels}/ and manifest.txt. The root
// must be absent or empty.
GenerateReport generate(const SceneSpec& spec, std::int64_t count, const std::filesystem::path& root,
                        const SplitRatios& ratios = {});

}  // namespace microdet
