#pragma once

#include "microdet/rng.hpp"
#include "microdet/synth.hpp"

namespace microdet {

struct AugmentPolicy {
  double hflip_p = 0.5;
  bool crop = true;
  double crop_min = 0.7, crop_max = 1.0;  // side of the square crop / img side
  double brightness = 0.2;                // additive, uniform in [-b, b]
  double contrast_min = 0.8, contrast_max = 1.25;  // multiplicative about 0.5

  static AugmentPolicy none();
  void validate() const;
};

// Boxes keep only the part inside the crop and are dropped when that part is
// under this fraction of the box's area.
inline constexpr double kMinKeptArea = 0.25;

Sample hflip(const Sample& s);
// Square crop with top-left (x0, y0) and side `side` in pixels, resized back
// to the input size by exact area averaging.
Sample crop_resize(const Sample& s, double x0, double y0, double side);
Sample adjust_color(const Sample& s, double brightness, double contrast);

// Random draws happen in a fixed order: flip, crop scale, crop offsets,
// brightness, contrast (each only when the policy enables it).
Sample augment(const Sample& s, const AugmentPolicy& policy, Rng& rng);

}  // namespace microdet
