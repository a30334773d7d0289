#pragma once

#include <array>
#include <vector>

#include "microdet/box.hpp"
#include "microdet/image.hpp"

namespace microdet {

// Inclusive pixel rectangle of a box outline.
struct PixelRect {
  int left = 0, top = 0, right = 0, bottom = 0;
  bool operator==(const PixelRect&) const = default;
};

// Corners rounded to the nearest pixel edge, then clipped to the image:
// columns round(x1) .. round(x2) - 1, at least one pixel wide.
PixelRect outline_rect(const BBox& box, int width, int height);

// Class 0 red, class 1 green, further classes blue.
std::array<float, 3> class_color(int class_id);

// 1-pixel outlines in the class color, lowest confidence first. Each box
// gets a confidence tick: the pixel diagonally outside its top-left corner
// set to gray level = confidence (skipped when outside the image).
Image draw_detections(const Image& image, const std::vector<Detection>& dets);

}  // namespace microdet
