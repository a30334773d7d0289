#include "microdet/render.hpp"

#include <algorithm>
#include <cmath>

namespace microdet {

PixelRect outline_rect(const BBox& box, int width, int height) {
  auto edge = [](double v, int limit) { return std::clamp(static_cast<int>(std::lround(v)), 0, limit); };
  PixelRect r;
  r.left = edge(box.x1(), width - 1);
  r.top = edge(box.y1(), height - 1);
  r.right = std::clamp(edge(box.x2(), width) - 1, r.left, width - 1);
  r.bottom = std::clamp(edge(box.y2(), height) - 1, r.top, height - 1);
  return r;
}

std::array<float, 3> class_color(int class_id) {
  switch (class_id) {
    case 0: return {1.0f, 0.0f, 0.0f};
    case 1: return {0.0f, 1.0f, 0.0f};
    default: return {0.0f, 0.0f, 1.0f};
  }
}

Image draw_detections(const Image& image, const std::vector<Detection>& dets) {
  Image out = image;
  std::vector<const Detection*> order;
  for (const auto& d : dets) order.push_back(&d);
  std::stable_sort(order.begin(), order.end(),
                   [](const Detection* a, const Detection* b) { return a->confidence < b->confidence; });
  auto put = [&](int x, int y, const std::array<float, 3>& c) {
    for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = c[static_cast<std::size_t>(ch)];
  };
  for (const Detection* d : order) {
    const PixelRect r = outline_rect(d->box, out.width, out.height);
    const auto color = class_color(d->class_id);
    for (int x = r.left; x <= r.right; ++x) {
      put(x, r.top, color);
      put(x, r.bottom, color);
    }
    for (int y = r.top; y <= r.bottom; ++y) {
      put(r.left, y, color);
      put(r.right, y, color);
    }
    if (r.left > 0 && r.top > 0) {
      const auto g = static_cast<float>(std::clamp(d->confidence, 0.0, 1.0));
      put(r.left - 1, r.top - 1, {g, g, g});
    }
  }
  return out;
}

}  // namespace microdet
