#include "microdet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "microdet/tensor.hpp"

namespace microdet {

AugmentPolicy AugmentPolicy::none() {
  AugmentPolicy p;
  p.hflip_p = 0.0;
  p.crop = false;
  p.brightness = 0.0;
  p.contrast_min = p.contrast_max = 1.0;
  return p;
}

void AugmentPolicy::validate() const {
  if (!(hflip_p >= 0.0 && hflip_p <= 1.0)) throw ConfigError("augment: hflip probability must be in [0, 1]");
  if (crop && !(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0))
    throw ConfigError("augment: crop scale range must satisfy 0 < min <= max <= 1");
  if (!(brightness >= 0.0 && brightness <= 1.0)) throw ConfigError("augment: brightness must be in [0, 1]");
  if (!(contrast_min > 0.0 && contrast_min <= contrast_max)) throw ConfigError("augment: bad contrast range");
}

Sample hflip(const Sample& s) {
  Sample out = s;
  const int w = s.image.width;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s.image.height; ++y)
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
  for (auto& g : out.gts) g.box.cx = w - g.box.cx;
  return out;
}

namespace {

// Area-averaging weights of destination cells [lo + j r, lo + (j + 1) r].
std::vector<std::vector<std::pair<int, double>>> resample_weights(double lo, double r, int n_out, int n_in) {
  std::vector<std::vector<std::pair<int, double>>> w(static_cast<std::size_t>(n_out));
  for (int j = 0; j < n_out; ++j) {
    const double a = lo + j * r, b = lo + (j + 1) * r;
    const int first = std::max(0, static_cast<int>(std::floor(a)));
    const int last = std::min(n_in - 1, static_cast<int>(std::ceil(b)) - 1);
    for (int i = first; i <= last; ++i) {
      const double ov = std::min<double>(i + 1, b) - std::max<double>(i, a);
      if (ov > 0.0) w[static_cast<std::size_t>(j)].emplace_back(i, ov / r);
    }
  }
  return w;
}

}  // namespace

Sample crop_resize(const Sample& s, double x0, double y0, double side) {
  const int W = s.image.width, H = s.image.height;
  constexpr double kSlack = 1e-9;
  if (!(side > 0.0) || x0 < -kSlack || y0 < -kSlack || x0 + side > W + kSlack || y0 + side > H + kSlack)
    throw ConfigError("crop_resize: crop window outside the image");
  const double rx = side / W, ry = side / H;
  const auto wx = resample_weights(x0, rx, W, W), wy = resample_weights(y0, ry, H, H);

  Image tmp(W, H), out(W, H);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (const auto& [i, w] : wx[static_cast<std::size_t>(x)]) acc += w * s.image.at(c, y, i);
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (const auto& [i, w] : wy[static_cast<std::size_t>(y)]) acc += w * tmp.at(c, i, x);
        out.at(c, y, x) = static_cast<float>(acc);
      }

  Sample r;
  r.id = s.id;
  r.image = std::move(out);
  for (const auto& g : s.gts) {
    const double x1 = (g.box.x1() - x0) / rx, x2 = (g.box.x2() - x0) / rx;
    const double y1 = (g.box.y1() - y0) / ry, y2 = (g.box.y2() - y0) / ry;
    const double cx1 = std::clamp<double>(x1, 0, W), cx2 = std::clamp<double>(x2, 0, W);
    const double cy1 = std::clamp<double>(y1, 0, H), cy2 = std::clamp<double>(y2, 0, H);
    if (cx2 <= cx1 || cy2 <= cy1) continue;
    if ((cx2 - cx1) * (cy2 - cy1) < kMinKeptArea * (x2 - x1) * (y2 - y1)) continue;
    r.gts.push_back({BBox::from_corners(cx1, cy1, cx2, cy2), g.class_id});
  }
  return r;
}

Sample adjust_color(const Sample& s, double brightness, double contrast) {
  Sample out = s;
  for (float& v : out.image.data)
    v = static_cast<float>(std::clamp((v + brightness - 0.5) * contrast + 0.5, 0.0, 1.0));
  return out;
}

Sample augment(const Sample& s, const AugmentPolicy& policy, Rng& rng) {
  policy.validate();
  Sample out = s;
  if (policy.hflip_p > 0.0 && rng.bernoulli(policy.hflip_p)) out = hflip(out);
  if (policy.crop) {
    const double side = rng.uniform(policy.crop_min, policy.crop_max) * out.image.width;
    const double x0 = rng.uniform(0.0, out.image.width - side), y0 = rng.uniform(0.0, out.image.height - side);
    out = crop_resize(out, x0, y0, side);
  }
  const double b = policy.brightness > 0.0 ? rng.uniform(-policy.brightness, policy.brightness) : 0.0;
  const double k = policy.contrast_max > policy.contrast_min ? rng.uniform(policy.contrast_min, policy.contrast_max)
                                                             : policy.contrast_min;
  return adjust_color(out, b, k);
}

}  // namespace microdet
