#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace microdet {

// Planar RGB image, values nominally in [0, 1].
struct Image {
  int width = 0, height = 0;
  std::vector<float> data;  // (3, height, width)

  Image() = default;
  Image(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(3) * static_cast<std::size_t>(w * h), fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

// Byte value of a channel sample: round(clamp(v, 0, 1) * 255).
std::uint8_t to_byte(float v);
// Rounds every sample through to_byte, as a write/read cycle would.
Image quantized(const Image& img);

// Binary P6, maxval 255. `source` names the input in error messages.
std::string encode_ppm(const Image& img);
Image decode_ppm(std::string_view bytes, const std::string& source = "<memory>");

void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace microdet
