#include "microdet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "microdet/tensor.hpp"

namespace microdet {

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

Image quantized(const Image& img) {
  Image out = img;
  for (float& v : out.data) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

std::string encode_ppm(const Image& img) {
  if (img.width <= 0 || img.height <= 0) throw ConfigError("encode_ppm: empty image");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  out.reserve(out.size() + 3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(img.data[c * plane + i])));
  return out;
}

namespace {

class HeaderReader {
 public:
  HeaderReader(std::string_view b, const std::string& src) : bytes_(b), src_(src) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(src_ + ": byte " + std::to_string(pos_) + ": " + what);
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char ch = bytes_[pos_];
      if (ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* field) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) fail(std::string("truncated header: missing ") + field);
    long v = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + (bytes_[pos_] - '0');
      ++pos_;
      if (++digits > 6) fail(std::string(field) + " too large");
    }
    if (digits == 0) fail(std::string("expected ") + field);
    return v;
  }

  std::size_t pos_ = 0;

 private:
  std::string_view bytes_;
  const std::string& src_;
};

}  // namespace

Image decode_ppm(std::string_view bytes, const std::string& source) {
  HeaderReader r(bytes, source);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') r.fail("bad magic (expected P6)");
  r.pos_ = 2;
  if (r.pos_ < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[r.pos_]))) r.fail("bad magic (expected P6)");
  const long w = r.number("width");
  const long h = r.number("height");
  const long maxval = r.number("maxval");
  if (w <= 0 || h <= 0) r.fail("width and height must be positive");
  if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval) + " (expected 255)");
  if (r.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos_])))
    r.fail("truncated header: missing whitespace after maxval");
  ++r.pos_;
  const std::size_t plane = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  const std::size_t need = 3 * plane, have = bytes.size() - r.pos_;
  if (have < need)
    r.fail("truncated pixel data: expected " + std::to_string(need) + " bytes, got " + std::to_string(have));
  if (have > need) {
    r.pos_ += need;
    r.fail(std::to_string(have - need) + " trailing bytes after pixel data");
  }
  Image img(static_cast<int>(w), static_cast<int>(h));
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + r.pos_);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) img.data[c * plane + i] = static_cast<float>(px[3 * i + c]) / 255.0f;
  return img;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

void write_ppm(const std::filesystem::path& path, const Image& img) { write_file(path, encode_ppm(img)); }

Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }

}  // namespace microdet
