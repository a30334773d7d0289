#include "microdet/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "microdet/kv.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

namespace fs = std::filesystem;

std::string format_labels(const std::vector<GroundTruth>& gts, int img_size) {
  std::string out;
  char buf[128];
  const double s = img_size;
  for (const auto& g : gts) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", g.class_id, g.box.cx / s, g.box.cy / s, g.box.w / s,
                  g.box.h / s);
    out += buf;
  }
  return out;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && line[pos] == ' ') ++pos;
    if (pos >= line.size()) break;
    const auto end = std::min(line.find(' ', pos), line.size());
    out.push_back(line.substr(pos, end - pos));
    pos = end;
  }
  return out;
}

}  // namespace

std::vector<GroundTruth> parse_labels(const std::string& text, int img_size, int n_classes, const std::string& source) {
  std::vector<GroundTruth> out;
  std::size_t pos = 0;
  int line_no = 0;
  // Margin for the 6-decimal rounding of cx, cy, w and h.
  constexpr double kEdgeSlack = 1e-6;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const std::string_view line(text.data() + pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.find('\r') != std::string_view::npos) throw FormatError(where + ": CR in line (labels use LF endings)");
    if (line.find('\t') != std::string_view::npos) throw FormatError(where + ": fields must be separated by spaces");
    const auto f = split_fields(line);
    if (f.size() != 5) throw FormatError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    int cls = 0;
    if (auto [p, ec] = std::from_chars(f[0].data(), f[0].data() + f[0].size(), cls);
        ec != std::errc() || p != f[0].data() + f[0].size())
      throw FormatError(where + ": class id '" + std::string(f[0]) + "' is not an integer");
    if (cls < 0 || cls >= n_classes)
      throw FormatError(where + ": unknown class id " + std::to_string(cls) + " (dataset has " +
                        std::to_string(n_classes) + " classes)");
    std::array<double, 4> v{};
    static constexpr std::array<const char*, 4> kNames{"cx", "cy", "w", "h"};
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& t = f[k + 1];
      auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v[k]);
      if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v[k]))
        throw FormatError(where + ": " + kNames[k] + " '" + std::string(t) + "' is not a number");
      if (v[k] < 0.0 || v[k] > 1.0)
        throw FormatError(where + ": " + kNames[k] + " " + std::string(t) + " out of range [0, 1]");
    }
    if (v[2] <= 0.0 || v[3] <= 0.0) throw FormatError(where + ": box width and height must be positive");
    if (v[0] - v[2] / 2 < -kEdgeSlack || v[0] + v[2] / 2 > 1 + kEdgeSlack || v[1] - v[3] / 2 < -kEdgeSlack ||
        v[1] + v[3] / 2 > 1 + kEdgeSlack)
      throw FormatError(where + ": box extends outside the image");
    const double s = img_size;
    out.push_back({{v[0] * s, v[1] * s, v[2] * s, v[3] * s}, cls});
  }
  return out;
}

std::string DatasetManifest::to_text() const {
  std::ostringstream o;
  o << "# synthetic flat-panel defect dataset\n"
    << "generator_version = " << kGeneratorVersion << "\n"
    << "seed = " << spec.seed << "\n"
    << "count = " << count << "\n"
    << "img_size = " << spec.img_size << "\n"
    << "classes = " << spec.n_classes << "\n"
    << "difficulty = " << to_string(spec.difficulty) << "\n"
    << "min_defects = " << spec.min_defects << "\n"
    << "max_defects = " << spec.max_defects << "\n"
    << "min_size = " << format_double(spec.min_size) << "\n"
    << "max_size = " << format_double(spec.max_size) << "\n"
    << "split_ratios = " << ratios.train << ":" << ratios.val << ":" << ratios.test << "\n"
    << "train = " << counts[0] << "\n"
    << "val = " << counts[1] << "\n"
    << "test = " << counts[2] << "\n";
  return o.str();
}

DatasetManifest DatasetManifest::parse(const std::string& text, const std::string& source) {
  DatasetManifest m;
  std::set<std::string> got;
  for (const auto& e : parse_kv(text, source)) {
    const std::string where = source + ":" + std::to_string(e.line);
    const auto& v = e.value;
    if (e.key == "generator_version") {
      if (kv_int(v, where) != kGeneratorVersion) throw FormatError(where + ": unsupported generator_version " + v);
    } else if (e.key == "seed") {
      std::uint64_t s = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
      if (ec != std::errc() || p != v.data() + v.size()) throw FormatError(where + ": bad seed '" + v + "'");
      m.spec.seed = s;
    } else if (e.key == "count") {
      m.count = kv_int(v, where);
    } else if (e.key == "img_size") {
      m.spec.img_size = static_cast<int>(kv_int(v, where));
    } else if (e.key == "classes") {
      m.spec.n_classes = static_cast<int>(kv_int(v, where));
    } else if (e.key == "difficulty") {
      m.spec.difficulty = parse_difficulty(v);
    } else if (e.key == "min_defects") {
      m.spec.min_defects = static_cast<int>(kv_int(v, where));
    } else if (e.key == "max_defects") {
      m.spec.max_defects = static_cast<int>(kv_int(v, where));
    } else if (e.key == "min_size") {
      m.spec.min_size = kv_double(v, where);
    } else if (e.key == "max_size") {
      m.spec.max_size = kv_double(v, where);
    } else if (e.key == "split_ratios") {
      int a = 0, b = 0, c = 0;
      char t1 = 0, t2 = 0;
      std::istringstream in(v);
      if (!(in >> a >> t1 >> b >> t2 >> c) || t1 != ':' || t2 != ':' || !in.eof())
        throw FormatError(where + ": bad split_ratios '" + v + "'");
      m.ratios = {a, b, c};
    } else if (e.key == "train" || e.key == "val" || e.key == "test") {
      m.counts[static_cast<std::size_t>(parse_split(e.key))] = kv_int(v, where);
    } else {
      throw FormatError(where + ": unknown manifest key '" + e.key + "'");
    }
    got.insert(e.key);
  }
  for (const char* k : {"generator_version", "seed", "img_size", "classes"})
    if (!got.count(k)) throw FormatError(source + ": missing manifest key '" + k + "'");
  m.spec.validate();
  return m;
}

Dataset Dataset::open(const fs::path& root, Split split) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError(root.string() + ": data directory not found");
  const fs::path manifest = root / "manifest.txt";
  if (!fs::exists(manifest, ec)) throw IoError(manifest.string() + ": manifest not found");
  Dataset d;
  d.split_ = split;
  d.dir_ = root / to_string(split);
  d.manifest_ = DatasetManifest::parse(read_file(manifest), manifest.string());
  const fs::path images = d.dir_ / "images", labels = d.dir_ / "labels";
  if (!fs::is_directory(images, ec)) throw IoError(images.string() + ": split directory not found");
  if (!fs::is_directory(labels, ec)) throw IoError(labels.string() + ": split directory not found");

  for (const auto& e : fs::directory_iterator(images)) {
    if (e.path().extension() != ".ppm") throw FormatError(e.path().string() + ": unexpected file (images must be .ppm)");
    d.ids_.push_back(e.path().stem().string());
  }
  std::sort(d.ids_.begin(), d.ids_.end());
  const std::set<std::string> ids(d.ids_.begin(), d.ids_.end());
  for (const auto& e : fs::directory_iterator(labels)) {
    if (e.path().extension() != ".txt" || !ids.count(e.path().stem().string()))
      throw FormatError(e.path().string() + ": label without a matching image");
  }
  for (const auto& id : d.ids_) {
    const fs::path lp = labels / (id + ".txt");
    if (!fs::exists(lp, ec))
      throw FormatError((images / (id + ".ppm")).string() + ": missing label file " + lp.string());
    d.gts_.push_back(parse_labels(read_file(lp), d.img_size(), d.n_classes(), lp.string()));
  }
  return d;
}

Sample Dataset::get(std::size_t i) const {
  Sample s;
  s.id = id(i);
  const fs::path p = dir_ / "images" / (s.id + ".ppm");
  s.image = read_ppm(p);
  if (s.image.width != img_size() || s.image.height != img_size())
    throw FormatError(p.string() + ": image is " + std::to_string(s.image.width) + "x" +
                      std::to_string(s.image.height) + ", dataset img_size is " + std::to_string(img_size()));
  s.gts = gts_[i];
  return s;
}

std::vector<Sample> Dataset::load_all() const {
  std::vector<Sample> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(get(i));
  return out;
}

}  // namespace microdet
