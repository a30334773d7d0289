#include "microdet/kv.hpp"

#include <charconv>
#include <cmath>
#include <set>

#include "microdet/tensor.hpp"

namespace microdet {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<KvEntry> parse_kv(std::string_view text, const std::string& source) {
  std::vector<KvEntry> out;
  std::set<std::string, std::less<>> seen;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError(where + ": expected 'key = value', got '" + std::string(line) + "'");
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError(where + ": empty key");
    if (value.empty()) throw FormatError(where + ": empty value for '" + std::string(key) + "'");
    if (!seen.insert(std::string(key)).second) throw FormatError(where + ": duplicate key '" + std::string(key) + "'");
    out.push_back({std::string(key), std::string(value), line_no});
  }
  return out;
}

std::int64_t kv_int(const std::string& value, const std::string& where) {
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw ConfigError(where + ": expected an integer, got '" + value + "'");
  return v;
}

double kv_double(const std::string& value, const std::string& where) {
  double v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size() || !std::isfinite(v))
    throw ConfigError(where + ": expected a finite number, got '" + value + "'");
  return v;
}

bool kv_bool(const std::string& value, const std::string& where) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(where + ": expected true or false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace microdet
