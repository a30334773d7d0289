#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace microdet {

// One `key = value` line. `#` starts a comment anywhere on a line.
struct KvEntry {
  std::string key, value;
  int line = 0;
};

// Rejects lines without '=', empty keys and duplicate keys, naming
// source:line.
std::vector<KvEntry> parse_kv(std::string_view text, const std::string& source);

// Typed accessors; `where` prefixes error messages (usually "source:line").
std::int64_t kv_int(const std::string& value, const std::string& where);
double kv_double(const std::string& value, const std::string& where);
bool kv_bool(const std::string& value, const std::string& where);

// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace microdet
