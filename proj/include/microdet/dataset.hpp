#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "microdet/synth.hpp"

namespace microdet {

// "<class_id> <cx> <cy> <w> <h>" per object, normalized, 6 decimals, LF.
std::string format_labels(const std::vector<GroundTruth>& gts, int img_size);
// Returns pixel boxes. Errors name source:line.
std::vector<GroundTruth> parse_labels(const std::string& text, int img_size, int n_classes, const std::string& source);

struct DatasetManifest {
  static constexpr int kGeneratorVersion = 1;
  SceneSpec spec;
  std::int64_t count = 0;
  SplitRatios ratios;
  std::array<std::int64_t, 3> counts{};

  std::string to_text() const;
  static DatasetManifest parse(const std::string& text, const std::string& source);
};

// One split of a generated dataset. Labels are parsed up front; images are
// read on access.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root, Split split);

  std::size_t size() const { return ids_.size(); }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  const std::vector<GroundTruth>& gts(std::size_t i) const { return gts_.at(i); }
  Sample get(std::size_t i) const;
  std::vector<Sample> load_all() const;

  const DatasetManifest& manifest() const { return manifest_; }
  int img_size() const { return manifest_.spec.img_size; }
  int n_classes() const { return manifest_.spec.n_classes; }
  Split split() const { return split_; }

 private:
  std::filesystem::path dir_;
  Split split_ = Split::kTrain;
  DatasetManifest manifest_;
  std::vector<std::string> ids_;
  std::vector<std::vector<GroundTruth>> gts_;
};

}  // namespace microdet
