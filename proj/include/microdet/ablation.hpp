#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "microdet/run_config.hpp"

namespace microdet {

struct AblationRow {
  std::string toggles;  // "ghost repgfpn attention nwd" as 0/1 digits
  double map50 = 0, precision = 0, recall = 0;  // val metrics at the best epoch
  int epochs = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or "error: <message>"
};

// "0000", "0001", ..., "1111".
std::vector<std::string> ablation_toggles();

struct AblationOptions {
  RunConfig base;                  // toggles are overwritten per row
  std::filesystem::path data_root;
  std::filesystem::path runs_dir;  // one run directory per toggle string
  int jobs = 1;
  std::ostream* progress = nullptr;
};

// Trains every toggle combination on identical data, seed and schedule. A
// failed run is recorded in its row instead of aborting the sweep. Rows come
// back in toggle order whatever the completion order.
std::vector<AblationRow> run_ablation(const AblationOptions& opt);

// '#' comment lines (reference values, metric conventions), then the header
// ghost,repgfpn,attention,nwd,map50,precision,recall,epochs,seed,status and
// one line per row.
std::string ablation_csv(const std::vector<AblationRow>& rows, const RunConfig& base);
std::string ablation_header();

}  // namespace microdet
