#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "microdet/augment.hpp"
#include "microdet/detector.hpp"

namespace microdet {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr = 1e-3;
  double warmup_epochs = 3.0;
  double final_lr_ratio = 0.01;  // cosine decay ends at lr * ratio
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 0.0;     // decoupled, applied to weights only
  double grad_clip = 10.0;       // global L2 norm; 0 disables
  std::uint64_t seed = 0;
  int eval_every = 1;            // 0: never evaluate
  int eval_batch = 16;
  bool augment = true;

  void validate() const;
};

struct EvalConfig {
  double conf = 0.25;        // operating point for P/R and counts
  double sweep_conf = 0.001; // candidate threshold for the AP sweep
  double nms_iou = 0.45;
  double match_iou = 0.5;    // detection/ground-truth IoU for a true positive
};

// Flat `key = value` run configuration. Every key has a default; unknown
// keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  AugmentPolicy augment;
  EvalConfig eval;

  // Applies the lines of `text` on top of the defaults.
  static RunConfig parse(const std::string& text, const std::string& source);
  static RunConfig load(const std::filesystem::path& path);
  // Applies a single override ("train.epochs", "5").
  void set(const std::string& key, const std::string& value, const std::string& where = "override");
  // Every key with its effective value, in a fixed order.
  std::string to_text() const;
  static std::vector<std::string> keys();

  // Copies shared values (toggle IV, class count) into the loss config.
  LossConfig effective_loss() const;
  void validate() const;
};

}  // namespace microdet
