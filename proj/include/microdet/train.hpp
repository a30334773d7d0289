#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "microdet/dataset.hpp"
#include "microdet/detector.hpp"
#include "microdet/metrics.hpp"
#include "microdet/run_config.hpp"

namespace microdet {

// Loss became NaN/inf; the message names epoch and step.
class TrainingError : public Error {
 public:
  using Error::Error;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0, box = 0, obj = 0, cls = 0;
  std::optional<double> map50, precision, recall;  // empty on non-eval epochs
  double seconds = 0;
};

struct RunLog {
  std::vector<EpochRecord> rows;

  static std::string header() { return "epoch,loss,box,obj,cls,map50,precision,recall,seconds"; }
  std::string to_csv() const;
  static RunLog parse_csv(const std::string& text, const std::string& source);
};

// Peak lr after a linear warmup, then cosine decay to lr * final_lr_ratio.
double learning_rate(const TrainConfig& cfg, std::int64_t step, std::int64_t steps_per_epoch);

// Adam with bias correction and optional decoupled weight decay.
class Adam {
 public:
  Adam(std::vector<nn::NamedTensor<float>> params, const TrainConfig& cfg);
  // Global gradient L2 norm before clipping.
  double step(double lr);
  std::int64_t steps() const { return t_; }
  std::vector<TdwTensor> state() const;
  void load_state(const std::vector<TdwTensor>& tensors, const std::string& source);

 private:
  std::vector<nn::NamedTensor<float>> params_;
  std::vector<std::vector<float>> m_, v_;
  TrainConfig cfg_;
  std::int64_t t_ = 0;
};

// Full sweep at cfg.sweep_conf for AP; counts and P/R at cfg.conf.
EvalReport evaluate_model(Detector<float>& model, const Dataset& data, const EvalConfig& cfg, int batch_size);

struct TrainOptions {
  std::filesystem::path out_dir;  // runlog.csv, config.txt, checkpoints/{last,best,final}
  int stop_after = 0;             // stop once this epoch is checkpointed (0: run to the end)
  std::ostream* progress = nullptr;
};

struct TrainResult {
  Detector<float> model;
  RunLog log;
  int best_epoch = 0;  // 0: never evaluated
  double best_map50 = -1.0;
  bool finished = false;  // false when stopped early by stop_after
};

TrainResult train(const RunConfig& cfg, const std::filesystem::path& data_root, const TrainOptions& opt);
// Continues from a checkpoint directory (weights.tdw, optim.tdw, state.txt,
// config.txt, runlog.csv). Only train.epochs may differ from the checkpoint's
// configuration.
TrainResult resume(const std::filesystem::path& checkpoint, const RunConfig& cfg,
                   const std::filesystem::path& data_root, const TrainOptions& opt);

// Model configuration stored next to a weights file (config.txt).
RunConfig config_for_weights(const std::filesystem::path& weights);

// Stacks images into an (N, 3, S, S) batch.
Tensor<float> to_batch(const std::vector<const Image*>& images);

}  // namespace microdet
