#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "microdet/loss.hpp"
#include "microdet/nn/blocks.hpp"

namespace microdet {

struct ModelConfig {
  int img_size = 64;
  double width_scale = 1.0;
  double depth_scale = 1.0;
  bool ghost = false;      // I
  bool repgfpn = false;    // II
  bool attention = false;  // III
  bool nwd = false;        // IV (read by the loss)
  int n_classes = 2;
  std::optional<AnchorSet> anchors;  // defaults scale with img_size

  AnchorSet resolved_anchors() const { return anchors ? *anchors : AnchorSet::defaults(img_size); }
  void validate() const;
  // "ghost repgfpn attention nwd" as four 0/1 digits, e.g. "1010".
  std::string toggles() const;
  void set_toggles(const std::string& bits);
  int outputs_per_anchor() const { return 5 + n_classes; }
  // Channel widths {16, 32, 64, 128} scaled and rounded up to multiples of 8.
  std::array<std::int64_t, 4> widths() const;
  int depth() const;
};

using RawPrediction = std::array<Tensor<float>, kNumScales>;

template <typename T>
class Detector : public nn::Module<T> {
 public:
  Detector(const ModelConfig& config, std::uint64_t seed);
  ~Detector() override;
  Detector(Detector&&) noexcept;
  Detector& operator=(Detector&&) noexcept;

  // images (N, 3, S, S) in [0, 1] -> per scale (N, 3 * (5 + nc), S / stride, S / stride).
  std::array<Tensor<T>, kNumScales> forward(const Tensor<T>& images);
  void visit(nn::ModuleVisitor<T>& v) override;

  const ModelConfig& config() const { return config_; }
  std::int64_t parameter_count();
  // Multiply-accumulates of the backbone / whole network in the latest forward.
  std::uint64_t last_backbone_macs() const { return backbone_macs_; }
  std::uint64_t last_total_macs() const { return total_macs_; }

  // Fuses every RepConvN for inference. Requires eval mode; a second call is
  // rejected. Returns the number of fused blocks.
  int reparameterize();
  bool deployed() const { return deployed_; }

 private:
  struct Impl;
  ModelConfig config_;
  std::unique_ptr<Impl> impl_;
  std::uint64_t backbone_macs_ = 0;
  std::uint64_t total_macs_ = 0;
  bool deployed_ = false;
};

struct DecodeOptions {
  double conf_thresh = 0.25;  // keep conf > conf_thresh
  double iou_thresh = 0.45;   // per-class greedy NMS, suppress IoU > iou_thresh
  std::size_t max_detections = 300;
};

// Per-image detections in pixels, sorted by descending confidence.
template <typename T>
std::vector<std::vector<Detection>> decode(const std::array<Tensor<T>, kNumScales>& raw, const ModelConfig& config,
                                           const DecodeOptions& opt = {});

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, std::size_t max_detections = 300);

// TDW1 weights file: every named parameter and buffer.
template <typename T>
void save_weights(Detector<T>& model, const std::filesystem::path& path);
template <typename T>
void load_weights_into(Detector<T>& model, const std::filesystem::path& path);
template <typename T>
Detector<T> load_weights(const std::filesystem::path& path, const ModelConfig& config);

struct TdwTensor {
  std::string name;
  int dtype = 0;  // 0 = f32, 1 = f64
  Shape shape;
  std::vector<double> values;
};
std::vector<TdwTensor> read_tdw(const std::filesystem::path& path);
void write_tdw(const std::filesystem::path& path, const std::vector<TdwTensor>& tensors);

}  // namespace microdet
