#include "microdet/verify.hpp"

#include <algorithm>
#include <cmath>

#include "microdet/detector.hpp"
#include "microdet/nn/blocks.hpp"
#include "microdet/rng.hpp"

namespace microdet {

namespace {

Tensor<float> random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor<float> t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  float d = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

void randomize_bn(nn::Module<float>& m, Rng& rng) {
  for (auto& nt : nn::named_tensors(m)) {
    auto d = nt.tensor.data();
    if (nt.path.ends_with("bn.weight"))
      for (auto& v : d) v = static_cast<float>(rng.uniform(0.5, 1.5));
    if (nt.path.ends_with("bn.bias") || nt.path.ends_with("running_mean"))
      for (auto& v : d) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    if (nt.path.ends_with("running_var"))
      for (auto& v : d) v = static_cast<float>(rng.uniform(0.5, 2.0));
  }
}

}  // namespace

double FuseCheckReport::block_max() const {
  return block_trial_max.empty() ? 0.0 : *std::max_element(block_trial_max.begin(), block_trial_max.end());
}

double FuseCheckReport::model_max() const {
  return model_input_max.empty() ? 0.0 : *std::max_element(model_input_max.begin(), model_input_max.end());
}

bool FuseCheckReport::passed(double block_tol, double model_tol) const {
  return block_max() < block_tol && model_max() < model_tol;
}

FuseCheckReport fuse_check(std::uint64_t seed, int block_trials, int model_inputs) {
  FuseCheckReport rep;
  NoGradGuard no_grad;
  for (int trial = 0; trial < block_trials; ++trial) {
    Rng rng(Rng::derive(Rng::derive(seed, 1), static_cast<std::uint64_t>(trial)));
    const auto ci = static_cast<std::int64_t>(1 + rng.below(32)), co = static_cast<std::int64_t>(1 + rng.below(32));
    const auto hw = static_cast<std::int64_t>(1 + rng.below(16));
    const int stride = rng.bernoulli(0.3) ? 2 : 1;
    nn::RepConvN<float> block(ci, co, stride, rng);
    randomize_bn(block, rng);
    block.eval();
    const auto x = random_tensor({2, ci, hw, hw}, rng, -2.0, 2.0);
    const auto before = block.forward(x, nn::RepMode::kTrain);
    block.fuse();
    rep.block_trial_max.push_back(max_abs_diff(before, block.forward(x, nn::RepMode::kDeploy)));
  }
  if (model_inputs > 0) {
    ModelConfig cfg;
    cfg.repgfpn = true;
    Rng rng(Rng::derive(seed, 2));
    Detector<float> model(cfg, Rng::derive(seed, 3));
    model.train();
    for (int i = 0; i < 3; ++i) model.forward(random_tensor({2, 3, cfg.img_size, cfg.img_size}, rng, 0.0, 1.0));
    model.eval();
    std::vector<Tensor<float>> inputs;
    std::vector<RawPrediction> before;
    for (int i = 0; i < model_inputs; ++i) {
      inputs.push_back(random_tensor({1, 3, cfg.img_size, cfg.img_size}, rng, 0.0, 1.0));
      before.push_back(model.forward(inputs.back()));
    }
    rep.fused_blocks = model.reparameterize();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto after = model.forward(inputs[i]);
      float worst = 0;
      for (int s = 0; s < kNumScales; ++s)
        worst = std::max(worst, max_abs_diff(before[i][static_cast<std::size_t>(s)], after[static_cast<std::size_t>(s)]));
      rep.model_input_max.push_back(worst);
    }
  }
  return rep;
}

}  // namespace microdet
