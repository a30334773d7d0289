#include "microdet/grad_suite.hpp"

#include <memory>

#include "microdet/loss.hpp"
#include "microdet/nn/blocks.hpp"
#include "microdet/ops.hpp"

namespace microdet {

namespace {

using D = double;
using Fn = std::function<Tensor<D>(const std::vector<Tensor<D>>&)>;

constexpr int kProbes = 4;
// Derivatives below this are indistinguishable from central-difference
// rounding at eps 1e-5 on losses of order one.
constexpr double kLossPlateau = 1e-6;

// Case over fresh N(0, 1) leaves of the given shapes, projected to a scalar.
GradCaseFactory op_case(std::vector<Shape> shapes, Fn fn) {
  return [shapes = std::move(shapes), fn = std::move(fn)](Rng& rng) {
    GradCase c;
    for (const auto& s : shapes) c.leaves.push_back(random_normal(s, rng));
    const std::uint64_t proj = rng.next_u64();
    c.probes = kProbes;
    c.loss = [fn, leaves = c.leaves, proj](int k) {
      return random_projection(fn(leaves), Rng::derive(proj, static_cast<std::uint64_t>(k)));
    };
    return c;
  };
}

// Case over a module's input and every parameter.
template <typename M, typename Build, typename Run>
GradCaseFactory block_case(Shape input, Build build, Run run) {
  return [input = std::move(input), build, run](Rng& rng) {
    auto mod = std::shared_ptr<M>(build(rng));
    GradCase c;
    c.leaves.push_back(random_normal(input, rng));
    c.names.push_back("input");
    for (auto& p : nn::named_parameters<D>(*mod)) {
      c.leaves.push_back(p.tensor);
      c.names.push_back(p.path);
    }
    const std::uint64_t proj = rng.next_u64();
    c.probes = kProbes;
    c.loss = [mod, run, x = c.leaves[0], proj](int k) {
      return random_projection(run(*mod, x), Rng::derive(proj, static_cast<std::uint64_t>(k)));
    };
    return c;
  };
}

template <typename M, typename Build>
GradCaseFactory layer_case(Shape input, Build build) {
  return block_case<M>(std::move(input), build, [](M& m, const Tensor<D>& x) { return m.forward(x); });
}

// Randomizes BN affine parameters so the check does not sit at gamma=1, beta=0.
template <typename M>
void jitter_bn(M& m, Rng& rng) {
  for (auto& p : nn::named_parameters<D>(m))
    if (p.path.find("bn.") != std::string::npos)
      for (auto& v : p.tensor.data()) v += 0.3 * rng.normal();
}

GradCaseFactory loss_case(bool use_nwd) {
  return [use_nwd](Rng& rng) {
    const int img = 64, nc = 2, batch = 2;
    const AnchorSet anchors = AnchorSet::defaults(img);
    std::array<Tensor<D>, kNumScales> raw;
    for (std::size_t s = 0; s < kNumScales; ++s) {
      const std::int64_t g = img / kStrides[s];
      raw[s] = random_normal({batch, kAnchorsPerScale * (5 + nc), g, g}, rng);
    }
    std::vector<std::vector<GroundTruth>> gts(batch);
    for (auto& img_gts : gts) {
      const int n = 1 + static_cast<int>(rng.below(4));
      for (int i = 0; i < n; ++i) {
        const double w = rng.uniform(2, 14), h = rng.uniform(2, 14);
        img_gts.push_back({{rng.uniform(w / 2, img - w / 2), rng.uniform(h / 2, img - h / 2), w, h},
                           static_cast<int>(rng.below(nc))});
      }
    }
    auto targets = std::make_shared<AssignedTargets>(assign(gts, anchors, img));
    // Positive slots start near their encoded targets: far-off boxes sit on the
    // similarity plateau where the box gradient vanishes.
    for (std::size_t s = 0; s < kNumScales; ++s) {
      const std::int64_t g = img / kStrides[s], plane = g * g;
      auto data = raw[s].data();
      for (const Assignment& a : targets->scales[s]) {
        const EncodedBox e = encode(a, anchors, static_cast<int>(s));
        const std::int64_t base = (a.batch * raw[s].dim(1) + a.anchor * (5 + nc)) * plane + a.gy * g + a.gx;
        const double t[4] = {e.tx, e.ty, e.tw, e.th};
        for (int k = 0; k < 4; ++k) data[static_cast<std::size_t>(base + k * plane)] = t[k] + 0.5 * rng.normal();
      }
    }
    LossConfig cfg;
    cfg.n_classes = nc;
    cfg.nwd = use_nwd;
    LossBreakdown base;
    {
      NoGradGuard guard;
      (void)composite_loss<D>(raw, *targets, anchors, cfg, &base);
    }
    auto frozen = std::make_shared<std::vector<double>>(base.similarity);
    GradCase c;
    c.leaves.assign(raw.begin(), raw.end());
    c.names = {"raw_p3", "raw_p4", "raw_p5"};
    // Probe 0 is the weighted total; probes 1-3 isolate the box, objectness
    // and class terms so each is compared against its own rounding level.
    c.probes = 4;
    c.loss = [raw, targets, anchors, cfg, frozen](int k) {
      LossConfig probe = cfg;
      if (k > 0) {
        probe.box_weight = k == 1 ? 1.0 : 0.0;
        probe.obj_weight = k == 2 ? 1.0 : 0.0;
        probe.cls_weight = k == 3 ? 1.0 : 0.0;
      }
      return composite_loss<D>(raw, *targets, anchors, probe, nullptr, *frozen);
    };
    return c;
  };
}

std::vector<GradSuiteEntry> build_suite() {
  constexpr double kTol = 1e-6;
  std::vector<GradSuiteEntry> s;
  auto prim = [&](std::string name, std::vector<Shape> shapes, Fn fn) {
    s.push_back({std::move(name), "primitive", kTol, op_case(std::move(shapes), std::move(fn))});
  };
  using V = std::vector<Tensor<D>>;
  prim("conv2d", {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}}, [](const V& t) { return conv2d(t[0], t[1], t[2], {1, 1, 1}); });
  prim("conv2d_strided_grouped", {{2, 4, 6, 6}, {6, 2, 3, 3}},
       [](const V& t) { return conv2d(t[0], t[1], Tensor<D>(), {2, 1, 2}); });
  prim("conv2d_depthwise", {{2, 3, 5, 5}, {3, 1, 3, 3}, {3}},
       [](const V& t) { return conv2d(t[0], t[1], t[2], {1, 1, 3}); });
  prim("batch_norm", {{3, 2, 3, 3}, {2}, {2}}, [](const V& t) {
    Tensor<D> rm({2}, 0.0), rv({2}, 1.0);
    return batch_norm(t[0], t[1], t[2], rm, rv, {1e-5, 0.1, true});
  });
  prim("batch_norm_eval", {{3, 2, 3, 3}, {2}, {2}}, [](const V& t) {
    Tensor<D> rm(Shape{2}, std::vector<D>{0.3, -0.2}), rv(Shape{2}, std::vector<D>{0.7, 1.6});
    return batch_norm(t[0], t[1], t[2], rm, rv, {1e-5, 0.1, false});
  });
  prim("silu", {{3, 7}}, [](const V& t) { return silu(t[0]); });
  prim("sigmoid", {{3, 7}}, [](const V& t) { return sigmoid(t[0]); });
  prim("relu", {{3, 7}}, [](const V& t) { return relu(t[0]); });
  prim("matmul", {{3, 4}, {4, 5}}, [](const V& t) { return matmul(t[0], t[1]); });
  prim("matmul_batched", {{2, 3, 4}, {2, 4, 2}}, [](const V& t) { return matmul(t[0], t[1]); });
  prim("matmul_shared_rhs", {{2, 3, 4}, {4, 5}}, [](const V& t) { return matmul(t[0], t[1]); });
  prim("softmax", {{3, 5}}, [](const V& t) { return softmax(t[0], -1); });
  prim("softmax_axis1", {{2, 3, 4}}, [](const V& t) { return softmax(t[0], 1); });
  prim("add", {{2, 3, 4, 4}, {1, 3, 1, 1}}, [](const V& t) { return add(t[0], t[1]); });
  prim("sub", {{2, 3, 4}, {3, 4}}, [](const V& t) { return sub(t[0], t[1]); });
  prim("mul", {{2, 3, 4, 4}, {2, 1, 4, 1}}, [](const V& t) { return mul(t[0], t[1]); });
  prim("scale", {{4, 3}}, [](const V& t) { return scale(t[0], 2.5); });
  prim("concat", {{1, 2, 3, 3}, {1, 3, 3, 3}}, [](const V& t) { return concat(t, 1); });
  prim("split", {{2, 5, 3}}, [](const V& t) {
    auto parts = split(t[0], 1, {2, 3});
    return add(mul(parts[0], parts[0]), sum(parts[1]));
  });
  prim("mean_over", {{2, 3, 4, 5}}, [](const V& t) { return mean_over(t[0], {2, 3}); });
  prim("sum", {{3, 4}}, [](const V& t) { return sum(mul(t[0], t[0])); });
  prim("max_pool", {{2, 2, 5, 5}}, [](const V& t) { return max_pool2d(t[0], 3, 1, 1); });
  prim("max_pool_strided", {{2, 2, 6, 6}}, [](const V& t) { return max_pool2d(t[0], 2, 2, 0); });
  prim("upsample_nearest", {{2, 3, 3, 3}}, [](const V& t) { return upsample_nearest(t[0], 2); });
  prim("reshape", {{2, 3, 4}}, [](const V& t) { return reshape(t[0], {4, -1}); });
  prim("permute", {{2, 3, 4}}, [](const V& t) { return permute(t[0], {2, 0, 1}); });
  prim("layer_norm", {{2, 3, 8}, {8}, {8}}, [](const V& t) { return layer_norm(t[0], t[1], t[2], 1e-5); });

  auto block = [&](std::string name, GradCaseFactory f) {
    s.push_back({std::move(name), "block", kTol, std::move(f)});
  };
  block("cbs", layer_case<nn::Cbs<D>>({2, 3, 6, 6}, [](Rng& r) {
          auto m = new nn::Cbs<D>(3, 4, 3, 2, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("ghost_conv", layer_case<nn::GhostConv<D>>({2, 4, 5, 5}, [](Rng& r) {
          auto m = new nn::GhostConv<D>(nn::GhostSpec{4, 6, 2, 1, 3, 1}, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("ghost_bottleneck", layer_case<nn::GhostBottleneck<D>>({2, 4, 5, 5}, [](Rng& r) {
          auto m = new nn::GhostBottleneck<D>(4, 8, 4, 1, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("ghost_bottleneck_s2", layer_case<nn::GhostBottleneck<D>>({2, 4, 6, 6}, [](Rng& r) {
          auto m = new nn::GhostBottleneck<D>(4, 8, 6, 2, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("c3", layer_case<nn::C3<D>>({2, 4, 5, 5}, [](Rng& r) {
          auto m = new nn::C3<D>(4, 6, 1, true, false, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("c3_ghost", layer_case<nn::C3<D>>({2, 4, 5, 5}, [](Rng& r) {
          auto m = new nn::C3<D>(4, 8, 1, true, true, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("rep_convn", layer_case<nn::RepConvN<D>>({2, 3, 5, 5}, [](Rng& r) {
          auto m = new nn::RepConvN<D>(3, 4, 1, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("fc_block", block_case<nn::FcBlock<D>>(
                        {2, 3, 4, 4},
                        [](Rng& r) {
                          auto m = new nn::FcBlock<D>({3, 2}, 6, 2, r);
                          jitter_bn(*m, r);
                          return m;
                        },
                        [](nn::FcBlock<D>& m, const Tensor<D>& x) {
                          // Second input derived from the first keeps a single input leaf.
                          return m.forward({x, split(x, 1, {2, 1})[0]});
                        }));
  block("coord_attention", layer_case<nn::CoordAttention<D>>({2, 8, 4, 5}, [](Rng& r) {
          auto m = new nn::CoordAttention<D>(8, 4, r);
          jitter_bn(*m, r);
          return m;
        }));
  block("transformer_encoder", layer_case<nn::TransformerEncoder<D>>({2, 8, 4, 4}, [](Rng& r) {
          nn::EncoderSpec spec;
          spec.heads = 2;
          spec.layers = 1;
          spec.max_tokens = 16;
          return new nn::TransformerEncoder<D>(8, spec, r);
        }));
  block("sppf", layer_case<nn::Sppf<D>>({2, 4, 4, 4}, [](Rng& r) {
          auto m = new nn::Sppf<D>(4, 4, 3, r);
          jitter_bn(*m, r);
          return m;
        }));

  s.push_back({"composite_loss_ciou", "loss", 1e-5, loss_case(false), kLossPlateau});
  s.push_back({"composite_loss_nwd", "loss", 1e-5, loss_case(true), kLossPlateau});
  return s;
}

}  // namespace

const std::vector<GradSuiteEntry>& grad_suite() {
  static const std::vector<GradSuiteEntry> suite = build_suite();
  return suite;
}

const GradSuiteEntry* find_grad_entry(const std::string& name) {
  for (const auto& e : grad_suite())
    if (e.name == name) return &e;
  return nullptr;
}

}  // namespace microdet
