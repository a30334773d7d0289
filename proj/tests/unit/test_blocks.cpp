#include <doctest.h>

#include <cmath>
#include <set>

#include "microdet/grad_check.hpp"
#include "microdet/nn/blocks.hpp"

using namespace microdet;
using namespace microdet::nn;

namespace {

template <typename T>
Tensor<T> randn(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T>
void set_matching(Module<T>& m, const std::string& suffix, T value, const std::string& prefix = "") {
  for (auto& nt : named_tensors(m))
    if (nt.path.starts_with(prefix) && nt.path.ends_with(suffix))
      for (auto& v : nt.tensor.data()) v = value;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

// Puts every batch norm of a module into a non-trivial eval state.
template <typename T>
void randomize_bn(Module<T>& m, Rng& rng) {
  for (auto& nt : named_tensors(m)) {
    if (nt.path.ends_with("bn.weight"))
      for (auto& v : nt.tensor.data()) v = static_cast<T>(rng.uniform(0.5, 1.5));
    if (nt.path.ends_with("bn.bias") || nt.path.ends_with("running_mean"))
      for (auto& v : nt.tensor.data()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
    if (nt.path.ends_with("running_var"))
      for (auto& v : nt.tensor.data()) v = static_cast<T>(rng.uniform(0.5, 2.0));
  }
}

}  // namespace

TEST_CASE("cbs") {
  Rng rng(1);
  Cbs<double> cbs(3, 16, 3, 2, rng);
  auto x = randn<double>({1, 3, 32, 32}, rng);
  CHECK(cbs.forward(x).shape() == Shape{1, 16, 16, 16});

  set_matching<double>(cbs, "bn.weight", 0.0);
  set_matching<double>(cbs, "bn.bias", 0.7);
  auto y = cbs.forward(x);
  const double expect = 0.7 / (1.0 + std::exp(-0.7));
  for (double v : y.data()) CHECK(v == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("ghost conv") {
  Rng rng(2);
  GhostSpec spec{16, 32, 2, 1, 3, 1};
  GhostConv<double> g(spec, rng);
  auto x = randn<double>({2, 16, 6, 6}, rng);
  auto y = g.forward(x);
  CHECK(y.shape() == Shape{2, 32, 6, 6});

  // Channels [0, m) are the primary output itself (identity transform).
  Cbs<double> primary(16, 16, 1, 1, rng);
  auto nt = named_tensors<double>(g);
  auto pt = named_tensors<double>(primary);
  for (auto& p : pt)
    for (auto& q : nt)
      if (q.path == "primary." + p.path) std::copy(q.tensor.data().begin(), q.tensor.data().end(), p.tensor.data().begin());
  auto yp = primary.forward(x);
  auto head = split(y, 1, {16, 16})[0];
  CHECK(max_abs_diff(head, yp) == 0.0);

  for (int ratio : {1, 2, 4}) {
    for (std::int64_t c_out : {8, 16, 24}) {
      GhostSpec s{8, c_out, ratio, 1, 3, 1};
      if (c_out % ratio) continue;
      GhostConv<double> gc(s, rng);
      CHECK(gc.forward(randn<double>({1, 8, 4, 4}, rng)).dim(1) == c_out);
    }
  }
  // s = 1: no cheap branch, just the primary conv.
  GhostConv<double> plain({8, 8, 1, 1, 3, 1}, rng);
  for (auto& p : named_tensors<double>(plain)) CHECK_FALSE(p.path.starts_with("cheap"));

  CHECK_THROWS_AS(GhostConv<double>({8, 9, 2, 1, 3, 1}, rng), ConfigError);

  // Fewer multiply-accumulates than a dense conv with the same output.
  GhostSpec k3{16, 32, 2, 3, 3, 1};
  GhostConv<double> g3(k3, rng);
  Cbs<double> dense(16, 32, 3, 1, rng);
  std::uint64_t ghost_macs, dense_macs;
  {
    MacCounter c;
    g3.forward(x);
    ghost_macs = c.total();
  }
  {
    MacCounter c;
    dense.forward(x);
    dense_macs = c.total();
  }
  // Closed form: primary 16->16 k3 plus 16 depthwise 3x3 maps.
  CHECK(ghost_macs == 2u * 36u * (16u * 16u * 9u + 16u * 9u));
  CHECK(dense_macs == 2u * 36u * 32u * 16u * 9u);
  CHECK(ghost_macs < dense_macs);
}

TEST_CASE("ghost bottleneck") {
  Rng rng(3);
  GhostBottleneck<double> same(8, 16, 8, 1, rng);
  auto x = randn<double>({2, 8, 6, 6}, rng);
  CHECK(same.forward(x).shape() == x.shape());
  CHECK(same.identity_shortcut());
  GhostBottleneck<double> down(8, 16, 12, 2, rng);
  CHECK(down.forward(x).shape() == Shape{2, 12, 3, 3});
  CHECK_THROWS_AS(GhostBottleneck<double>(8, 16, 8, 3, rng), ConfigError);

  // Main path zeroed through the projection's BN scale: residual identity.
  set_matching<double>(same, "bn.weight", 0.0, "ghost2.");
  CHECK(max_abs_diff(same.forward(x), x) == 0.0);
}

TEST_CASE("c3") {
  Rng rng(4);
  auto x = randn<double>({1, 8, 5, 5}, rng);
  for (bool ghost : {false, true})
    for (int n : {0, 1, 2}) {
      C3<double> c3(8, 24, n, true, ghost, rng);
      CHECK(c3.forward(x).shape() == Shape{1, 24, 5, 5});
    }
  C3<double> empty(8, 24, 0, true, false, rng);
  for (auto& p : named_tensors<double>(empty)) CHECK_FALSE(p.path.starts_with("m."));
}

TEST_CASE("rep_convN fusion") {
  Rng rng(5);
  SUBCASE("1x1 branch alone lands on the kernel center") {
    RepConvN<double> rep(2, 3, 1, rng);
    set_matching<double>(rep, "conv.weight", 0.0, "dense.");
    rep.eval();
    rep.fuse();
    const auto& fw = rep.fused().weight;
    auto& bn = rep.pointwise().bn();
    auto pw = rep.pointwise().conv().weight().data();
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 2; ++i)
        for (int k = 0; k < 9; ++k) {
          const double v = fw.data()[(o * 2 + i) * 9 + k];
          if (k != 4) {
            CHECK(v == 0.0);
          } else {
            const double s = bn.gamma().data()[o] / std::sqrt(bn.running_var().data()[o] + 1e-5);
            CHECK(v == doctest::Approx(pw[o * 2 + i] * s).epsilon(1e-14));
          }
        }
  }
  SUBCASE("both branches zero leave only the folded shifts") {
    RepConvN<double> rep(2, 3, 1, rng);
    set_matching<double>(rep, "conv.weight", 0.0);
    randomize_bn<double>(rep, rng);
    rep.eval();
    rep.fuse();
    for (double v : rep.fused().weight.data()) CHECK(v == 0.0);
    for (int o = 0; o < 3; ++o) {
      double expect = 0;
      for (auto* b : {&rep.dense().bn(), &rep.pointwise().bn()})
        expect += b->beta().data()[o] -
                  b->running_mean().data()[o] * b->gamma().data()[o] / std::sqrt(b->running_var().data()[o] + 1e-5);
      CHECK(rep.fused().bias.data()[o] == doctest::Approx(expect).epsilon(1e-14));
    }
  }
  SUBCASE("BN folding reproduces conv followed by eval BN") {
    Cbs<double> cb(4, 5, 3, 1, rng, 1, false);
    randomize_bn<double>(cb, rng);
    cb.eval();
    auto x = randn<double>({2, 4, 6, 6}, rng);
    auto f = fold_conv_bn(cb.conv(), cb.bn());
    auto y = conv2d(x, f.weight, f.bias, {1, 1, 1});
    CHECK(max_abs_diff(y, cb.forward(x)) < 1e-12);
  }
  SUBCASE("state machine") {
    RepConvN<double> rep(2, 2, 1, rng);
    auto x = randn<double>({1, 2, 4, 4}, rng);
    CHECK_THROWS_AS(rep.forward(x, RepMode::kDeploy), StateError);
    CHECK_THROWS_AS(rep.fuse(), StateError);  // training mode
    rep.eval();
    rep.fuse();
    CHECK(rep.deployed());
    CHECK_THROWS_AS(rep.fuse(), StateError);
  }
  SUBCASE("random instances: f64 within 1e-10, f32 within 1e-5") {
    double worst32 = 0, worst64 = 0;
    for (int trial = 0; trial < 60; ++trial) {
      const auto ci = static_cast<std::int64_t>(1 + rng.below(32)), co = static_cast<std::int64_t>(1 + rng.below(32));
      const auto hw = static_cast<std::int64_t>(1 + rng.below(16));
      const int stride = rng.bernoulli(0.3) ? 2 : 1;
      Rng r64(trial), r32(trial);
      RepConvN<double> a(ci, co, stride, r64);
      RepConvN<float> b(ci, co, stride, r32);
      Rng s1(100 + trial), s2(100 + trial);
      randomize_bn<double>(a, s1);
      randomize_bn<float>(b, s2);
      a.eval();
      b.eval();
      Rng xi(200 + trial), xf(200 + trial);
      auto x64 = randn<double>({2, ci, hw, hw}, xi);
      auto x32 = randn<float>({2, ci, hw, hw}, xf);
      auto ya = a.forward(x64, RepMode::kTrain);
      auto yb = b.forward(x32, RepMode::kTrain);
      a.fuse();
      b.fuse();
      worst64 = std::max(worst64, max_abs_diff(ya, a.forward(x64, RepMode::kDeploy)));
      worst32 = std::max(worst32, max_abs_diff(yb, b.forward(x32, RepMode::kDeploy)));
    }
    CHECK(worst64 < 1e-10);
    CHECK(worst32 < 1e-5);
  }
}

TEST_CASE("fc block") {
  Rng rng(6);
  FcBlock<double> one({8}, 12, 1, rng);
  auto x = randn<double>({1, 8, 4, 4}, rng);
  CHECK(one.forward({x}).shape() == Shape{1, 12, 4, 4});
  FcBlock<double> three({8, 4, 6}, 12, 2, rng);
  auto y = three.forward({x, randn<double>({1, 4, 4, 4}, rng), randn<double>({1, 6, 4, 4}, rng)});
  CHECK(y.shape() == Shape{1, 12, 4, 4});
  CHECK_THROWS_AS(three.forward({x, randn<double>({1, 4, 2, 2}, rng), randn<double>({1, 6, 4, 4}, rng)}),
                  ShapeError);
  CHECK_THROWS_AS(three.forward({x}), ShapeError);
}

TEST_CASE("coordinate attention") {
  Rng rng(7);
  CoordAttention<double> ca(32, 16, rng);
  CHECK(ca.reduced_channels() == 8);
  auto x = randn<double>({2, 32, 8, 8}, rng);
  CHECK(ca.forward(x).shape() == x.shape());
  CoordAttention<double> wide(32, 1, rng);
  CHECK(wide.forward(x).shape() == x.shape());
  CHECK_THROWS_AS(CoordAttention<double>(32, 0, rng), ConfigError);

  for (auto* g : {&ca.gate_h(), &ca.gate_w()}) {
    for (auto& v : g->weight().data()) v = 0.0;
    for (auto& v : g->bias().data()) v = 20.0;
  }
  Tensor<double> u({2, 32, 8, 8});
  for (auto& v : u.data()) v = rng.uniform(-1, 1);
  CHECK(max_abs_diff(ca.forward(u), u) < 1e-8);
}

TEST_CASE("transformer encoder") {
  Rng rng(8);
  EncoderSpec spec{2, 2, 1, 16};
  TransformerEncoder<double> enc(8, spec, rng);
  auto x = randn<double>({2, 8, 4, 4}, rng);
  auto y = enc.forward(x);
  CHECK(y.shape() == x.shape());
  const auto& attn = enc.last_attention();
  CHECK(attn.shape() == Shape{4, 16, 16});
  for (int r = 0; r < 64; ++r) {
    double s = 0;
    for (int k = 0; k < 16; ++k) s += attn.data()[r * 16 + k];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(enc.forward(randn<double>({1, 8, 5, 4}, rng)), ShapeError);
  CHECK_THROWS_AS(TransformerEncoder<double>(10, EncoderSpec{4, 2, 1, 16}, rng), ConfigError);
  // Fewer tokens than capacity use a prefix of the positional table.
  CHECK(enc.forward(randn<double>({1, 8, 2, 2}, rng)).shape() == Shape{1, 8, 2, 2});

  // Zero value/output projections and MLP: the encoder reduces to the two
  // layer norms applied to x + pos.
  auto& layer = enc.layers()[0];
  for (auto* lin : {&layer.v, &layer.o, &layer.mlp1, &layer.mlp2}) {
    for (auto& v : lin->weight().data()) v = 0.0;
    if (lin->bias().defined())
      for (auto& v : lin->bias().data()) v = 0.0;
  }
  auto z = enc.forward(x);
  const auto pos = enc.positional().data();
  for (int n = 0; n < 2; ++n)
    for (int l = 0; l < 16; ++l) {
      double tok[8], mean = 0, var = 0;
      for (int c = 0; c < 8; ++c) {
        tok[c] = x.data()[(n * 8 + c) * 16 + l] + pos[l * 8 + c];
        mean += tok[c] / 8;
      }
      for (double t : tok) var += (t - mean) * (t - mean) / 8;
      for (int pass = 0; pass < 2; ++pass) {
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        double m2 = 0, v2 = 0;
        for (double& t : tok) {
          t = (t - mean) * inv;
          m2 += t / 8;
        }
        for (double t : tok) v2 += (t - m2) * (t - m2) / 8;
        mean = m2;
        var = v2;
      }
      for (int c = 0; c < 8; ++c) CHECK(z.data()[(n * 8 + c) * 16 + l] == doctest::Approx(tok[c]).epsilon(1e-12));
    }
}

TEST_CASE("sppf") {
  Rng rng(9);
  Sppf<double> sp(64, 32, 5, rng);
  CHECK(sp.forward(randn<double>({1, 64, 4, 4}, rng)).shape() == Shape{1, 32, 4, 4});
  Sppf<double> small(4, 6, 5, rng);
  small.eval();
  Tensor<double> c({1, 4, 6, 6});
  for (int ch = 0; ch < 4; ++ch)
    for (int i = 0; i < 36; ++i) c.data()[ch * 36 + i] = 0.3 * ch - 0.4;
  auto y = small.forward(c);
  for (int ch = 0; ch < 6; ++ch)
    for (int i = 1; i < 36; ++i) CHECK(y.data()[ch * 36 + i] == doctest::Approx(y.data()[ch * 36]).epsilon(1e-13));
  CHECK_THROWS_AS(Sppf<double>(4, 4, 4, rng), ConfigError);
}

TEST_CASE("parameter paths are unique") {
  Rng rng(10);
  FcBlock<double> fc({8, 8}, 16, 2, rng);
  auto tensors = named_tensors<double>(fc);
  std::set<std::string> seen;
  for (auto& t : tensors) CHECK(seen.insert(t.path).second);
  CHECK(seen.count("stages.1.rep.dense.conv.weight") == 1);
}
