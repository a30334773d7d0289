#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "microdet/detector.hpp"
#include "test_util.hpp"

using namespace microdet;
using microdet::testing::TempDir;
namespace fs = std::filesystem;

namespace {

Tensor<float> random_images(int n, int size, Rng& rng) {
  Tensor<float> x({n, 3, size, size});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  return x;
}

ModelConfig config_for(const std::string& bits) {
  ModelConfig c;
  c.set_toggles(bits);
  return c;
}

std::vector<std::string> all_toggles() {
  std::vector<std::string> out;
  for (int i = 0; i < 16; ++i) {
    std::string s;
    for (int b = 3; b >= 0; --b) s += (i >> b) & 1 ? '1' : '0';
    out.push_back(s);
  }
  return out;
}

// Runs a few training-mode batches so every BN holds non-trivial statistics.
void warm_batch_norm(Detector<float>& m, Rng& rng) {
  NoGradGuard ng;
  m.train();
  for (int i = 0; i < 3; ++i) m.forward(random_images(2, m.config().img_size, rng));
  m.eval();
}

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  float d = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("model config") {
  ModelConfig c;
  CHECK(c.toggles() == "0000");
  c.set_toggles("1010");
  CHECK(c.ghost);
  CHECK_FALSE(c.repgfpn);
  CHECK(c.attention);
  CHECK(c.toggles() == "1010");
  CHECK_THROWS_AS(c.set_toggles("10a0"), ConfigError);
  c.img_size = 48;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.img_size = 64;
  c.width_scale = 0.5;
  CHECK(c.widths() == std::array<std::int64_t, 4>{8, 16, 32, 64});
  c.width_scale = 0.3;
  CHECK(c.widths()[0] == 8);
  AnchorSet bad = AnchorSet::defaults(64);
  bad.wh[0][0].w = -1;
  c.anchors = bad;
  CHECK_THROWS_AS(Detector<float>(c, 0), ConfigError);
}

TEST_CASE("forward shapes and determinism") {
  Rng rng(1);
  ModelConfig cfg;
  cfg.n_classes = 3;
  Detector<float> m(cfg, 7);
  auto x = random_images(1, 64, rng);
  auto out = m.forward(x);
  const std::int64_t ch = 3 * (5 + 3);
  CHECK(out[0].shape() == Shape{1, ch, 8, 8});
  CHECK(out[1].shape() == Shape{1, ch, 4, 4});
  CHECK(out[2].shape() == Shape{1, ch, 2, 2});
  CHECK_THROWS_AS(m.forward(random_images(1, 32, rng)), ShapeError);

  m.eval();
  auto a = m.forward(x), b = m.forward(x);
  for (int s = 0; s < 3; ++s) CHECK(std::memcmp(a[s].data().data(), b[s].data().data(), a[s].data().size_bytes()) == 0);

  // Same seed and same history (one training-mode forward) give the same model.
  Detector<float> same(cfg, 7);
  same.forward(x);
  same.eval();
  auto c = same.forward(x);
  CHECK(std::memcmp(a[0].data().data(), c[0].data().data(), a[0].data().size_bytes()) == 0);
}

TEST_CASE("parameter naming contract") {
  Detector<float> base(config_for("0000"), 0);
  std::set<std::string> paths;
  for (auto& nt : nn::named_tensors<float>(base)) {
    CHECK(paths.insert(nt.path).second);
    std::stringstream ss(nt.path);
    std::string seg;
    while (std::getline(ss, seg, '.')) {
      CHECK(seg.find("ghost") == std::string::npos);
      CHECK(seg.rfind("fc", 0) != 0);
      CHECK(seg.rfind("ca", 0) != 0);
      CHECK(seg.find("xformer") == std::string::npos);
    }
  }
  Detector<float> full(config_for("1111"), 0);
  bool ghost = false, fc = false, ca = false, xf = false;
  for (auto& nt : nn::named_tensors<float>(full)) {
    ghost = ghost || nt.path.find(".ghost_") != std::string::npos;
    fc = fc || nt.path.find(".fc_") != std::string::npos;
    ca = ca || nt.path.find(".ca_") != std::string::npos;
    xf = xf || nt.path.starts_with("xformer_");
  }
  CHECK((ghost && fc && ca && xf));
  CHECK(full.parameter_count() > 0);
  CHECK(base.parameter_count() != full.parameter_count());
}

TEST_CASE("ghost backbone uses fewer multiply-accumulates") {
  Rng rng(2);
  auto x = random_images(1, 64, rng);
  for (const char* rest : {"000", "110"}) {
    Detector<float> plain(config_for(std::string("0") + rest), 3), ghost(config_for(std::string("1") + rest), 3);
    NoGradGuard ng;
    plain.forward(x);
    ghost.forward(x);
    CHECK(ghost.last_backbone_macs() < plain.last_backbone_macs());
    CHECK(plain.last_backbone_macs() < plain.last_total_macs());
  }
}

TEST_CASE("all sixteen configurations build, forward and backward without dead parameters") {
  Rng rng(3);
  const auto anchors = AnchorSet::defaults(64);
  for (const auto& bits : all_toggles()) {
    CAPTURE(bits);
    ModelConfig cfg = config_for(bits);
    Detector<float> m(cfg, 11);
    auto raw = m.forward(random_images(2, 64, rng));
    std::vector<std::vector<GroundTruth>> gts{{{{20, 24, 6, 5}, 0}, {{45, 12, 12, 20}, 1}, {{33, 40, 30, 26}, 0}},
                                              {{{10, 50, 4, 4}, 1}, {{52, 30, 18, 9}, 0}}};
    LossConfig lc;
    lc.n_classes = cfg.n_classes;
    lc.nwd = cfg.nwd;
    auto loss = composite_loss<float>(raw, assign(gts, anchors, 64), anchors, lc);
    REQUIRE(std::isfinite(loss.item()));
    backward(loss);
    for (auto& p : nn::named_parameters<float>(m)) {
      CAPTURE(p.path);
      bool nonzero = false;
      if (p.tensor.has_grad())
        for (float g : p.tensor.grad()) nonzero = nonzero || (g != 0.0f && std::isfinite(g));
      CHECK(nonzero);
    }
  }
}

TEST_CASE("reparameterize") {
  Rng rng(4);
  Detector<float> base(config_for("0000"), 1);
  CHECK_THROWS_AS(base.reparameterize(), StateError);
  base.eval();
  CHECK(base.reparameterize() == 0);
  CHECK_THROWS_AS(base.reparameterize(), StateError);

  Detector<float> rep(config_for("0100"), 1);
  warm_batch_norm(rep, rng);
  std::vector<Tensor<float>> inputs;
  std::vector<std::array<Tensor<float>, 3>> before;
  NoGradGuard ng;
  for (int i = 0; i < 10; ++i) {
    inputs.push_back(random_images(1, 64, rng));
    before.push_back(rep.forward(inputs.back()));
  }
  const auto macs_before = rep.last_total_macs();
  CHECK(rep.reparameterize() == 8);  // 4 fusion nodes x depth 2
  CHECK(rep.deployed());
  float worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto after = rep.forward(inputs[i]);
    for (int s = 0; s < 3; ++s) worst = std::max(worst, max_abs_diff(before[i][s], after[s]));
  }
  CHECK(worst < 1e-4f);
  CHECK(rep.last_total_macs() < macs_before);
  CHECK_THROWS_AS(rep.reparameterize(), StateError);
}

TEST_CASE("decode") {
  ModelConfig cfg;
  cfg.n_classes = 2;
  const auto anchors = cfg.resolved_anchors();
  std::array<Tensor<double>, 3> raw;
  for (int s = 0; s < 3; ++s) {
    const int g = 64 / kStrides[static_cast<std::size_t>(s)];
    raw[static_cast<std::size_t>(s)] = Tensor<double>({1, 21, g, g});
    auto d = raw[static_cast<std::size_t>(s)].data();
    for (int a = 0; a < 3; ++a)
      for (int i = 0; i < g * g; ++i) d[static_cast<std::size_t>((a * 7 + 4) * g * g + i)] = -20.0;
  }
  CHECK(decode(raw, cfg)[0].empty());

  // One confident slot with zero offsets at P3 cell (gx=3, gy=5), anchor 1.
  auto d = raw[0].data();
  const int g = 8;
  d[static_cast<std::size_t>((1 * 7 + 4) * g * g + 5 * g + 3)] = 20.0;
  d[static_cast<std::size_t>((1 * 7 + 6) * g * g + 5 * g + 3)] = 20.0;
  auto dets = decode(raw, cfg)[0];
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].box.cx == doctest::Approx(3.5 * 8));
  CHECK(dets[0].box.cy == doctest::Approx(5.5 * 8));
  CHECK(dets[0].box.w == doctest::Approx(anchors.wh[0][1].w));
  CHECK(dets[0].box.h == doctest::Approx(anchors.wh[0][1].h));
  CHECK(dets[0].class_id == 1);
  CHECK(dets[0].confidence > 0.99);
  CHECK(dets[0].confidence <= 1.0);

  // Boxes are clipped to the image.
  d[static_cast<std::size_t>((1 * 7 + 4) * g * g)] = 20.0;
  d[static_cast<std::size_t>((1 * 7 + 2) * g * g)] = 3.0;
  const auto clipped = decode(raw, cfg);
  for (const auto& det : clipped[0]) {
    CHECK(det.box.x1() >= 0.0);
    CHECK(det.box.y1() >= 0.0);
    CHECK(det.box.x2() <= 64.0);
    CHECK(det.box.y2() <= 64.0);
  }
  CHECK_THROWS_AS(decode(raw, cfg, {1.5, 0.45, 300}), ConfigError);
}

TEST_CASE("nms") {
  const BBox b{20, 20, 8, 8};
  auto kept = nms({{b, 0, 0.8}, {b, 0, 0.9}}, 0.45);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].confidence == 0.9);
  CHECK(nms({{b, 0, 0.8}, {b, 1, 0.9}}, 0.45).size() == 2);  // per class
  CHECK(nms({{b, 0, 0.8}, {{40, 40, 8, 8}, 0, 0.9}}, 0.45).size() == 2);
  std::vector<Detection> many;
  for (int i = 0; i < 400; ++i) many.push_back({{static_cast<double>(i) * 10, 5, 4, 4}, 0, 0.5});
  CHECK(nms(many, 0.45, 300).size() == 300);
}

TEST_CASE("weights round trip and rejection") {
  TempDir tmp;
  Rng rng(5);
  const fs::path file = tmp.path / "w.tdw";
  ModelConfig cfg = config_for("1111");
  Detector<float> m(cfg, 9);
  warm_batch_norm(m, rng);
  save_weights(m, file);
  auto loaded = load_weights<float>(file, cfg);
  loaded.eval();
  auto x = random_images(2, 64, rng);
  NoGradGuard ng;
  auto a = m.forward(x), b = loaded.forward(x);
  for (int s = 0; s < 3; ++s) CHECK(std::memcmp(a[s].data().data(), b[s].data().data(), a[s].data().size_bytes()) == 0);

  // Re-saving gives identical bytes.
  save_weights(loaded, tmp.path / "w2.tdw");
  CHECK(read_bytes(file) == read_bytes(tmp.path / "w2.tdw"));

  // Layout: magic, version, count, first record header.
  const auto bytes = read_bytes(file);
  CHECK(std::string(bytes.data(), 4) == "TDW1");
  CHECK(bytes[4] == 1);
  auto tensors = read_tdw(file);
  CHECK(tensors.size() == nn::named_tensors<float>(m).size());
  CHECK(tensors[0].name == "backbone.stem.conv.weight");
  CHECK(tensors[0].dtype == 0);

  auto expect_error = [&](const std::vector<char>& data, const std::string& needle) {
    write_bytes(tmp.path / "bad.tdw", data);
    try {
      load_weights<float>(tmp.path / "bad.tdw", cfg);
      FAIL("accepted a malformed file (" << needle << ")");
    } catch (const FormatError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
    }
  };
  auto bad = bytes;
  bad[0] = 'X';
  expect_error(bad, "bad magic");
  bad = bytes;
  bad[4] = 2;
  expect_error(bad, "unsupported version");
  bad = std::vector<char>(bytes.begin(), bytes.end() - 3);
  expect_error(bad, "truncated");
  bad = bytes;
  bad.push_back(0);
  expect_error(bad, "trailing");
  bad = bytes;
  bad[12 + 2 + static_cast<std::size_t>(tensors[0].name.size())] = 7;
  expect_error(bad, "unknown dtype");

  auto extra = tensors;
  extra.push_back({"neck.bogus.weight", 0, {2}, {1.0, 2.0}});
  write_tdw(tmp.path / "extra.tdw", extra);
  CHECK_THROWS_WITH_AS(load_weights<float>(tmp.path / "extra.tdw", cfg), doctest::Contains("neck.bogus.weight"),
                       FormatError);
  auto missing = tensors;
  missing.erase(missing.begin() + 3);
  write_tdw(tmp.path / "missing.tdw", missing);
  CHECK_THROWS_WITH_AS(load_weights<float>(tmp.path / "missing.tdw", cfg), doctest::Contains(tensors[3].name.c_str()),
                       FormatError);
  // A different architecture is rejected by name.
  CHECK_THROWS_AS(load_weights<float>(file, config_for("0000")), FormatError);
  ModelConfig wider = cfg;
  wider.n_classes = 5;
  CHECK_THROWS_WITH_AS(load_weights<float>(file, wider), doctest::Contains("head.p3"), FormatError);
  CHECK_THROWS_AS(load_weights<float>(tmp.path / "absent.tdw", cfg), FormatError);
}
