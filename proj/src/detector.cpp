#include "microdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ops_internal.hpp"

namespace microdet {

using nn::C3;
using nn::Cbs;
using nn::CoordAttention;
using nn::FcBlock;
using nn::Layer;
using nn::Sppf;
using nn::TransformerEncoder;

// ---------------------------------------------------------------- ModelConfig

void ModelConfig::validate() const {
  if (img_size < 32 || img_size % 32 != 0)
    throw ConfigError("img_size must be a positive multiple of 32, got " + std::to_string(img_size));
  if (!(width_scale > 0) || !(depth_scale > 0)) throw ConfigError("width_scale and depth_scale must be positive");
  if (n_classes < 1) throw ConfigError("n_classes must be >= 1, got " + std::to_string(n_classes));
  resolved_anchors().validate();
}

std::string ModelConfig::toggles() const {
  std::string s;
  for (bool b : {ghost, repgfpn, attention, nwd}) s += b ? '1' : '0';
  return s;
}

void ModelConfig::set_toggles(const std::string& bits) {
  if (bits.size() != 4 || bits.find_first_not_of("01") != std::string::npos)
    throw ConfigError("toggle string must be four 0/1 digits, got '" + bits + "'");
  ghost = bits[0] == '1';
  repgfpn = bits[1] == '1';
  attention = bits[2] == '1';
  nwd = bits[3] == '1';
}

std::array<std::int64_t, 4> ModelConfig::widths() const {
  std::array<std::int64_t, 4> w{16, 32, 64, 128};
  for (auto& c : w) {
    const double scaled = static_cast<double>(c) * width_scale;
    c = std::max<std::int64_t>(8, static_cast<std::int64_t>(std::ceil(scaled / 8.0)) * 8);
  }
  return w;
}

int ModelConfig::depth() const { return std::max(1, static_cast<int>(std::lround(depth_scale))); }

// ---------------------------------------------------------------- Detector

template <typename T>
struct Detector<T>::Impl {
  using LayerPtr = std::unique_ptr<Layer<T>>;

  // Backbone.
  Cbs<T> stem;
  std::array<LayerPtr, 4> down;
  std::array<LayerPtr, 4> stage;
  std::unique_ptr<Sppf<T>> sppf;
  std::array<std::unique_ptr<CoordAttention<T>>, 3> ca;

  // PAN neck.
  std::unique_ptr<Cbs<T>> lat5, lat4, pan_down3, pan_down4;
  std::unique_ptr<C3<T>> top4, out3, out4, out5;

  // RepGFPN neck.
  std::unique_ptr<Cbs<T>> down_p3, down_t3, down_b4;
  std::unique_ptr<FcBlock<T>> fc_t4, fc_t3, fc_b4, fc_b5;

  std::array<std::unique_ptr<TransformerEncoder<T>>, 3> xformer;
  std::array<nn::Conv2d<T>, 3> head;
};

namespace {

template <typename T>
std::unique_ptr<Layer<T>> make_down(bool ghost, std::int64_t c_in, std::int64_t c_out, Rng& rng) {
  if (ghost) return std::make_unique<nn::GhostConv<T>>(nn::GhostSpec{c_in, c_out, 2, 3, 3, 2}, rng);
  return std::make_unique<Cbs<T>>(c_in, c_out, 3, 2, rng);
}

template <typename T>
void init_head_bias(nn::Conv2d<T>& head, const ModelConfig& cfg, int stride) {
  const int no = cfg.outputs_per_anchor();
  auto b = head.bias().data();
  const double cells = static_cast<double>(cfg.img_size / stride) * (cfg.img_size / stride);
  for (int a = 0; a < kAnchorsPerScale; ++a) {
    b[static_cast<std::size_t>(a * no + 4)] = static_cast<T>(std::log(8.0 / cells));
    for (int c = 0; c < cfg.n_classes; ++c)
      b[static_cast<std::size_t>(a * no + 5 + c)] = static_cast<T>(std::log(0.6 / (cfg.n_classes - 0.99)));
  }
}

}  // namespace

template <typename T>
Detector<T>::Detector(const ModelConfig& config, std::uint64_t seed) : config_(config), impl_(std::make_unique<Impl>()) {
  config_.validate();
  Rng rng(seed);
  Impl& m = *impl_;
  const auto w = config_.widths();
  const int n = config_.depth();
  const bool g = config_.ghost;
  const std::int64_t c3 = w[2], c4 = w[3], c5 = w[3];

  m.stem = Cbs<T>(3, w[0], 3, 2, rng);
  const std::array<std::int64_t, 5> chans{w[0], w[1], w[2], w[3], w[3]};
  for (std::size_t i = 0; i < 4; ++i) {
    m.down[i] = make_down<T>(g, chans[i], chans[i + 1], rng);
    m.stage[i] = std::make_unique<C3<T>>(chans[i + 1], chans[i + 1], n, true, g, rng);
  }
  m.sppf = std::make_unique<Sppf<T>>(c5, c5, 5, rng);
  if (config_.attention) {
    m.ca[0] = std::make_unique<CoordAttention<T>>(c3, 16, rng);
    m.ca[1] = std::make_unique<CoordAttention<T>>(c4, 16, rng);
    m.ca[2] = std::make_unique<CoordAttention<T>>(c5, 16, rng);
  }

  const std::array<std::int64_t, 3> head_c{w[1], w[2], w[3]};
  if (config_.repgfpn) {
    m.down_p3 = std::make_unique<Cbs<T>>(c3, c3, 3, 2, rng);
    m.fc_t4 = std::make_unique<FcBlock<T>>(std::vector<std::int64_t>{c4, c5, c3}, head_c[1], 2, rng);
    m.fc_t3 = std::make_unique<FcBlock<T>>(std::vector<std::int64_t>{c3, head_c[1]}, head_c[0], 2, rng);
    m.down_t3 = std::make_unique<Cbs<T>>(head_c[0], head_c[0], 3, 2, rng);
    m.fc_b4 = std::make_unique<FcBlock<T>>(std::vector<std::int64_t>{head_c[1], head_c[0], c4}, head_c[1], 2, rng);
    m.down_b4 = std::make_unique<Cbs<T>>(head_c[1], head_c[1], 3, 2, rng);
    m.fc_b5 = std::make_unique<FcBlock<T>>(std::vector<std::int64_t>{c5, head_c[1]}, head_c[2], 2, rng);
  } else {
    m.lat5 = std::make_unique<Cbs<T>>(c5, w[2], 1, 1, rng);
    m.top4 = std::make_unique<C3<T>>(w[2] + c4, w[2], n, false, false, rng);
    m.lat4 = std::make_unique<Cbs<T>>(w[2], w[1], 1, 1, rng);
    m.out3 = std::make_unique<C3<T>>(w[1] + c3, head_c[0], n, false, false, rng);
    m.pan_down3 = std::make_unique<Cbs<T>>(head_c[0], head_c[0], 3, 2, rng);
    m.out4 = std::make_unique<C3<T>>(head_c[0] + w[1], head_c[1], n, false, false, rng);
    m.pan_down4 = std::make_unique<Cbs<T>>(head_c[1], head_c[1], 3, 2, rng);
    m.out5 = std::make_unique<C3<T>>(head_c[1] + w[2], head_c[2], n, false, false, rng);
  }

  if (config_.attention) {
    for (std::size_t s = 0; s < 3; ++s) {
      nn::EncoderSpec spec;
      const std::int64_t grid = config_.img_size / kStrides[s];
      spec.max_tokens = grid * grid;
      m.xformer[s] = std::make_unique<TransformerEncoder<T>>(head_c[s], spec, rng);
    }
  }
  const std::int64_t out_c = kAnchorsPerScale * config_.outputs_per_anchor();
  for (std::size_t s = 0; s < 3; ++s) {
    m.head[s] = nn::Conv2d<T>(head_c[s], out_c, 1, 1, 1, true, rng);
    init_head_bias(m.head[s], config_, kStrides[s]);
  }
}

template <typename T>
Detector<T>::~Detector() = default;
template <typename T>
Detector<T>::Detector(Detector&&) noexcept = default;
template <typename T>
Detector<T>& Detector<T>::operator=(Detector&&) noexcept = default;

template <typename T>
std::array<Tensor<T>, kNumScales> Detector<T>::forward(const Tensor<T>& images) {
  const int s = config_.img_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s)
    throw ShapeError("detector expects images (N, 3, " + std::to_string(s) + ", " + std::to_string(s) + "), got " +
                     shape_str(images.shape()));
  Impl& m = *impl_;
  MacCounter total;
  Tensor<T> p3, p4, p5;
  {
    MacCounter backbone;
    Tensor<T> x = m.stem.forward(images);
    x = m.stage[0]->forward(m.down[0]->forward(x));
    p3 = m.stage[1]->forward(m.down[1]->forward(x));
    p4 = m.stage[2]->forward(m.down[2]->forward(p3));
    p5 = m.sppf->forward(m.stage[3]->forward(m.down[3]->forward(p4)));
    if (config_.attention) {
      p3 = m.ca[0]->forward(p3);
      p4 = m.ca[1]->forward(p4);
      p5 = m.ca[2]->forward(p5);
    }
    backbone_macs_ = backbone.total();
  }

  std::array<Tensor<T>, 3> feats;
  if (config_.repgfpn) {
    Tensor<T> t4 = m.fc_t4->forward({p4, upsample_nearest(p5, 2), m.down_p3->forward(p3)});
    Tensor<T> t3 = m.fc_t3->forward({p3, upsample_nearest(t4, 2)});
    Tensor<T> b4 = m.fc_b4->forward({t4, m.down_t3->forward(t3), p4});
    Tensor<T> b5 = m.fc_b5->forward({p5, m.down_b4->forward(b4)});
    feats = {t3, b4, b5};
  } else {
    Tensor<T> l5 = m.lat5->forward(p5);
    Tensor<T> t4 = m.top4->forward(concat<T>({upsample_nearest(l5, 2), p4}, 1));
    Tensor<T> l4 = m.lat4->forward(t4);
    Tensor<T> o3 = m.out3->forward(concat<T>({upsample_nearest(l4, 2), p3}, 1));
    Tensor<T> o4 = m.out4->forward(concat<T>({m.pan_down3->forward(o3), l4}, 1));
    Tensor<T> o5 = m.out5->forward(concat<T>({m.pan_down4->forward(o4), l5}, 1));
    feats = {o3, o4, o5};
  }

  std::array<Tensor<T>, kNumScales> out;
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor<T> f = config_.attention ? m.xformer[i]->forward(feats[i]) : feats[i];
    out[i] = m.head[i].forward(f);
  }
  total_macs_ = total.total();
  return out;
}

template <typename T>
void Detector<T>::visit(nn::ModuleVisitor<T>& v) {
  Impl& m = *impl_;
  const std::string g = config_.ghost ? "ghost_" : "";
  v.child("backbone.stem", m.stem);
  for (std::size_t i = 0; i < 4; ++i) {
    v.child("backbone." + g + "down" + std::to_string(i + 1), *m.down[i]);
    v.child("backbone." + g + "stage" + std::to_string(i + 1), *m.stage[i]);
  }
  v.child("backbone.sppf", *m.sppf);
  if (config_.attention)
    for (std::size_t i = 0; i < 3; ++i) v.child("backbone.ca_p" + std::to_string(i + 3), *m.ca[i]);
  if (config_.repgfpn) {
    v.child("neck.down_p3", *m.down_p3);
    v.child("neck.fc_t4", *m.fc_t4);
    v.child("neck.fc_t3", *m.fc_t3);
    v.child("neck.down_t3", *m.down_t3);
    v.child("neck.fc_b4", *m.fc_b4);
    v.child("neck.down_b4", *m.down_b4);
    v.child("neck.fc_b5", *m.fc_b5);
  } else {
    v.child("neck.lat5", *m.lat5);
    v.child("neck.top4", *m.top4);
    v.child("neck.lat4", *m.lat4);
    v.child("neck.out3", *m.out3);
    v.child("neck.down3", *m.pan_down3);
    v.child("neck.out4", *m.out4);
    v.child("neck.down4", *m.pan_down4);
    v.child("neck.out5", *m.out5);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (config_.attention) v.child("xformer_p" + std::to_string(i + 3), *m.xformer[i]);
    v.child("head.p" + std::to_string(i + 3), m.head[i]);
  }
}

template <typename T>
std::int64_t Detector<T>::parameter_count() {
  return nn::parameter_count<T>(*this);
}

template <typename T>
int Detector<T>::reparameterize() {
  if (this->is_training()) throw StateError("reparameterize: model must be in eval mode");
  if (deployed_) throw StateError("reparameterize: model is already deployed");
  int fused = 0;
  nn::for_each_module<T>(*this, [&](const std::string&, nn::Module<T>& mod) {
    if (auto* rep = dynamic_cast<nn::RepConvN<T>*>(&mod)) {
      rep->fuse();
      ++fused;
    }
  });
  deployed_ = true;
  return fused;
}

// ---------------------------------------------------------------- decode / NMS

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, std::size_t max_detections) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept)
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (suppressed) continue;
    kept.push_back(d);
    if (kept.size() >= max_detections) break;
  }
  return kept;
}

template <typename T>
std::vector<std::vector<Detection>> decode(const std::array<Tensor<T>, kNumScales>& raw, const ModelConfig& config,
                                           const DecodeOptions& opt) {
  if (!(opt.conf_thresh >= 0 && opt.conf_thresh <= 1) || !(opt.iou_thresh >= 0 && opt.iou_thresh <= 1))
    throw ConfigError("decode thresholds must lie in [0, 1]");
  const AnchorSet anchors = config.resolved_anchors();
  const int no = config.outputs_per_anchor();
  const std::int64_t batch = raw[0].dim(0);
  const double size = config.img_size;
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    std::vector<Detection> cand;
    for (std::size_t s = 0; s < kNumScales; ++s) {
      const auto& r = raw[s];
      if (r.dim(1) != kAnchorsPerScale * no)
        throw ShapeError("decode: scale " + std::to_string(s) + " has " + std::to_string(r.dim(1)) +
                         " channels, expected " + std::to_string(kAnchorsPerScale * no));
      const std::int64_t h = r.dim(2), w = r.dim(3), plane = h * w;
      const auto data = r.data();
      for (int a = 0; a < kAnchorsPerScale; ++a) {
        const std::int64_t base = (b * r.dim(1) + a * no) * plane;
        for (std::int64_t gy = 0; gy < h; ++gy)
          for (std::int64_t gx = 0; gx < w; ++gx) {
            const std::int64_t p = base + gy * w + gx;
            const double obj = sigmoid(static_cast<double>(data[p + 4 * plane]));
            if (!(obj > opt.conf_thresh)) continue;  // conf <= obj, cannot pass
            int best = 0;
            double best_p = -1.0;
            for (int c = 0; c < config.n_classes; ++c) {
              const double pc = sigmoid(static_cast<double>(data[p + (5 + c) * plane]));
              if (pc > best_p) {
                best_p = pc;
                best = c;
              }
            }
            const double conf = obj * best_p;
            if (!(conf > opt.conf_thresh)) continue;
            const BBox box = decode_cell<double>(data[p], data[p + plane], data[p + 2 * plane], data[p + 3 * plane],
                                                 static_cast<int>(gx), static_cast<int>(gy), kStrides[s],
                                                 anchors.wh[s][static_cast<std::size_t>(a)]);
            const double x1 = std::clamp(box.x1(), 0.0, size), x2 = std::clamp(box.x2(), 0.0, size);
            const double y1 = std::clamp(box.y1(), 0.0, size), y2 = std::clamp(box.y2(), 0.0, size);
            if (!(x2 > x1) || !(y2 > y1)) continue;
            cand.push_back({{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1}, best, conf});
          }
      }
    }
    out[static_cast<std::size_t>(b)] = nms(std::move(cand), opt.iou_thresh, opt.max_detections);
  }
  return out;
}

template class Detector<float>;
template class Detector<double>;
template std::vector<std::vector<Detection>> decode(const std::array<Tensor<float>, kNumScales>&, const ModelConfig&,
                                                    const DecodeOptions&);
template std::vector<std::vector<Detection>> decode(const std::array<Tensor<double>, kNumScales>&, const ModelConfig&,
                                                    const DecodeOptions&);

}  // namespace microdet
