#include "microdet/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "microdet/kv.hpp"
#include "microdet/rng.hpp"

namespace microdet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- RunLog

namespace {

std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

std::string RunLog::to_csv() const {
  std::string out = header() + "\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,", r.epoch, r.loss, r.box, r.obj, r.cls);
    out += buf;
    out += cell(r.map50) + "," + cell(r.precision) + "," + cell(r.recall) + ",";
    std::snprintf(buf, sizeof buf, "%.3f\n", r.seconds);
    out += buf;
  }
  return out;
}

RunLog RunLog::parse_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != header()) throw FormatError(source + ":1: expected header '" + header() + "'");
  RunLog log;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto comma = line.find(',', pos);
      f.push_back(line.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (f.size() != 9) throw FormatError(where + ": expected 9 columns, got " + std::to_string(f.size()));
    EpochRecord r;
    r.epoch = static_cast<int>(kv_int(f[0], where));
    if (r.epoch != static_cast<int>(log.rows.size()) + 1) throw FormatError(where + ": epochs must be consecutive from 1");
    r.loss = kv_double(f[1], where);
    r.box = kv_double(f[2], where);
    r.obj = kv_double(f[3], where);
    r.cls = kv_double(f[4], where);
    auto opt = [&](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return kv_double(s, where);
    };
    r.map50 = opt(f[5]);
    r.precision = opt(f[6]);
    r.recall = opt(f[7]);
    r.seconds = kv_double(f[8], where);
    log.rows.push_back(r);
  }
  return log;
}

// ---------------------------------------------------------------- schedule

double learning_rate(const TrainConfig& cfg, std::int64_t step, std::int64_t steps_per_epoch) {
  const auto total = static_cast<double>(cfg.epochs) * static_cast<double>(steps_per_epoch);
  const double warm = std::min(total, std::round(cfg.warmup_epochs * static_cast<double>(steps_per_epoch)));
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.lr * (s + 1.0) / warm;
  const double span = total - warm;
  const double t = span > 1.0 ? std::min(1.0, (s - warm) / (span - 1.0)) : 1.0;
  const double lo = cfg.lr * cfg.final_lr_ratio;
  return lo + (cfg.lr - lo) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<nn::NamedTensor<float>> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
  }
}

double Adam::step(double lr) {
  double sq = 0.0;
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  const double scale = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].tensor;
    if (!p.has_grad()) continue;
    auto w = p.data();
    const auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    const bool decay = cfg_.weight_decay > 0.0 && p.rank() >= 2;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * scale;
      const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double wi = w[i];
      if (decay) wi -= lr * cfg_.weight_decay * wi;
      wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.adam_eps);
      w[i] = static_cast<float>(wi);
    }
  }
  return norm;
}

std::vector<TdwTensor> Adam::state() const {
  std::vector<TdwTensor> out;
  out.push_back({"adam.t", 1, {1}, {static_cast<double>(t_)}});
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const Shape& s = params_[k].tensor.shape();
    out.push_back({params_[k].path + ".adam_m", 0, s, std::vector<double>(m_[k].begin(), m_[k].end())});
    out.push_back({params_[k].path + ".adam_v", 0, s, std::vector<double>(v_[k].begin(), v_[k].end())});
  }
  return out;
}

void Adam::load_state(const std::vector<TdwTensor>& tensors, const std::string& source) {
  std::map<std::string, const TdwTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  auto need = [&](const std::string& name, const Shape& shape) -> const TdwTensor& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(source + ": missing tensor '" + name + "'");
    if (it->second->shape != shape)
      throw FormatError(source + ": tensor '" + name + "' has shape " + shape_str(it->second->shape) + ", expected " +
                        shape_str(shape));
    const TdwTensor& t = *it->second;
    by_name.erase(it);
    return t;
  };
  const double t = need("adam.t", {1}).values[0];
  if (!(t >= 0) || t != std::floor(t)) throw FormatError(source + ": bad adam.t");
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const Shape& s = params_[k].tensor.shape();
    const auto& m = need(params_[k].path + ".adam_m", s).values;
    const auto& v = need(params_[k].path + ".adam_v", s).values;
    for (std::size_t i = 0; i < m.size(); ++i) {
      m_[k][i] = static_cast<float>(m[i]);
      v_[k][i] = static_cast<float>(v[i]);
    }
  }
  if (!by_name.empty()) throw FormatError(source + ": unknown tensor '" + by_name.begin()->first + "'");
  t_ = static_cast<std::int64_t>(t);
}

// ---------------------------------------------------------------- evaluation

Tensor<float> to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ConfigError("to_batch: no images");
  const int S = images[0]->width;
  Tensor<float> x({static_cast<std::int64_t>(images.size()), 3, S, S});
  auto out = x.data();
  const std::size_t n = images[0]->data.size();
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->width != S || images[b]->height != S) throw ShapeError("to_batch: images differ in size");
    std::copy(images[b]->data.begin(), images[b]->data.end(), out.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return x;
}

EvalReport evaluate_model(Detector<float>& model, const Dataset& data, const EvalConfig& cfg, int batch_size) {
  if (data.size() == 0) throw ConfigError("evaluate: split '" + to_string(data.split()) + "' is empty");
  if (data.img_size() != model.config().img_size)
    throw ConfigError("evaluate: dataset img_size " + std::to_string(data.img_size()) + " does not match model img_size " +
                      std::to_string(model.config().img_size));
  if (data.n_classes() != model.config().n_classes)
    throw ConfigError("evaluate: dataset has " + std::to_string(data.n_classes()) + " classes, model has " +
                      std::to_string(model.config().n_classes));
  const bool was_training = model.is_training();
  model.eval();
  NoGradGuard no_grad;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruth>> gts;
  DecodeOptions dopt;
  dopt.conf_thresh = cfg.sweep_conf;
  dopt.iou_thresh = cfg.nms_iou;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<Sample> samples;
    std::vector<const Image*> imgs;
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      samples.push_back(data.get(i));
    for (const auto& s : samples) {
      imgs.push_back(&s.image);
      gts.push_back(s.gts);
    }
    for (auto& d : decode(model.forward(to_batch(imgs)), model.config(), dopt)) dets.push_back(std::move(d));
  }
  model.train(was_training);
  return evaluate(dets, gts, model.config().n_classes, cfg.conf, cfg.match_iou);
}

// ---------------------------------------------------------------- training

namespace {

constexpr int kCheckpointVersion = 1;

// Independent random streams of one run.
enum Stream : std::uint64_t { kShuffle = 1, kAugment = 2 };

std::uint64_t stream_seed(std::uint64_t seed, Stream s, std::uint64_t epoch) {
  return Rng::derive(Rng::derive(seed, static_cast<std::uint64_t>(s)), epoch);
}

struct State {
  int epoch = 0;  // completed epochs
  std::int64_t step = 0;
  double best_map50 = -1.0;
  int best_epoch = 0;

  std::string to_text() const {
    std::ostringstream o;
    o << "checkpoint_version = " << kCheckpointVersion << "\n"
      << "epoch = " << epoch << "\n"
      << "step = " << step << "\n"
      << "best_map50 = " << format_double(best_map50) << "\n"
      << "best_epoch = " << best_epoch << "\n";
    return o.str();
  }

  static State parse(const std::string& text, const std::string& source) {
    State s;
    int seen = 0;
    for (const auto& e : parse_kv(text, source)) {
      const std::string where = source + ":" + std::to_string(e.line);
      if (e.key == "checkpoint_version") {
        if (kv_int(e.value, where) != kCheckpointVersion)
          throw FormatError(where + ": unsupported checkpoint_version " + e.value);
      } else if (e.key == "epoch") {
        s.epoch = static_cast<int>(kv_int(e.value, where));
      } else if (e.key == "step") {
        s.step = kv_int(e.value, where);
      } else if (e.key == "best_map50") {
        s.best_map50 = kv_double(e.value, where);
      } else if (e.key == "best_epoch") {
        s.best_epoch = static_cast<int>(kv_int(e.value, where));
      } else {
        throw FormatError(where + ": unknown key '" + e.key + "'");
      }
      ++seen;
    }
    if (seen != 5) throw FormatError(source + ": incomplete checkpoint state");
    if (s.epoch < 1 || s.step < 0) throw FormatError(source + ": invalid epoch/step");
    return s;
  }
};

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const fs::path& data_root, const TrainOptions& opt)
      : cfg_(cfg), opt_(opt), model_(cfg.model, cfg.train.seed) {
    cfg_.validate();
    train_ = Dataset::open(data_root, Split::kTrain);
    val_ = Dataset::open(data_root, Split::kVal);
    if (train_.img_size() != cfg_.model.img_size)
      throw ConfigError("data.img_size " + std::to_string(cfg_.model.img_size) + " does not match dataset img_size " +
                        std::to_string(train_.img_size()));
    if (train_.n_classes() != cfg_.model.n_classes)
      throw ConfigError("model.classes " + std::to_string(cfg_.model.n_classes) + " does not match dataset classes " +
                        std::to_string(train_.n_classes()));
    if (train_.size() == 0) throw ConfigError("training split is empty");
    samples_ = train_.load_all();
    anchors_ = cfg_.model.resolved_anchors();
    loss_cfg_ = cfg_.effective_loss();
    model_.train();
    adam_.emplace(nn::named_parameters(model_), cfg_.train);
  }

  void restore(const fs::path& ck) {
    load_weights_into(model_, ck / "weights.tdw");
    adam_->load_state(read_tdw(ck / "optim.tdw"), (ck / "optim.tdw").string());
    state_ = State::parse(read_file(ck / "state.txt"), (ck / "state.txt").string());
    log_ = RunLog::parse_csv(read_file(ck / "runlog.csv"), (ck / "runlog.csv").string());
    if (static_cast<int>(log_.rows.size()) != state_.epoch)
      throw FormatError((ck / "runlog.csv").string() + ": has " + std::to_string(log_.rows.size()) +
                        " rows, checkpoint is at epoch " + std::to_string(state_.epoch));
    if (state_.step != adam_->steps())
      throw FormatError(ck.string() + ": state step " + std::to_string(state_.step) + " does not match optimizer step " +
                        std::to_string(adam_->steps()));
    if (state_.epoch > cfg_.train.epochs)
      throw ConfigError("checkpoint is at epoch " + std::to_string(state_.epoch) + ", beyond train.epochs " +
                        std::to_string(cfg_.train.epochs));
  }

  TrainResult run() {
    std::error_code ec;
    fs::create_directories(opt_.out_dir / "checkpoints", ec);
    if (ec) throw IoError(opt_.out_dir.string() + ": cannot create run directory: " + ec.message());
    write_file(opt_.out_dir / "config.txt", cfg_.to_text());
    write_file(opt_.out_dir / "runlog.csv", log_.to_csv());

    const auto steps_per_epoch = static_cast<std::int64_t>((samples_.size() + cfg_.train.batch_size - 1) /
                                                           static_cast<std::size_t>(cfg_.train.batch_size));
    bool stopped = false;
    for (int epoch = state_.epoch + 1; epoch <= cfg_.train.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec = run_epoch(epoch, steps_per_epoch);
      if (cfg_.train.eval_every > 0 && (epoch % cfg_.train.eval_every == 0 || epoch == cfg_.train.epochs)) {
        const EvalReport r = evaluate_model(model_, val_, cfg_.eval, cfg_.train.eval_batch);
        rec.map50 = r.map50;
        rec.precision = r.precision;
        rec.recall = r.recall;
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log_.rows.push_back(rec);
      state_.epoch = epoch;
      const bool best = rec.map50 && *rec.map50 > state_.best_map50;
      if (best) {
        state_.best_map50 = *rec.map50;
        state_.best_epoch = epoch;
      }
      write_file(opt_.out_dir / "runlog.csv", log_.to_csv());
      save_checkpoint("last");
      if (best) save_checkpoint("best");
      if (epoch == cfg_.train.epochs) save_checkpoint("final");
      if (opt_.progress) {
        const std::string csv = log_.to_csv();
        const auto start = csv.rfind('\n', csv.size() - 2);
        *opt_.progress << csv.substr(start + 1) << std::flush;
      }
      if (opt_.stop_after > 0 && epoch >= opt_.stop_after && epoch < cfg_.train.epochs) {
        stopped = true;
        break;
      }
    }
    TrainResult res{std::move(model_), log_, state_.best_epoch, state_.best_map50, !stopped};
    return res;
  }

 private:
  EpochRecord run_epoch(int epoch, std::int64_t steps_per_epoch) {
    std::vector<std::size_t> order(samples_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(stream_seed(cfg_.train.seed, kShuffle, static_cast<std::uint64_t>(epoch)));
    shuffle.shuffle(std::span<std::size_t>(order));
    const std::uint64_t aug_seed = stream_seed(cfg_.train.seed, kAugment, static_cast<std::uint64_t>(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    const auto bs = static_cast<std::size_t>(cfg_.train.batch_size);
    std::int64_t step_in_epoch = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++step_in_epoch) {
      std::vector<Sample> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
        const Sample& s = samples_[order[i]];
        if (cfg_.train.augment) {
          Rng rng(Rng::derive(aug_seed, order[i]));
          batch.push_back(augment(s, cfg_.augment, rng));
        } else {
          batch.push_back(s);
        }
      }
      std::vector<const Image*> imgs;
      std::vector<std::vector<GroundTruth>> gts;
      for (const auto& s : batch) {
        imgs.push_back(&s.image);
        gts.push_back(s.gts);
      }
      const AssignedTargets targets = assign(gts, anchors_, cfg_.model.img_size);
      for (auto& p : nn::named_parameters(model_)) p.tensor.zero_grad();
      LossBreakdown bd;
      const auto raw = model_.forward(to_batch(imgs));
      const Tensor<float> loss = composite_loss<float>(raw, targets, anchors_, loss_cfg_, &bd);
      if (!std::isfinite(bd.total) || !std::isfinite(bd.box) || !std::isfinite(bd.obj) || !std::isfinite(bd.cls))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step_in_epoch + 1) + " (global step " + std::to_string(state_.step + 1) +
                            "); last good checkpoint: " + (opt_.out_dir / "checkpoints" / "last").string());
      backward(loss);
      adam_->step(learning_rate(cfg_.train, state_.step, steps_per_epoch));
      ++state_.step;
      rec.loss += bd.total;
      rec.box += bd.box;
      rec.obj += bd.obj;
      rec.cls += bd.cls;
    }
    const auto n = static_cast<double>(step_in_epoch);
    rec.loss /= n;
    rec.box /= n;
    rec.obj /= n;
    rec.cls /= n;
    return rec;
  }

  void save_checkpoint(const std::string& name) {
    const fs::path dir = opt_.out_dir / "checkpoints" / name;
    const fs::path tmp = opt_.out_dir / "checkpoints" / (name + ".tmp");
    std::error_code ec;
    fs::remove_all(tmp, ec);
    fs::create_directories(tmp, ec);
    if (ec) throw IoError(tmp.string() + ": cannot create checkpoint directory: " + ec.message());
    save_weights(model_, tmp / "weights.tdw");
    write_tdw(tmp / "optim.tdw", adam_->state());
    write_file(tmp / "state.txt", state_.to_text());
    write_file(tmp / "config.txt", cfg_.to_text());
    write_file(tmp / "runlog.csv", log_.to_csv());
    fs::remove_all(dir, ec);
    fs::rename(tmp, dir, ec);
    if (ec) throw IoError(dir.string() + ": cannot finalize checkpoint: " + ec.message());
  }

  RunConfig cfg_;
  TrainOptions opt_;
  Detector<float> model_;
  Dataset train_, val_;
  std::vector<Sample> samples_;
  AnchorSet anchors_;
  LossConfig loss_cfg_;
  std::optional<Adam> adam_;
  State state_;
  RunLog log_;
};

}  // namespace

TrainResult train(const RunConfig& cfg, const fs::path& data_root, const TrainOptions& opt) {
  Trainer t(cfg, data_root, opt);
  return t.run();
}

RunConfig config_for_weights(const fs::path& weights) {
  const fs::path cfg = weights.parent_path() / "config.txt";
  std::error_code ec;
  if (!fs::exists(cfg, ec)) throw IoError(cfg.string() + ": model configuration not found next to " + weights.string());
  return RunConfig::load(cfg);
}

TrainResult resume(const fs::path& checkpoint, const RunConfig& cfg, const fs::path& data_root, const TrainOptions& opt) {
  std::error_code ec;
  if (!fs::is_directory(checkpoint, ec)) throw IoError(checkpoint.string() + ": checkpoint directory not found");
  const RunConfig saved = RunConfig::load(checkpoint / "config.txt");
  std::istringstream a(saved.to_text()), b(cfg.to_text());
  std::string la, lb;
  while (std::getline(a, la) && std::getline(b, lb)) {
    if (la == lb || la.rfind("train.epochs ", 0) == 0) continue;
    throw ConfigError("resume: configuration differs from checkpoint: '" + lb + "' vs checkpoint '" + la + "'");
  }
  Trainer t(cfg, data_root, opt);
  t.restore(checkpoint);
  return t.run();
}

}  // namespace microdet
