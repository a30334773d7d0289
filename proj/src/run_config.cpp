#include "microdet/run_config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "microdet/image.hpp"
#include "microdet/kv.hpp"

namespace microdet {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1, got " + std::to_string(batch_size));
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(warmup_epochs >= 0.0)) throw ConfigError("train.warmup_epochs must be >= 0");
  if (!(final_lr_ratio > 0.0 && final_lr_ratio <= 1.0)) throw ConfigError("train.final_lr_ratio must be in (0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta1/beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (eval_batch < 1) throw ConfigError("train.eval_batch must be >= 1");
}

namespace {

struct Entry {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

std::string b2s(bool b) { return b ? "true" : "false"; }

#define MD_BOOL(KEY, FIELD)                                                                          \
  Entry {                                                                                            \
    KEY, [](const RunConfig& c) { return b2s(c.FIELD); },                                            \
        [](RunConfig& c, const std::string& v, const std::string& w) { c.FIELD = kv_bool(v, w); }    \
  }
#define MD_INT(KEY, FIELD)                                                                                \
  Entry {                                                                                                 \
    KEY, [](const RunConfig& c) { return std::to_string(c.FIELD); },                                      \
        [](RunConfig& c, const std::string& v, const std::string& w) {                                    \
          c.FIELD = static_cast<decltype(c.FIELD)>(kv_int(v, w));                                         \
        }                                                                                                 \
  }
#define MD_DOUBLE(KEY, FIELD)                                                                       \
  Entry {                                                                                           \
    KEY, [](const RunConfig& c) { return format_double(c.FIELD); },                                 \
        [](RunConfig& c, const std::string& v, const std::string& w) { c.FIELD = kv_double(v, w); } \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table{
      MD_BOOL("model.ghost", model.ghost),
      MD_BOOL("model.repgfpn", model.repgfpn),
      MD_BOOL("model.attention", model.attention),
      MD_BOOL("model.nwd", model.nwd),
      MD_DOUBLE("model.width_scale", model.width_scale),
      MD_DOUBLE("model.depth_scale", model.depth_scale),
      MD_INT("model.classes", model.n_classes),
      MD_INT("data.img_size", model.img_size),
      MD_DOUBLE("data.hflip", augment.hflip_p),
      MD_BOOL("data.crop", augment.crop),
      MD_DOUBLE("data.crop_min", augment.crop_min),
      MD_DOUBLE("data.crop_max", augment.crop_max),
      MD_DOUBLE("data.brightness", augment.brightness),
      MD_DOUBLE("data.contrast_min", augment.contrast_min),
      MD_DOUBLE("data.contrast_max", augment.contrast_max),
      MD_INT("train.epochs", train.epochs),
      MD_INT("train.batch_size", train.batch_size),
      MD_DOUBLE("train.lr", train.lr),
      MD_DOUBLE("train.warmup_epochs", train.warmup_epochs),
      MD_DOUBLE("train.final_lr_ratio", train.final_lr_ratio),
      MD_DOUBLE("train.beta1", train.beta1),
      MD_DOUBLE("train.beta2", train.beta2),
      MD_DOUBLE("train.adam_eps", train.adam_eps),
      MD_DOUBLE("train.weight_decay", train.weight_decay),
      MD_DOUBLE("train.grad_clip", train.grad_clip),
      Entry{"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
            [](RunConfig& c, const std::string& v, const std::string& w) {
              std::uint64_t s = 0;
              const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
              if (ec != std::errc() || p != v.data() + v.size())
                throw ConfigError(w + ": expected a non-negative integer seed, got '" + v + "'");
              c.train.seed = s;
            }},
      MD_INT("train.eval_every", train.eval_every),
      MD_INT("train.eval_batch", train.eval_batch),
      MD_BOOL("train.augment", train.augment),
      MD_DOUBLE("loss.box_weight", loss.box_weight),
      MD_DOUBLE("loss.obj_weight", loss.obj_weight),
      MD_DOUBLE("loss.cls_weight", loss.cls_weight),
      MD_DOUBLE("loss.nwd_c", loss.nwd_params.c),
      MD_DOUBLE("loss.nwd_mix", loss.nwd_mix),
      MD_DOUBLE("loss.balance_p3", loss.balance[0]),
      MD_DOUBLE("loss.balance_p4", loss.balance[1]),
      MD_DOUBLE("loss.balance_p5", loss.balance[2]),
      MD_DOUBLE("eval.conf", eval.conf),
      MD_DOUBLE("eval.sweep_conf", eval.sweep_conf),
      MD_DOUBLE("eval.nms_iou", eval.nms_iou),
      MD_DOUBLE("eval.match_iou", eval.match_iou),
  };
  return table;
}

#undef MD_BOOL
#undef MD_INT
#undef MD_DOUBLE

}  // namespace

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& e : entries()) out.emplace_back(e.key);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value, const std::string& where) {
  for (const auto& e : entries())
    if (key == e.key) {
      e.set(*this, value, where);
      return;
    }
  throw ConfigError(where + ": unknown key '" + key + "'");
}

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig c;
  for (const auto& kv : parse_kv(text, source)) c.set(kv.key, kv.value, source + ":" + std::to_string(kv.line));
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o << "# effective run configuration\n";
  for (const auto& e : entries()) o << e.key << " = " << e.get(*this) << "\n";
  return o.str();
}

LossConfig RunConfig::effective_loss() const {
  LossConfig l = loss;
  l.nwd = model.nwd;
  l.n_classes = model.n_classes;
  return l;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  augment.validate();
  if (!(loss.box_weight >= 0 && loss.obj_weight >= 0 && loss.cls_weight >= 0))
    throw ConfigError("loss weights must be non-negative");
  if (!(loss.nwd_params.c > 0)) throw ConfigError("loss.nwd_c must be > 0");
  if (!(loss.nwd_mix >= 0 && loss.nwd_mix <= 1)) throw ConfigError("loss.nwd_mix must be in [0, 1]");
  for (double b : loss.balance)
    if (!(b >= 0)) throw ConfigError("loss.balance_* must be non-negative");
  if (!(eval.conf >= 0 && eval.conf <= 1)) throw ConfigError("eval.conf must be in [0, 1]");
  if (!(eval.sweep_conf >= 0 && eval.sweep_conf <= 1)) throw ConfigError("eval.sweep_conf must be in [0, 1]");
  if (!(eval.nms_iou > 0 && eval.nms_iou <= 1)) throw ConfigError("eval.nms_iou must be in (0, 1]");
  if (!(eval.match_iou > 0 && eval.match_iou <= 1)) throw ConfigError("eval.match_iou must be in (0, 1]");
}

}  // namespace microdet
