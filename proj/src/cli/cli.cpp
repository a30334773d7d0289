#include "microdet/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>

#include "microdet/ablation.hpp"
#include "microdet/grad_suite.hpp"
#include "microdet/kv.hpp"
#include "microdet/render.hpp"
#include "microdet/train.hpp"
#include "microdet/verify.hpp"

namespace microdet {

namespace fs = std::filesystem;

namespace {

// Validation failure raised by the command layer itself.
class UsageError : public Error {
 public:
  using Error::Error;
};

std::uint64_t parse_seed(const std::string& text, const std::string& where) {
  const std::int64_t v = kv_int(text, where);
  if (v < 0) throw ConfigError(where + ": seed must be non-negative, got " + text);
  return static_cast<std::uint64_t>(v);
}

// MICRODET_SEED replaces the built-in default seed of every command.
std::uint64_t default_seed() {
  const char* env = std::getenv("MICRODET_SEED");
  return env ? parse_seed(env, "MICRODET_SEED") : 0;
}

// Defaults, then MICRODET_SEED, then the config file, then --set overrides.
// data.img_size and model.classes follow the dataset unless set explicitly.
RunConfig assemble_config(const std::string& config_path, const std::vector<std::string>& sets,
                          const fs::path& data_root) {
  RunConfig cfg;
  cfg.train.seed = default_seed();
  std::set<std::string> explicit_keys;
  if (!config_path.empty()) {
    for (const auto& kv : parse_kv(read_file(config_path), config_path)) {
      cfg.set(kv.key, kv.value, config_path + ":" + std::to_string(kv.line));
      explicit_keys.insert(kv.key);
    }
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set: expected key=value, got '" + s + "'");
    const auto trim = [](std::string v) {
      const auto b = v.find_first_not_of(" \t"), e = v.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    };
    const std::string key = trim(s.substr(0, eq));
    cfg.set(key, trim(s.substr(eq + 1)), "--set " + key);
    explicit_keys.insert(key);
  }
  const fs::path manifest = data_root / "manifest.txt";
  std::error_code ec;
  if (!data_root.empty() && fs::exists(manifest, ec)) {
    const DatasetManifest m = DatasetManifest::parse(read_file(manifest), manifest.string());
    if (!explicit_keys.count("data.img_size")) cfg.model.img_size = m.spec.img_size;
    if (!explicit_keys.count("model.classes")) cfg.model.n_classes = m.spec.n_classes;
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  write_file(path, text);
}

// ------------------------------------------------------------------ gen-data

struct GenDataArgs {
  std::string out, preset = "small", difficulty;
  std::int64_t count = -1;
  int img_size = -1, classes = -1;
  std::string seed;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  SceneSpec spec;
  std::int64_t count = 0;
  const std::uint64_t seed = a.seed.empty() ? default_seed() : parse_seed(a.seed, "--seed");
  if (a.preset == "small") {
    spec = SceneSpec::small(seed);
    count = kSmallCount;
  } else if (a.preset == "micro") {
    spec = SceneSpec::micro(seed);
    count = kMicroCount;
  } else {
    throw UsageError("--preset: expected small or micro, got '" + a.preset + "'");
  }
  if (a.count >= 0) count = a.count;
  if (a.img_size >= 0) spec.img_size = a.img_size;
  if (a.classes >= 0) spec.n_classes = a.classes;
  if (!a.difficulty.empty()) spec.difficulty = parse_difficulty(a.difficulty);
  const GenerateReport r = generate(spec, count, a.out);
  out << "wrote " << count << " samples to " << a.out << " (train " << r.counts[0] << ", val " << r.counts[1]
      << ", test " << r.counts[2] << ")\n";
  return kExitOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume;
  std::vector<std::string> sets;
  int stop_after = 0;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  std::error_code ec;
  if (!fs::is_directory(a.data, ec)) throw IoError(a.data + ": data directory not found");
  const RunConfig cfg = assemble_config(a.config, a.sets, a.data);
  TrainOptions opt{a.out, a.stop_after, a.quiet ? nullptr : &out};
  const TrainResult r = a.resume.empty() ? train(cfg, a.data, opt) : resume(a.resume, cfg, a.data, opt);
  char buf[160];
  if (r.best_epoch > 0)
    std::snprintf(buf, sizeof buf, "best val map50 %.6f at epoch %d\n", r.best_map50, r.best_epoch);
  else
    std::snprintf(buf, sizeof buf, "no evaluated epoch\n");
  out << buf << (r.finished ? "finished " : "stopped after epoch ") << r.log.rows.size() << " epochs; run directory "
      << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
  std::string weights, data, split = "val", out;
  std::optional<double> conf, iou;
  std::optional<int> batch;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  RunConfig cfg = config_for_weights(a.weights);
  if (a.conf) cfg.eval.conf = *a.conf;
  if (a.iou) cfg.eval.match_iou = *a.iou;
  cfg.validate();
  Detector<float> model = load_weights<float>(a.weights, cfg.model);
  const Dataset data = Dataset::open(a.data, parse_split(a.split));
  const EvalReport rep = evaluate_model(model, data, cfg.eval, a.batch.value_or(cfg.train.eval_batch));
  const std::string csv = EvalReport::csv_header() + "\n" + rep.csv_row() + "\n";
  const fs::path file = a.out.empty() ? fs::path(a.weights).parent_path() / ("eval_" + a.split + ".csv") : fs::path(a.out);
  write_text(file, csv);
  out << csv;
  return kExitOk;
}

// -------------------------------------------------------------------- ablate

struct AblateArgs {
  std::string data, out, config, runs, seed;
  std::vector<std::string> sets;
  int epochs = 10, jobs = 1;
  bool quiet = false;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  std::error_code ec;
  if (!fs::is_directory(a.data, ec)) throw IoError(a.data + ": data directory not found");
  AblationOptions opt;
  opt.base = assemble_config(a.config, a.sets, a.data);
  opt.base.train.epochs = a.epochs;
  if (!a.seed.empty()) opt.base.train.seed = parse_seed(a.seed, "--seed");
  opt.base.validate();
  opt.data_root = a.data;
  opt.runs_dir = a.runs.empty() ? fs::path(a.out + ".runs") : fs::path(a.runs);
  opt.jobs = a.jobs;
  opt.progress = a.quiet ? nullptr : &out;
  const auto rows = run_ablation(opt);
  const std::string csv = ablation_csv(rows, opt.base);
  write_text(a.out, csv);
  out << csv;
  const AblationRow* best = nullptr;
  for (const auto& r : rows)
    if (r.status == "ok" && (!best || r.map50 > best->map50)) best = &r;
  if (best) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "best: %s map50 %.6f\n", best->toggles.c_str(), best->map50);
    out << buf;
  }
  return kExitOk;
}

// ---------------------------------------------------------------- grad-check

int cmd_grad_check(const std::string& ops, std::uint64_t seed, std::ostream& out) {
  std::vector<const GradSuiteEntry*> entries;
  if (ops == "all") {
    for (const auto& e : grad_suite()) entries.push_back(&e);
  } else {
    const GradSuiteEntry* e = find_grad_entry(ops);
    if (!e) throw UsageError("--ops: unknown op '" + ops + "'");
    entries.push_back(e);
  }
  out << "name,kind,max_rel_error,tolerance,coordinates,draws,status\n";
  int failed = 0;
  for (const GradSuiteEntry* e : entries) {
    const GradCheckReport r = grad_check(e->factory, seed, e->options());
    const bool ok = r.max_rel_error < e->tolerance;
    failed += ok ? 0 : 1;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%.3e,%.0e,%lld,%d,%s\n", e->name.c_str(), e->kind.c_str(), r.max_rel_error,
                  e->tolerance, static_cast<long long>(r.coordinates), r.attempts, ok ? "pass" : "FAIL");
    out << buf;
  }
  out << (failed ? std::to_string(failed) + " failed\n" : "all passed\n");
  return failed ? kExitVerifyFailed : kExitOk;
}

// ---------------------------------------------------------------- fuse-check

int cmd_fuse_check(std::uint64_t seed, int trials, int model_inputs, std::ostream& out) {
  if (trials < 1) throw UsageError("--trials must be >= 1");
  if (model_inputs < 0) throw UsageError("--model-inputs must be >= 0");
  const FuseCheckReport r = fuse_check(seed, trials, model_inputs);
  char buf[160];
  out << "kind,index,max_abs\n";
  for (std::size_t i = 0; i < r.block_trial_max.size(); ++i) {
    std::snprintf(buf, sizeof buf, "block,%zu,%.3e\n", i, r.block_trial_max[i]);
    out << buf;
  }
  for (std::size_t i = 0; i < r.model_input_max.size(); ++i) {
    std::snprintf(buf, sizeof buf, "model,%zu,%.3e\n", i, r.model_input_max[i]);
    out << buf;
  }
  const bool ok = r.passed();
  std::snprintf(buf, sizeof buf, "blocks %d max %.3e (limit 1e-05); model %d fused blocks, max %.3e (limit 1e-04): %s\n",
                trials, r.block_max(), r.fused_blocks, r.model_max(), ok ? "pass" : "FAIL");
  out << buf;
  return ok ? kExitOk : kExitVerifyFailed;
}

// -------------------------------------------------------------------- render

struct RenderArgs {
  std::string weights, image, out;
  double conf = 0.25;
};

int cmd_render(const RenderArgs& a, std::ostream& out) {
  const RunConfig cfg = config_for_weights(a.weights);
  const Image img = read_ppm(a.image);
  if (img.width != cfg.model.img_size || img.height != cfg.model.img_size)
    throw ShapeError(a.image + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     ", model expects " + std::to_string(cfg.model.img_size));
  Detector<float> model = load_weights<float>(a.weights, cfg.model);
  model.eval();
  NoGradGuard no_grad;
  DecodeOptions dopt;
  dopt.conf_thresh = a.conf;
  dopt.iou_thresh = cfg.eval.nms_iou;
  const auto dets = decode(model.forward(to_batch({&img})), cfg.model, dopt)[0];
  write_ppm(a.out, draw_detections(img, dets));
  for (const auto& d : dets) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "class %d conf %.4f box %.2f %.2f %.2f %.2f\n", d.class_id, d.confidence, d.box.x1(),
                  d.box.y1(), d.box.x2(), d.box.y2());
    out << buf;
  }
  out << dets.size() << " detections written to " << a.out << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"microdet: small-defect detector toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic defect dataset");
  gen->add_option("--out", gd.out, "Dataset directory (must be empty or absent)")->required();
  gen->add_option("--preset", gd.preset, "small (64 px, 1000 samples) or micro (32 px, 124 samples)");
  gen->add_option("--count", gd.count, "Number of samples");
  gen->add_option("--seed", gd.seed, "Dataset seed (default MICRODET_SEED or 0)");
  gen->add_option("--img-size", gd.img_size, "Image side in pixels");
  gen->add_option("--difficulty", gd.difficulty, "easy or hard");
  gen->add_option("--classes", gd.classes, "1 or 2");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a detector");
  tr->add_option("--config", ta.config, "Run configuration file");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Run directory")->required();
  tr->add_option("--set", ta.sets, "Override key=value (repeatable)");
  tr->add_option("--resume", ta.resume, "Continue from a checkpoint directory");
  tr->add_option("--stop-after", ta.stop_after, "Stop once this epoch is checkpointed");
  tr->add_flag("--quiet", ta.quiet, "No per-epoch progress");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate weights on a dataset split");
  ev->add_option("--weights", ea.weights, "weights.tdw (config.txt alongside)")->required();
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--split", ea.split, "train, val or test");
  ev->add_option("--conf", ea.conf, "Confidence threshold for P/R and counts");
  ev->add_option("--iou", ea.iou, "Matching IoU threshold");
  ev->add_option("--batch", ea.batch, "Evaluation batch size");
  ev->add_option("--out", ea.out, "CSV file (default eval_<split>.csv next to the weights)");

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate all 16 toggle combinations");
  ab->add_option("--data", aa.data, "Dataset directory")->required();
  ab->add_option("--out", aa.out, "Table CSV path")->required();
  ab->add_option("--epochs", aa.epochs, "Epochs per run");
  ab->add_option("--seed", aa.seed, "Training seed (default MICRODET_SEED or 0)");
  ab->add_option("--jobs", aa.jobs, "Concurrent runs");
  ab->add_option("--config", aa.config, "Base run configuration");
  ab->add_option("--set", aa.sets, "Override key=value (repeatable)");
  ab->add_option("--runs", aa.runs, "Directory for the per-run outputs (default <out>.runs)");
  ab->add_flag("--quiet", aa.quiet, "No per-run progress");

  std::string ops = "all", gseed;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks (f64)");
  gc->add_option("--ops", ops, "all or one registered name");
  gc->add_option("--seed", gseed, "Draw seed (default MICRODET_SEED or 1234)");

  std::string fseed;
  int trials = 1000, model_inputs = 100;
  auto* fc = app.add_subcommand("fuse-check", "Fused vs unfused RepConvN deviation");
  fc->add_option("--seed", fseed, "Draw seed (default MICRODET_SEED or 0)");
  fc->add_option("--trials", trials, "Random block instances");
  fc->add_option("--model-inputs", model_inputs, "Random inputs through a RepGFPN detector");

  RenderArgs ra;
  auto* rd = app.add_subcommand("render", "Draw detections onto a PPM image");
  rd->add_option("--weights", ra.weights, "weights.tdw (config.txt alongside)")->required();
  rd->add_option("--image", ra.image, "Input P6 PPM")->required();
  rd->add_option("--out", ra.out, "Output PPM")->required();
  rd->add_option("--conf", ra.conf, "Confidence threshold");

  std::vector<std::string> argv_store{"microdet"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gd, out);
    if (tr->parsed()) return cmd_train(ta, out);
    if (ev->parsed()) return cmd_eval(ea, out);
    if (ab->parsed()) return cmd_ablate(aa, out);
    if (gc->parsed()) {
      const std::uint64_t seed =
          gseed.empty() ? (std::getenv("MICRODET_SEED") ? default_seed() : 1234) : parse_seed(gseed, "--seed");
      return cmd_grad_check(ops, seed, out);
    }
    if (fc->parsed()) return cmd_fuse_check(fseed.empty() ? default_seed() : parse_seed(fseed, "--seed"), trials,
                                            model_inputs, out);
    if (rd->parsed()) return cmd_render(ra, out);
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerifyFailed;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerifyFailed;
  }
  return kExitUsage;
}

}  // namespace microdet
