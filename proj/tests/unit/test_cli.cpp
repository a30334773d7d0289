#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "microdet/ablation.hpp"
#include "microdet/cli.hpp"
#include "microdet/render.hpp"
#include "microdet/train.hpp"
#include "test_util.hpp"

using namespace microdet;
using microdet::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  return files;
}

std::string without_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

std::size_t count_lines(const std::string& s, const std::string& prefix) {
  std::istringstream in(s);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += line.rfind(prefix, 0) == 0 ? 1 : 0;
  return n;
}

// Scoped MICRODET_SEED.
struct SeedEnv {
  explicit SeedEnv(const char* v) { ::setenv("MICRODET_SEED", v, 1); }
  ~SeedEnv() { ::unsetenv("MICRODET_SEED"); }
};

}  // namespace

TEST_CASE("cli usage errors exit 2") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"bogus"}).code == kExitUsage);
  CHECK(cli({"gen-data"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"grad-check", "--ops", "nope"}).code == kExitUsage);
  {
    SeedEnv env("x");
    TempDir t;
    const Run r = cli({"gen-data", "--out", (t.path / "d").string()});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("MICRODET_SEED") != std::string::npos);
  }
}

TEST_CASE("cli gen-data") {
  TempDir t;
  const Run r = cli({"gen-data", "--out", (t.path / "a").string(), "--count", "100", "--seed", "7"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("train 80, val 10, test 10") != std::string::npos);
  REQUIRE(cli({"gen-data", "--out", (t.path / "b").string(), "--count", "100", "--seed", "7"}).code == kExitOk);
  CHECK(tree(t.path / "a") == tree(t.path / "b"));
  {
    SeedEnv env("7");
    REQUIRE(cli({"gen-data", "--out", (t.path / "c").string(), "--count", "100"}).code == kExitOk);
  }
  CHECK(tree(t.path / "a") == tree(t.path / "c"));
  CHECK(cli({"gen-data", "--out", (t.path / "d").string(), "--count", "5"}).code == kExitUsage);
  CHECK(cli({"gen-data", "--out", (t.path / "a").string(), "--count", "100"}).code == kExitUsage);  // not empty
  CHECK(cli({"gen-data", "--out", (t.path / "e").string(), "--difficulty", "medium"}).code == kExitUsage);
  CHECK(cli({"gen-data", "--out", (t.path / "f").string(), "--preset", "micro", "--classes", "1"}).code == kExitOk);
  const auto m = DatasetManifest::parse(read_file(t.path / "f" / "manifest.txt"), "m");
  CHECK(m.spec.img_size == 32);
  CHECK(m.spec.n_classes == 1);
  CHECK(m.count == kMicroCount);
  CHECK(m.counts[0] == 100);
}

TEST_CASE("cli train, eval and render") {
  TempDir t;
  const std::string data = (t.path / "data").string();
  REQUIRE(cli({"gen-data", "--out", data, "--preset", "micro", "--count", "30", "--seed", "3"}).code == kExitOk);
  write_file(t.path / "run.txt", "# smoke\ntrain.epochs = 2\ntrain.batch_size = 4\ntrain.warmup_epochs = 1\n");
  const std::string cfg = (t.path / "run.txt").string();
  const std::string a = (t.path / "a").string(), b = (t.path / "b").string();

  SUBCASE("train artifacts and determinism") {
    REQUIRE(cli({"train", "--config", cfg, "--data", data, "--out", a, "--quiet"}).code == kExitOk);
    for (const char* f : {"runlog.csv", "config.txt", "checkpoints/final/weights.tdw", "checkpoints/best/weights.tdw",
                          "checkpoints/last/optim.tdw"})
      CHECK(fs::exists(fs::path(a) / f));
    const RunConfig echoed = RunConfig::load(fs::path(a) / "config.txt");
    CHECK(echoed.model.img_size == 32);  // taken from the dataset
    CHECK(echoed.train.epochs == 2);
    REQUIRE(cli({"train", "--config", cfg, "--data", data, "--out", b, "--quiet"}).code == kExitOk);
    CHECK(without_seconds(read_file(fs::path(a) / "runlog.csv")) == without_seconds(read_file(fs::path(b) / "runlog.csv")));

    // Resume through the command line.
    const std::string c = (t.path / "c").string(), d = (t.path / "d").string();
    REQUIRE(cli({"train", "--config", cfg, "--data", data, "--out", c, "--stop-after", "1", "--quiet"}).code == kExitOk);
    REQUIRE(cli({"train", "--config", cfg, "--data", data, "--out", d, "--resume", c + "/checkpoints/last", "--quiet"})
                .code == kExitOk);
    CHECK(read_file(fs::path(a) / "checkpoints/final/weights.tdw") == read_file(fs::path(d) / "checkpoints/final/weights.tdw"));
  }
  SUBCASE("train errors") {
    CHECK(cli({"train", "--data", (t.path / "missing").string(), "--out", a}).code == kExitUsage);
    CHECK(cli({"train", "--config", cfg, "--data", data, "--out", a, "--set", "train.nope=1"}).code == kExitUsage);
    CHECK(cli({"train", "--config", cfg, "--data", data, "--out", a, "--set", "data.img_size=64"}).code == kExitUsage);
    write_file(t.path / "bad.txt", "train.epochs = 2\nmodel.ghost = yes\n");
    const Run r = cli({"train", "--config", (t.path / "bad.txt").string(), "--data", data, "--out", a});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("bad.txt:2") != std::string::npos);
  }
  SUBCASE("eval reproduces the run log") {
    REQUIRE(cli({"train", "--config", cfg, "--data", data, "--out", a, "--quiet"}).code == kExitOk);
    const RunLog log = RunLog::parse_csv(read_file(fs::path(a) / "runlog.csv"), "runlog.csv");
    const std::string weights = a + "/checkpoints/final/weights.tdw";
    const Run r = cli({"eval", "--weights", weights, "--data", data});
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.rfind(EvalReport::csv_header() + "\n", 0) == 0);
    const double map = std::stod(r.out.substr(r.out.find('\n') + 1));
    CHECK(std::abs(map - *log.rows.back().map50) <= 1e-6);
    CHECK(read_file(fs::path(a) / "checkpoints/final/eval_val.csv") == r.out);

    const Run z = cli({"eval", "--weights", weights, "--data", data, "--conf", "1.0", "--out", (t.path / "z.csv").string()});
    REQUIRE(z.code == kExitOk);
    const std::string row = z.out.substr(z.out.find('\n') + 1);
    CHECK(row.rfind(",0.000000,0.000000,0,0,") != std::string::npos);

    // Empty split.
    const fs::path empty = t.path / "empty";
    fs::copy(data, empty, fs::copy_options::recursive);
    for (const char* sub : {"val/images", "val/labels"}) {
      fs::remove_all(empty / sub);
      fs::create_directories(empty / sub);
    }
    CHECK(cli({"eval", "--weights", weights, "--data", empty.string()}).code == kExitUsage);
    CHECK(cli({"eval", "--weights", weights, "--data", data, "--split", "dev"}).code == kExitUsage);
    CHECK(cli({"eval", "--weights", (t.path / "none.tdw").string(), "--data", data}).code == kExitUsage);
  }
  SUBCASE("render") {
    REQUIRE(cli({"train", "--config", cfg, "--data", data, "--out", a, "--quiet"}).code == kExitOk);
    const std::string weights = a + "/checkpoints/final/weights.tdw";
    const Dataset val = Dataset::open(data, Split::kVal);
    const std::string in = (fs::path(data) / "val/images" / (val.id(0) + ".ppm")).string();
    const std::string out = (t.path / "r.ppm").string();
    const Run r = cli({"render", "--weights", weights, "--image", in, "--out", out, "--conf", "1.0"});
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.find("0 detections") != std::string::npos);
    CHECK(read_ppm(out) == read_ppm(in));
    CHECK(read_file(out) == read_file(in));

    const Run low = cli({"render", "--weights", weights, "--image", in, "--out", out, "--conf", "0.0"});
    REQUIRE(low.code == kExitOk);
    CHECK(read_ppm(out).width == 32);

    write_file(t.path / "bad.ppm", "P6\n32 32\n255\nxx");
    CHECK(cli({"render", "--weights", weights, "--image", (t.path / "bad.ppm").string(), "--out", out}).code ==
          kExitUsage);
    write_ppm(t.path / "big.ppm", Image(64, 64));
    CHECK(cli({"render", "--weights", weights, "--image", (t.path / "big.ppm").string(), "--out", out}).code ==
          kExitUsage);
  }
}

TEST_CASE("render drawing") {
  Image img(32, 32, 0.5f);
  CHECK(draw_detections(img, {}) == img);
  const Detection d{BBox::from_corners(4.4, 6.6, 12.4, 15.5), 1, 0.75};
  const PixelRect r = outline_rect(d.box, 32, 32);
  CHECK(r == PixelRect{4, 7, 11, 15});
  const Image out = draw_detections(img, {d});
  int outline = 0, other_changed = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const bool on_edge = (x == r.left || x == r.right) && y >= r.top && y <= r.bottom;
      const bool on_row = (y == r.top || y == r.bottom) && x >= r.left && x <= r.right;
      const std::array<float, 3> px{out.at(0, y, x), out.at(1, y, x), out.at(2, y, x)};
      if (on_edge || on_row) {
        CHECK(px == class_color(1));
        ++outline;
      } else if (x == r.left - 1 && y == r.top - 1) {
        CHECK(px == std::array<float, 3>{0.75f, 0.75f, 0.75f});
      } else if (px != std::array<float, 3>{0.5f, 0.5f, 0.5f}) {
        ++other_changed;
      }
    }
  CHECK(outline == 2 * 8 + 2 * 9 - 4);
  CHECK(other_changed == 0);
  // Clipped to the image and at least one pixel.
  CHECK(outline_rect(BBox::from_corners(-3, -3, 0.2, 40), 32, 32) == PixelRect{0, 0, 0, 31});
  CHECK(outline_rect(BBox::from_corners(31.6, 5, 33, 6), 32, 32) == PixelRect{31, 5, 31, 5});
}

TEST_CASE("cli ablate") {
  TempDir t;
  const std::string data = (t.path / "data").string();
  REQUIRE(cli({"gen-data", "--out", data, "--preset", "micro", "--count", "12", "--seed", "4"}).code == kExitOk);
  const std::string table = (t.path / "table.csv").string();
  const Run r = cli({"ablate", "--data", data, "--out", table, "--epochs", "1", "--jobs", "3", "--quiet", "--set",
                     "train.batch_size=5"});
  REQUIRE(r.code == kExitOk);
  const std::string csv = read_file(table);
  CHECK(csv.find("\n" + ablation_header() + "\n") != std::string::npos);
  CHECK(csv.find("59.3556") != std::string::npos);
  CHECK(csv.find("79.3174") != std::string::npos);
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#' && line != ablation_header()) rows.push_back(line);
  REQUIRE(rows.size() == 16);
  const auto toggles = ablation_toggles();
  for (std::size_t i = 0; i < 16; ++i) {
    const std::string expect = std::string{toggles[i][0], ',', toggles[i][1], ',', toggles[i][2], ',', toggles[i][3], ','};
    CHECK(rows[i].rfind(expect, 0) == 0);
    CHECK(rows[i].ends_with(",1,0,ok"));
  }
  CHECK(r.out.find("best: ") != std::string::npos);

  // Serial and parallel sweeps agree.
  const std::string serial = (t.path / "serial.csv").string();
  REQUIRE(cli({"ablate", "--data", data, "--out", serial, "--epochs", "1", "--quiet", "--set", "train.batch_size=5"})
              .code == kExitOk);
  CHECK(read_file(serial) == csv);

  // A failing run is recorded in its row.
  const Run f = cli({"ablate", "--data", data, "--out", (t.path / "f.csv").string(), "--epochs", "1", "--quiet", "--set",
                     "train.eval_every=0", "--set", "train.batch_size=5"});
  REQUIRE(f.code == kExitOk);
  CHECK(count_lines(read_file(t.path / "f.csv"), "0,0,0,0,0.000000,0.000000,0.000000,1,0,error: ") == 1);
  CHECK(cli({"ablate", "--data", (t.path / "none").string(), "--out", table}).code == kExitUsage);
}

TEST_CASE("cli grad-check and fuse-check") {
  const Run g = cli({"grad-check", "--ops", "composite_loss_ciou"});
  REQUIRE(g.code == kExitOk);
  CHECK(g.out.find("composite_loss_ciou,loss,") != std::string::npos);
  CHECK(g.out.find("all passed") != std::string::npos);
  CHECK(cli({"grad-check", "--ops", "composite_loss_ciou"}).out == g.out);

  const Run f = cli({"fuse-check", "--trials", "20", "--model-inputs", "2", "--seed", "5"});
  REQUIRE(f.code == kExitOk);
  CHECK(count_lines(f.out, "block,") == 20);
  CHECK(count_lines(f.out, "model,") == 2);
  CHECK(f.out.find(": pass") != std::string::npos);
  CHECK(cli({"fuse-check", "--trials", "20", "--model-inputs", "2", "--seed", "5"}).out == f.out);
  CHECK(cli({"fuse-check", "--trials", "0"}).code == kExitUsage);
}
