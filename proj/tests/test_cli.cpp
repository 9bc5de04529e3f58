#include <doctest.h>

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "cli.hpp"
#include "helpers.hpp"
#include "mixmil/image.hpp"

namespace fs = std::filesystem;
using mixmil::cli::kExitOk;
using mixmil::cli::kExitRuntime;
using mixmil::cli::kExitUsage;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "mixmil");
  std::ostringstream out, err;
  const int code = mixmil::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

const char* kSmallConfig =
    "synth.image_size = 128\n"
    "synth.grid_rows = 2\n"
    "synth.grid_cols = 2\n"
    "synth.n_slides = 16\n"
    "synth.seed = 3\n"
    "instances.patch_size = 32\n"
    "instances.feature_dim = 16\n"
    "model.d = 16\n"
    "model.blocks = 1\n"
    "train.max_epochs = 3\n"
    "train.grad_accum = 2\n";

// One dataset, cache and training run shared by the tests below.
struct Workspace {
  fs::path root, config, data, cache, run;

  Workspace() {
    root = testutil::scratch_dir("cli");
    config = root / "small.cfg";
    std::ofstream(config) << kSmallConfig;
    data = root / "data";
    cache = root / "cache";
    run = root / "run";
    REQUIRE(::run({"synth", "--config", config.string(), "--out", data.string()}).code == kExitOk);
    REQUIRE(::run({"prepare", data.string(), "--config", config.string(), "--out", cache.string()}).code == kExitOk);
    const Result t = ::run({"train", cache.string(), "--config", config.string(), "--out", run.string()});
    INFO(t.err);
    REQUIRE(t.code == kExitOk);
  }
};

const Workspace& workspace() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST_CASE("synth writes a dataset and is byte-reproducible") {
  const auto& w = workspace();
  CHECK(fs::exists(w.data / "manifest.json"));
  CHECK(fs::exists(w.data / "images" / "slide_000.png"));
  CHECK(fs::exists(w.data / "labels" / "slide_015.png"));
  const fs::path again = w.root / "data_again";
  const Result r = run({"synth", "--config", w.config.string(), "--out", again.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("16 slides") != std::string::npos);
  CHECK(read_file(again / "manifest.json") == read_file(w.data / "manifest.json"));
}

TEST_CASE("unknown config key is a usage error naming the key") {
  const Result r = run({"synth", "--set", "synth.colour=1", "--out", (workspace().root / "x").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("synth.colour") != std::string::npos);
  CHECK(run({"frobnicate"}).code == kExitUsage);
}

TEST_CASE("second prepare reuses every cached bag") {
  const auto& w = workspace();
  const Result r = run({"prepare", w.data.string(), "--config", w.config.string(), "--out", w.cache.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("prepare: 0 computed") != std::string::npos);
}

TEST_CASE("changing a bag-shaping key invalidates the cache") {
  const auto& w = workspace();
  const fs::path cache = w.root / "cache_copy";
  fs::copy(w.cache, cache, fs::copy_options::recursive);
  const Result r = run({"prepare", w.data.string(), "--config", w.config.string(), "--set", "slic.compactness=20",
                        "--out", cache.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("prepare: 0 computed") == std::string::npos);
  // Training against the stale hash is refused.
  const Result t = run({"train", w.cache.string(), "--config", w.config.string(), "--set", "slic.compactness=20",
                        "--out", (w.root / "stale_run").string()});
  CHECK(t.code != kExitOk);
}

TEST_CASE("prepare without pixel labels caches unlabeled instances") {
  const auto& w = workspace();
  const fs::path data = w.root / "data_nolabels";
  fs::copy(w.data, data, fs::copy_options::recursive);
  fs::remove_all(data / "labels");
  fs::remove_all(data / "truth");
  auto manifest = read_json(data / "manifest.json");
  for (auto& s : manifest.at("slides")) {
    s.erase("labels");
    s.erase("truth");
  }
  std::ofstream(data / "manifest.json", std::ios::trunc) << manifest.dump(2);
  const fs::path cache = w.root / "cache_nolabels";
  const Result r = run({"prepare", data.string(), "--config", w.config.string(), "--out", cache.string()});
  CHECK(r.code == kExitOk);
  CHECK(fs::exists(cache / "slide_000" / "COMPLETE"));
  CHECK_FALSE(fs::exists(cache / "slide_000" / "labels.csv"));
}

TEST_CASE("corrupt image is skipped, and fails the run under --strict") {
  const auto& w = workspace();
  const fs::path data = w.root / "data_corrupt";
  fs::copy(w.data, data, fs::copy_options::recursive);
  std::ofstream(data / "images" / "slide_004.png", std::ios::trunc) << "garbage";
  const Result lenient = run({"prepare", data.string(), "--config", w.config.string(), "--out",
                              (w.root / "cache_corrupt").string()});
  CHECK(lenient.code == kExitOk);
  CHECK(lenient.out.find("1 error") != std::string::npos);
  const Result strict = run({"prepare", data.string(), "--config", w.config.string(), "--strict", "--out",
                             (w.root / "cache_corrupt_strict").string()});
  CHECK(strict.code == kExitRuntime);
}

TEST_CASE("train writes summaries, per-fold metrics and checkpoints") {
  const auto& w = workspace();
  const auto summary = read_json(w.run / "summary.json");
  for (const char* key : {"macro_auc_mean", "macro_auc_std", "folds", "instance_head", "config_hash"})
    CHECK(summary.contains(key));
  CHECK(summary.at("folds").size() == 4);
  CHECK(summary.at("instance_head") == "trained");
  CHECK(fs::exists(w.run / "checkpoints" / "fold_0" / "manifest.json"));
  CHECK(fs::exists(w.run / "fold_3" / "metrics.json"));
  CHECK(fs::exists(w.run / "config.resolved"));
  const double mean = summary.at("macro_auc_mean");
  CHECK(mean >= 0.0);
  CHECK(mean <= 1.0);
}

TEST_CASE("slide-only training marks the instance head untrained") {
  const auto& w = workspace();
  const fs::path run_dir = w.root / "run_slide_only";
  const Result r = run({"train", w.cache.string(), "--config", w.config.string(), "--lambda", "1", "--set",
                        "train.max_epochs=1", "--out", run_dir.string()});
  CHECK(r.code == kExitOk);
  CHECK(read_json(run_dir / "summary.json").at("instance_head") == "untrained");
  CHECK(r.out.find("instance head untrained") != std::string::npos);
}

TEST_CASE("mask-ratio sweep writes one table row per setting") {
  const auto& w = workspace();
  const fs::path run_dir = w.root / "run_sweep";
  const Result r = run({"train", w.cache.string(), "--config", w.config.string(), "--mask-ratio", "0,0.5", "--set",
                        "train.max_epochs=1", "--set", "train.split=single", "--out", run_dir.string()});
  CHECK(r.code == kExitOk);
  std::istringstream csv(read_file(run_dir / "table2.csv"));
  std::vector<std::string> lines;
  for (std::string line; std::getline(csv, line);) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[1].find("masking 0%") != std::string::npos);
  CHECK(lines[2].find("masking 50%") != std::string::npos);
  CHECK(read_json(run_dir / "metrics.json").at("settings").size() == 2);
}

TEST_CASE("eval reproduces the fold macro AUC") {
  const auto& w = workspace();
  const auto metrics = read_json(w.run / "fold_0" / "metrics.json");
  const Result r = run({"eval", (w.run / "checkpoints" / "fold_0").string(), w.cache.string(), "--slides",
                        (w.run / "fold_0" / "metrics.json").string()});
  REQUIRE(r.code == kExitOk);
  const auto pos = r.out.find("macro AUC: ");
  REQUIRE(pos != std::string::npos);
  const double printed = std::stod(r.out.substr(pos + 11));
  CHECK(std::abs(printed - metrics.at("macro_auc").get<double>()) <= 1e-12);
}

TEST_CASE("eval with a different class set is a usage error") {
  const auto& w = workspace();
  const Result r = run({"eval", (w.run / "checkpoints" / "fold_0").string(), w.cache.string(), "--config",
                        w.config.string(), "--set", "classes=A,B,C,D"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("class set") != std::string::npos);
}

TEST_CASE("predict works on bags without labels") {
  const auto& w = workspace();
  const fs::path data = w.root / "data_predict";
  fs::create_directories(data / "images");
  fs::copy_file(w.data / "images" / "slide_000.png", data / "images" / "slide_000.png");
  std::ofstream(data / "manifest.json") << R"({"slides": [{"id": "slide_000", "image": "images/slide_000.png"}]})";
  const fs::path cache = w.root / "cache_predict";
  REQUIRE(run({"prepare", data.string(), "--config", w.config.string(), "--out", cache.string()}).code == kExitOk);
  const fs::path out = w.root / "predictions";
  const Result r = run({"predict", (w.run / "checkpoints" / "fold_0").string(), (cache / "slide_000").string(), "--out",
                        out.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("macro") == std::string::npos);
  const auto p = read_json(out / "predictions.json").at("predictions");
  REQUIRE(p.size() == 1);
  CHECK(p[0].at("slide_probabilities").size() == 4);
}

TEST_CASE("visualize writes an overlay the size of the slide") {
  const auto& w = workspace();
  const fs::path png = w.root / "overlay.png";
  const Result r = run({"visualize", (w.run / "checkpoints" / "fold_0").string(), (w.cache / "slide_001").string(),
                        "--out", png.string()});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  const auto img = mixmil::read_png_rgb(png);
  CHECK(img.height == 128);
  CHECK(img.width == 128);
  CHECK(fs::exists(w.root / "overlay_compare.png"));
  CHECK(r.out.find("region agreement") != std::string::npos);
}

TEST_CASE("visualize without a segmentation asks for prepare") {
  const auto& w = workspace();
  const fs::path empty = w.root / "not_prepared";
  fs::create_directories(empty);
  const Result r = run({"visualize", (w.run / "checkpoints" / "fold_0").string(), empty.string(), "--out",
                        (w.root / "x.png").string()});
  CHECK(r.code == kExitRuntime);
  CHECK(r.err.find("prepare") != std::string::npos);
}
