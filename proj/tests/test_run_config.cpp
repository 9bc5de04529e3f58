#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "mixmil/run_config.hpp"

using namespace mixmil;

TEST_CASE("defaults validate and cover every registered key") {
  const RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  const auto entries = cfg.entries();
  for (const auto& k : config_keys()) CHECK(entries.count(k) == 1);
  CHECK(entries.at("train.lambda") == "0.5");
  CHECK(entries.at("model.d") == "64");
  CHECK(entries.at("classes") == "NC,GG3,GG4,GG5");
}

TEST_CASE("unknown key and malformed value are rejected by name") {
  RunConfig cfg;
  try {
    cfg.set("train.lamda", "0.5");
    FAIL("expected an error");
  } catch (const RunConfigError& e) {
    CHECK(std::string(e.what()).find("train.lamda") != std::string::npos);
  }
  CHECK_THROWS_AS(cfg.set("train.lambda", "half"), RunConfigError);
  CHECK_THROWS_AS(cfg.set("train.instance_reduction", "median"), RunConfigError);
  CHECK_THROWS_AS(parse_config("model.d 64\n"), RunConfigError);
}

TEST_CASE("parse applies values over defaults and ignores comments") {
  const RunConfig cfg = parse_config(
      "# run\n"
      "train.lambda = 1   # slide only\n"
      "\n"
      "train.mask_ratio=0.25\n"
      "train.monitor = slide\n"
      "synth.class_prior = 0.5,0.5,0.5,0.5\n");
  CHECK(cfg.train.lambda == 1.0);
  CHECK(cfg.train.mask_ratio == 0.25);
  CHECK(cfg.train.monitor == ValMonitor::slide);
  CHECK(cfg.synth.class_prior == std::vector<double>{0.5, 0.5, 0.5, 0.5});
}

TEST_CASE("resolved text round trips exactly") {
  RunConfig cfg;
  cfg.set("train.lr", "0.001");
  cfg.set("synth.base", "10 20 30,40 50 60,70 80 90,100 110 120");
  cfg.set("paths.out", "/tmp/run");
  const std::string text = resolved_text(cfg);
  const RunConfig back = parse_config(text);
  CHECK(resolved_text(back) == text);
  CHECK(back.synth.palette[1].base == Rgb{40, 50, 60});
  CHECK(back.out_dir == "/tmp/run");
  const auto dir = testutil::scratch_dir("run_config");
  write_resolved(dir / "config.resolved", cfg);
  CHECK(resolved_text(load_config(dir / "config.resolved")) == text);
}

TEST_CASE("class list resizes label counts and is checked against the palette") {
  RunConfig cfg;
  cfg.set("classes", "benign,malignant");
  CHECK(cfg.model.slide_labels == 2);
  CHECK(cfg.model.instance_classes == 2);
  CHECK_THROWS_AS(cfg.validate(), RunConfigError);
  cfg.set("synth.frequency", "0.03,0.09");
  cfg.set("synth.class_prior", "0.5,0.5");
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("model width must match the descriptor width") {
  RunConfig cfg;
  cfg.set("model.d", "32");
  CHECK_THROWS_AS(cfg.validate(), RunConfigError);
  cfg.set("instances.feature_dim", "32");
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("git blob hash matches the reference value") {
  // `printf 'hello\n' | git hash-object --stdin`
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("cache hash only follows bag-shaping keys") {
  RunConfig a;
  RunConfig b;
  b.set("train.lambda", "0.9");
  CHECK(cache_hash(a) == cache_hash(b));
  CHECK(config_hash(a) != config_hash(b));
  b.set("slic.compactness", "20");
  CHECK(cache_hash(a) != cache_hash(b));
  RunConfig c;
  c.set("instances.white_level", "220");
  CHECK(cache_hash(a) != cache_hash(c));
}
