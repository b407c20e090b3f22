#include <doctest.h>

#include "reid/config.hpp"
#include "reid/errors.hpp"
#include "reid/pipeline.hpp"

using namespace reid;

TEST_CASE("config file parsing") {
  ConfigFile f = ConfigFile::parse("# comment\n  k_global = 32 \n\nuse_secab=false\neta = 0.9\n");
  CHECK(f.get_int("k_global", 0) == 32);
  CHECK(f.get_bool("use_secab", true) == false);
  CHECK(f.get_double("eta", 0) == 0.9);
  CHECK(f.get_string("missing", "x") == "x");
  CHECK_NOTHROW(f.finish());
  CHECK_THROWS_AS(ConfigFile::parse("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(ConfigFile::parse("no equals sign\n"), ConfigError);
  ConfigFile bad = ConfigFile::parse("n = 12x\n");
  CHECK_THROWS_AS(bad.get_int("n", 0), ConfigError);
}

TEST_CASE("unknown keys are errors") {
  ConfigFile f = ConfigFile::parse("k_globl = 3\n");
  f.get_int("k_global", 64);
  CHECK_THROWS_AS(f.finish(), ConfigError);
}

TEST_CASE("pipeline config from file") {
  ConfigFile f = ConfigFile::parse("k_top = 12\neta = 0.95\nseeding = random\nuse_secab = off\nepochs = 3\n");
  const PipelineConfig cfg = PipelineConfig::from_config(f);
  f.finish();
  CHECK(cfg.k_top == 12);
  CHECK(cfg.ema.eta == 0.95);
  CHECK(cfg.clustering.seeding == Seeding::kRandom);
  CHECK(!cfg.use_secab);
  CHECK(cfg.epochs == 3);
  CHECK(cfg.k_global == 64);

  ConfigFile g = ConfigFile::parse("eta = 1.0\n");
  CHECK_THROWS_AS(PipelineConfig::from_config(g), ConfigError);
  ConfigFile h = ConfigFile::parse("batch_instances = 1\n");
  CHECK_THROWS_AS(PipelineConfig::from_config(h), ConfigError);
}
