#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "doctest.h"
#include "hps/errors.hpp"
#include "hps/run_config.hpp"

using namespace hps;

TEST_CASE("an empty config resolves to the defaults") {
  const RunConfig c = parse_config_text("");
  CHECK(c.model.transformers == 1);
  CHECK(c.model.layers_per_level == 3);
  CHECK(c.model.num_queries == 100);
  CHECK(c.loss.cls == 1.0);
  CHECK(c.loss.mask == 2.5);
  CHECK(c.inference.mask_confidence_threshold == 0.5);
  CHECK(c.inference.overlap_threshold == 0.8);
  CHECK(c.train.base_lr == 1e-4);
  CHECK(c.train.decay_fractions == std::vector<double>{0.9, 0.95});
  CHECK(c.gt_pool == PoolMode::max);
}

TEST_CASE("comments, blanks and whitespace") {
  const RunConfig c = parse_config_text(
      "# toy run\n\n  transformers = 2   # two decoders\nnum_queries=20\r\n"
      "backbone_widths = 8, 16,32 ,64\ndecay_fractions=0.5\ngt_pool=average\n");
  CHECK(c.model.transformers == 2);
  CHECK(c.model.num_queries == 20);
  CHECK(c.model.backbone_widths == std::array<std::size_t, 4>{8, 16, 32, 64});
  CHECK(c.train.decay_fractions == std::vector<double>{0.5});
  CHECK(c.gt_pool == PoolMode::average);
}

TEST_CASE("rejected configs") {
  // Range.
  CHECK_THROWS_AS(parse_config_text("transformers=3"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("layers_per_level=2"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("overlap_threshold=1.5"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("freeze_stages=-1"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("decay_fractions=0.95,0.9"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("target_stride=3"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("embed_dim=64\nheads=3"), ConfigError);
  // Type.
  CHECK_THROWS_AS(parse_config_text("num_queries=ten"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("num_queries=-5"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("num_queries=2.5"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("base_lr=1e-3x"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("base_lr=nan"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("backbone_widths=8,16,32"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("decay_fractions=0.5,,0.9"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("gt_pool=median"), ConfigError);
  // Structure.
  CHECK_THROWS_AS(parse_config_text("learning_rate=0.1"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("transformers"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("seed=1\nseed=2"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("train_split=val"), ConfigError);
}

TEST_CASE("errors name the origin and line") {
  try {
    parse_config_text("seed=1\n\nlearning_rate=0.1\n", "run.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("run.cfg:3") != std::string::npos);
    CHECK(msg.find("learning_rate") != std::string::npos);
  }
}

TEST_CASE("echo round-trips") {
  CHECK(echo_config(parse_config_text("lambda_mask=2.5")).find("lambda_mask=2.5\n") !=
        std::string::npos);
  const RunConfig c = parse_config_text(
      "transformers=2\nlayers_per_level=1\nnum_queries=20\nembed_dim=64\nffn_dim=256\n"
      "heads=4\nbase_lr=0.001\nweight_decay=0.1\nclip_norm=0.3\ntarget_stride=1\n"
      "decay_fractions=0.1,0.7\nseed=2024\nmodel_seed=7\nno_object_weight=0.1\n"
      "max_steps=2000\nval_split=holdout\n");
  const std::string once = echo_config(c);
  const RunConfig again = parse_config_text(once);
  CHECK(echo_config(again) == once);
  CHECK(again.train.base_lr == c.train.base_lr);
  CHECK(again.train.decay_fractions == c.train.decay_fractions);
  CHECK(again.loss.no_object == c.loss.no_object);
  CHECK(again.model_seed == 7);
  CHECK(again.val_split == "holdout");
  // Every key appears exactly once.
  std::size_t lines = 0;
  for (char ch : once) lines += ch == '\n';
  CHECK(lines == 32);
}

TEST_CASE("config files") {
  const auto path = std::filesystem::temp_directory_path() /
                    ("hps_cfg_" + std::to_string(::getpid()) + ".cfg");
  {
    std::ofstream out(path);
    out << "num_queries=7\n";
  }
  CHECK(parse_config(path).model.num_queries == 7);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(parse_config(path), DataError);
}
