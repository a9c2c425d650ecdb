#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "hps/loss.hpp"
#include "hps/model_config.hpp"
#include "hps/postprocess.hpp"
#include "hps/trainer.hpp"

namespace hps {

// Everything a run needs besides its command-line paths. Stored as flat
// `key=value` lines; `#` starts a comment.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  InferenceConfig inference;
  LossWeights loss;
  std::uint64_t model_seed = 0;
  std::size_t target_stride = 0;  // 0: the model's mask_stride
  PoolMode gt_pool = PoolMode::max;
  std::string train_split = "train";
  std::string val_split = "val";  // skipped when absent from the data root

  void validate() const;  // throws ConfigError
};

// Absent keys keep their defaults. Throws ConfigError on unknown or
// repeated keys, malformed lines, type mismatches and out-of-range values;
// `origin` prefixes every message.
RunConfig parse_config_text(const std::string& text,
                            const std::string& origin = "config");

// Throws DataError when the file cannot be read.
RunConfig parse_config(const std::filesystem::path& path);

// Every key with its resolved value, one per line, in a fixed order.
// parse_config_text(echo_config(c)) reproduces c.
std::string echo_config(const RunConfig& config);

}  // namespace hps
