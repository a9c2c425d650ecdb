#pragma once

#include <array>
#include <cstddef>
#include <string>

namespace hps {

// Architecture axes. Full-scale defaults; ModelConfig::desk() gives the
// small CPU-friendly variant.
struct ModelConfig {
  int transformers = 1;      // 1 shared decoder or 2 (plant, leaf)
  int layers_per_level = 3;  // decoder layers per pyramid level
  std::size_t num_queries = 100;
  std::size_t embed_dim = 256;
  std::size_t ffn_dim = 2048;
  std::size_t heads = 8;
  std::size_t k_plant = 3;  // soil, crop, weed
  std::size_t k_leaf = 1;   // leaf
  std::size_t mask_stride = 4;
  std::array<std::size_t, 4> backbone_widths{16, 32, 64, 128};

  static constexpr std::size_t kFeatureLevels = 3;

  static ModelConfig desk() {
    ModelConfig c;
    c.num_queries = 20;
    c.embed_dim = 64;
    c.ffn_dim = 256;
    c.heads = 4;
    return c;
  }

  std::size_t decoder_layers() const {
    return kFeatureLevels * static_cast<std::size_t>(layers_per_level);
  }

  // Variant shorthand, e.g. "(2T, 9L)".
  std::string variant() const {
    return "(" + std::to_string(transformers) + "T, " +
           std::to_string(decoder_layers()) + "L)";
  }

  // Throws ConfigError.
  void validate() const;
};

}  // namespace hps
