#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "hps/dataset.hpp"

namespace hps {

struct SynthOptions {
  std::size_t count = 200;
  std::size_t size = 64;  // square images, divisible by 32
  std::uint64_t seed = 0;
  std::string split = "train";
  std::size_t max_leaves = 20;  // per image, keeps leaf targets <= queries
};

// One scene: 1-4 leaf rosettes (crops), 0-6 small weeds, textured soil.
// The first crop lies fully inside the image and keeps at least 3 visible
// leaves. Plants cut by the border carry their visible fraction; those
// below one half get the partial labels 3/4.
HierarchicalSample synth_sample(std::size_t size, std::uint64_t seed,
                                std::size_t max_leaves = 20,
                                const std::string& name = "synth");

// Writes <root>/<split>/... with names synth_00000, synth_00001, ...
void synth_generate(const fs::path& root, const SynthOptions& options);

}  // namespace hps
