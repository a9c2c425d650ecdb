#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace hps {

enum class SemanticClass : std::uint8_t { soil = 0, crop = 1, weed = 2 };

struct Segment {
  std::uint16_t id = 0;  // instance id in the owning map, 0 for stuff
  int stream = 0;        // 0 plant, 1 leaf
  int label = 0;         // semantic class for plants, 0 for leaves
  double score = 0;
  std::size_t area = 0;
};

// Hierarchical inference result. semantic holds {0 soil, 1 crop, 2 weed};
// plant_instance > 0 only on crop and weed pixels; leaf ids are unique per
// image and independent of plant ids.
struct PanopticMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> semantic;
  std::vector<std::uint16_t> plant_instance;
  std::vector<std::uint16_t> leaf_instance;
  std::vector<Segment> segments;

  PanopticMap() = default;
  PanopticMap(std::size_t h, std::size_t w)
      : height(h),
        width(w),
        semantic(h * w, 0),
        plant_instance(h * w, 0),
        leaf_instance(h * w, 0) {}
};

}  // namespace hps
