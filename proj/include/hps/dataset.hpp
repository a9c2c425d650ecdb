#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hps/panoptic_map.hpp"

namespace hps {

namespace fs = std::filesystem;

// Semantic labels as stored on disk. 3 and 4 mark plants that are mostly
// outside the image.
enum SemanticLabel : std::uint8_t {
  kSoil = 0,
  kCrop = 1,
  kWeed = 2,
  kPartialCrop = 3,
  kPartialWeed = 4,
};

struct HierarchicalSample {
  std::string name;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> image;  // interleaved RGB; empty for label-only loads
  std::vector<std::uint8_t> semantics;
  std::vector<std::uint16_t> plant_instances;
  std::vector<std::uint16_t> leaf_instances;
  std::map<std::uint16_t, double> visibility;  // plant id -> visible fraction

  std::size_t pixels() const { return height * width; }
};

enum class Strictness { strict, lenient };

struct LoadOptions {
  Strictness strictness = Strictness::lenient;
  bool with_image = true;
};

// Nonzero ids present in an instance map.
std::set<std::uint16_t> instance_ids(const std::vector<std::uint16_t>& map);

// Invariant violations, each naming the first offending pixel as (x, y).
std::vector<std::string> validate_sample(const HierarchicalSample& s);

// Interleaved 8-bit RGB of an RGB or RGBA PNG; 16-bit samples keep their
// high byte. Sets height and width. Throws DataError.
std::vector<std::uint8_t> read_rgb_image(const fs::path& path, std::size_t& height,
                                         std::size_t& width);

// Loads <dir>/{images,semantics,plant_instances,leaf_instances}/<name>.png
// and the optional visibility/<name>.csv. Throws DataError on missing files,
// size mismatches and, in strict mode, invariant violations; lenient mode
// appends them to `warnings`.
HierarchicalSample load_sample_dir(const fs::path& dir, const std::string& name,
                                   const LoadOptions& options = {},
                                   std::vector<std::string>* warnings = nullptr);

inline HierarchicalSample load_sample(const fs::path& root,
                                      const std::string& split,
                                      const std::string& name,
                                      const LoadOptions& options = {},
                                      std::vector<std::string>* warnings = nullptr) {
  return load_sample_dir(root / split, name, options, warnings);
}

// Writes every map of `s` (and the visibility sidecar when non-empty).
void write_sample_dir(const fs::path& dir, const HierarchicalSample& s);

// Writes semantics/plant_instances/leaf_instances for one prediction using
// the ground-truth encodings.
void write_prediction(const fs::path& out_dir, const std::string& name,
                      const PanopticMap& map);

class DatasetIndex {
 public:
  // Names are the stems of <dir>/<anchor>/*.png, sorted bytewise. The anchor
  // is images/ when present, otherwise semantics/.
  static DatasetIndex open_dir(const fs::path& dir);
  static DatasetIndex open(const fs::path& root, const std::string& split) {
    return open_dir(root / split);
  }

  const fs::path& dir() const { return dir_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  bool has_images() const { return has_images_; }

 private:
  fs::path dir_;
  std::vector<std::string> names_;
  bool has_images_ = false;
};

}  // namespace hps
