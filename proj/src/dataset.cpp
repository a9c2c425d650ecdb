#include "hps/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "hps/errors.hpp"
#include "hps/png_io.hpp"

namespace hps {
namespace {

const char* kLabelDirs[] = {"semantics", "plant_instances", "leaf_instances"};

fs::path png_path(const fs::path& dir, const char* sub, const std::string& name) {
  return dir / sub / (name + ".png");
}

std::string at_pixel(std::size_t i, std::size_t w) {
  return "(" + std::to_string(i % w) + ", " + std::to_string(i / w) + ")";
}

PngImage read_expect(const fs::path& path, std::size_t& h, std::size_t& w) {
  PngImage img = read_png(path);
  if (h == 0 && w == 0) {
    h = img.height;
    w = img.width;
  } else if (img.height != h || img.width != w) {
    throw DataError("dimension mismatch: " + path.string() + " is " +
                    std::to_string(img.width) + "x" +
                    std::to_string(img.height) + ", expected " +
                    std::to_string(w) + "x" + std::to_string(h));
  }
  return img;
}

std::vector<std::uint16_t> gray16(const PngImage& img, const fs::path& path) {
  if (img.channels != 1) {
    throw DataError("instance map must be single-channel: " + path.string());
  }
  return img.samples;
}

std::map<std::uint16_t, double> read_visibility(const fs::path& path) {
  std::map<std::uint16_t, double> out;
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "plant_id,fraction") continue;
    unsigned id = 0;
    double frac = 0;
    char comma = 0;
    std::istringstream ss(line);
    if (!(ss >> id >> comma >> frac) || comma != ',' || id > 0xffff ||
        frac < 0 || frac > 1) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": expected plant_id,fraction");
    }
    out[static_cast<std::uint16_t>(id)] = frac;
  }
  return out;
}

}  // namespace

std::set<std::uint16_t> instance_ids(const std::vector<std::uint16_t>& map) {
  std::set<std::uint16_t> ids;
  for (std::uint16_t v : map) {
    if (v) ids.insert(v);
  }
  return ids;
}

std::vector<std::string> validate_sample(const HierarchicalSample& s) {
  std::vector<std::string> issues;
  const std::size_t n = s.pixels();
  const std::size_t w = s.width;
  std::size_t bad_label = n, leaf_off = n, plant_missing = n, plant_extra = n;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t sem = s.semantics[i];
    const bool plant_sem = sem >= kCrop && sem <= kPartialWeed;
    if (sem > kPartialWeed && bad_label == n) bad_label = i;
    if (s.leaf_instances[i] && sem != kCrop && sem != kPartialCrop &&
        leaf_off == n) {
      leaf_off = i;
    }
    if (plant_sem && !s.plant_instances[i] && plant_missing == n) {
      plant_missing = i;
    }
    if (!plant_sem && s.plant_instances[i] && plant_extra == n) plant_extra = i;
  }
  if (bad_label < n) {
    issues.push_back("semantic label " +
                     std::to_string(s.semantics[bad_label]) + " out of range at " +
                     at_pixel(bad_label, w));
  }
  if (leaf_off < n) {
    issues.push_back("leaf instance outside crop at " + at_pixel(leaf_off, w));
  }
  if (plant_missing < n) {
    issues.push_back("plant pixel without plant instance at " +
                     at_pixel(plant_missing, w));
  }
  if (plant_extra < n) {
    issues.push_back("plant instance on soil at " + at_pixel(plant_extra, w));
  }
  return issues;
}

std::vector<std::uint8_t> read_rgb_image(const fs::path& path, std::size_t& height,
                                         std::size_t& width) {
  PngImage img = read_png(path);
  if (img.channels < 3) throw DataError("image must be RGB: " + path.string());
  height = img.height;
  width = img.width;
  const int shift = img.bit_depth == 16 ? 8 : 0;
  const auto channels = static_cast<std::size_t>(img.channels);
  std::vector<std::uint8_t> rgb(height * width * 3);
  for (std::size_t i = 0; i < height * width; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      rgb[i * 3 + c] = static_cast<std::uint8_t>(img.samples[i * channels + c] >> shift);
    }
  }
  return rgb;
}

HierarchicalSample load_sample_dir(const fs::path& dir, const std::string& name,
                                   const LoadOptions& options,
                                   std::vector<std::string>* warnings) {
  HierarchicalSample s;
  s.name = name;
  std::size_t h = 0, w = 0;
  if (options.with_image) {
    s.image = read_rgb_image(png_path(dir, "images", name), h, w);
  }
  {
    const fs::path p = png_path(dir, kLabelDirs[0], name);
    PngImage sem = read_expect(p, h, w);
    if (sem.channels != 1 || sem.bit_depth != 8) {
      throw DataError("semantics must be 8-bit grayscale: " + p.string());
    }
    s.semantics.assign(sem.samples.begin(), sem.samples.end());
  }
  {
    const fs::path p = png_path(dir, kLabelDirs[1], name);
    s.plant_instances = gray16(read_expect(p, h, w), p);
  }
  {
    const fs::path p = png_path(dir, kLabelDirs[2], name);
    s.leaf_instances = gray16(read_expect(p, h, w), p);
  }
  s.height = h;
  s.width = w;
  const fs::path vis = dir / "visibility" / (name + ".csv");
  if (fs::exists(vis)) s.visibility = read_visibility(vis);

  std::vector<std::string> issues = validate_sample(s);
  if (!issues.empty()) {
    if (options.strictness == Strictness::strict) {
      throw DataError(name + ": " + issues.front());
    }
    if (warnings) {
      for (auto& msg : issues) warnings->push_back(name + ": " + msg);
    }
  }
  return s;
}

void write_sample_dir(const fs::path& dir, const HierarchicalSample& s) {
  for (const char* sub : {"images", "semantics", "plant_instances",
                          "leaf_instances"}) {
    fs::create_directories(dir / sub);
  }
  write_png_rgb8(png_path(dir, "images", s.name), s.width, s.height, s.image);
  write_png_gray8(png_path(dir, kLabelDirs[0], s.name), s.width, s.height,
                  s.semantics);
  write_png_gray16(png_path(dir, kLabelDirs[1], s.name), s.width, s.height,
                   s.plant_instances);
  write_png_gray16(png_path(dir, kLabelDirs[2], s.name), s.width, s.height,
                   s.leaf_instances);
  if (!s.visibility.empty()) {
    fs::create_directories(dir / "visibility");
    const fs::path p = dir / "visibility" / (s.name + ".csv");
    std::ofstream out(p);
    if (!out) throw DataError("cannot write " + p.string());
    out << "plant_id,fraction\n";
    for (const auto& [id, frac] : s.visibility) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%u,%.6f\n", static_cast<unsigned>(id), frac);
      out << buf;
    }
  }
}

void write_prediction(const fs::path& out_dir, const std::string& name,
                      const PanopticMap& map) {
  std::size_t plants = 0, leaves = 0;
  for (const Segment& seg : map.segments) {
    (seg.stream == 0 ? plants : leaves) += seg.id ? 1 : 0;
  }
  if (plants > 0xffff || leaves > 0xffff) {
    throw DataError(name + ": more than 65535 instances do not fit 16-bit ids");
  }
  std::error_code ec;
  for (const char* sub : kLabelDirs) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) {
      throw DataError("cannot create " + (out_dir / sub).string() + ": " +
                      ec.message());
    }
  }
  write_png_gray8(png_path(out_dir, kLabelDirs[0], name), map.width,
                  map.height, map.semantic);
  write_png_gray16(png_path(out_dir, kLabelDirs[1], name), map.width,
                   map.height, map.plant_instance);
  write_png_gray16(png_path(out_dir, kLabelDirs[2], name), map.width,
                   map.height, map.leaf_instance);
}

DatasetIndex DatasetIndex::open_dir(const fs::path& dir) {
  DatasetIndex index;
  index.dir_ = dir;
  index.has_images_ = fs::is_directory(dir / "images");
  const fs::path anchor = dir / (index.has_images_ ? "images" : "semantics");
  if (!fs::is_directory(anchor)) {
    throw DataError("not a dataset split directory: " + dir.string());
  }
  for (const auto& entry : fs::directory_iterator(anchor)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      index.names_.push_back(entry.path().stem().string());
    }
  }
  std::sort(index.names_.begin(), index.names_.end());
  for (const std::string& name : index.names_) {
    for (const char* sub : kLabelDirs) {
      if (!fs::exists(png_path(dir, sub, name))) {
        throw DataError("missing file: " + png_path(dir, sub, name).string());
      }
    }
  }
  return index;
}

}  // namespace hps
