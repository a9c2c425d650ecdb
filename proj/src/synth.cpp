#include "hps/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "hps/errors.hpp"
#include "hps/rng.hpp"

namespace hps {
namespace {

struct Ellipse {
  double cx, cy, a, b, angle;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
  }
  // Squared normalized radius, 0 at the center and 1 on the rim.
  double radius2(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
    return u * u + v * v;
  }
  double extent() const { return std::max(a, b); }
};

struct Rgb {
  double r, g, b;
};

struct Plant {
  bool crop = true;
  std::vector<Ellipse> parts;  // leaves for crops, one blob for weeds
  std::vector<Rgb> colors;
};

// Visible fraction of the unoccluded shape, counted over pixel centers.
double visible_fraction(const Plant& p, std::size_t size) {
  double lo_x = 1e9, hi_x = -1e9, lo_y = 1e9, hi_y = -1e9;
  for (const auto& e : p.parts) {
    lo_x = std::min(lo_x, e.cx - e.extent());
    hi_x = std::max(hi_x, e.cx + e.extent());
    lo_y = std::min(lo_y, e.cy - e.extent());
    hi_y = std::max(hi_y, e.cy + e.extent());
  }
  std::size_t inside = 0, total = 0;
  const auto s = static_cast<long>(size);
  for (long y = static_cast<long>(std::floor(lo_y)); y <= static_cast<long>(hi_y); ++y) {
    for (long x = static_cast<long>(std::floor(lo_x)); x <= static_cast<long>(hi_x); ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      bool hit = false;
      for (const auto& e : p.parts) hit = hit || e.contains(px, py);
      if (!hit) continue;
      ++total;
      if (x >= 0 && y >= 0 && x < s && y < s) ++inside;
    }
  }
  return total ? static_cast<double>(inside) / static_cast<double>(total) : 0.0;
}

Plant make_crop(Rng& rng, double size, bool fully_inside, std::size_t leaves) {
  const double radius = rng.uniform(0.15, 0.25) * size;
  const double reach = 1.1 * radius;
  double cx, cy;
  if (fully_inside) {
    cx = rng.uniform(reach + 1, size - reach - 1);
    cy = rng.uniform(reach + 1, size - reach - 1);
  } else {
    cx = rng.uniform(-0.1 * size, 1.1 * size);
    cy = rng.uniform(-0.1 * size, 1.1 * size);
  }
  Plant p;
  p.crop = true;
  const double base = rng.uniform(0, 2 * std::numbers::pi);
  for (std::size_t k = 0; k < leaves; ++k) {
    const double theta = base + 2 * std::numbers::pi * static_cast<double>(k) /
                                    static_cast<double>(leaves) +
                         rng.uniform(-0.2, 0.2);
    const double len = radius * rng.uniform(0.5, 0.6);
    const double dist = len * rng.uniform(0.85, 1.0);
    Ellipse e{cx + dist * std::cos(theta), cy + dist * std::sin(theta), len,
              len * rng.uniform(0.45, 0.6), theta};
    p.parts.push_back(e);
    p.colors.push_back({rng.uniform(40, 80), rng.uniform(140, 190),
                        rng.uniform(40, 70)});
  }
  return p;
}

Plant make_weed(Rng& rng, double size) {
  Plant p;
  p.crop = false;
  const double r = rng.uniform(0.03, 0.06) * size;
  p.parts.push_back({rng.uniform(0, size), rng.uniform(0, size), r,
                     r * rng.uniform(0.6, 1.0), rng.uniform(0, std::numbers::pi)});
  p.colors.push_back({rng.uniform(150, 190), rng.uniform(170, 210),
                      rng.uniform(30, 60)});
  return p;
}

std::uint8_t clamp8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

HierarchicalSample synth_sample(std::size_t size, std::uint64_t seed,
                                std::size_t max_leaves, const std::string& name) {
  if (size == 0 || size % 32 != 0) {
    throw ConfigError("synth image size must be a positive multiple of 32");
  }
  if (max_leaves < 3) throw ConfigError("synth max_leaves must be at least 3");
  const double s = static_cast<double>(size);
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(mix_seed(seed, attempt));
    std::vector<Plant> plants;
    const int weeds = rng.uniform_int(0, 6);
    for (int i = 0; i < weeds; ++i) plants.push_back(make_weed(rng, s));
    const int crops = rng.uniform_int(1, 4);
    std::size_t leaf_budget = max_leaves;
    for (int i = 0; i < crops && leaf_budget >= 3; ++i) {
      const std::size_t want = static_cast<std::size_t>(rng.uniform_int(3, 8));
      const std::size_t n = std::min(want, leaf_budget);
      leaf_budget -= n;
      plants.push_back(make_crop(rng, s, i == 0, n));
    }
    const std::size_t first_crop = static_cast<std::size_t>(weeds);

    HierarchicalSample out;
    out.name = name;
    out.height = out.width = size;
    const std::size_t px = size * size;
    out.semantics.assign(px, kSoil);
    out.plant_instances.assign(px, 0);
    out.leaf_instances.assign(px, 0);
    out.image.resize(px * 3);

    for (std::size_t i = 0; i < px; ++i) {
      const double n = rng.uniform(-10, 10);
      const double mottled =
          6 * std::sin(0.9 * static_cast<double>(i % size)) *
          std::cos(0.7 * static_cast<double>(i / size));
      out.image[i * 3 + 0] = clamp8(120 + n + mottled);
      out.image[i * 3 + 1] = clamp8(90 + n + mottled);
      out.image[i * 3 + 2] = clamp8(65 + n);
    }

    // Painter's order: weeds first, later crops occlude earlier ones.
    std::uint16_t leaf_id = 0;
    std::vector<std::uint8_t> labels(plants.size());
    for (std::size_t pi = 0; pi < plants.size(); ++pi) {
      const Plant& p = plants[pi];
      const double vis = visible_fraction(p, size);
      const auto plant_id = static_cast<std::uint16_t>(pi + 1);
      if (vis < 1.0) out.visibility[plant_id] = vis;
      const bool partial = vis < 0.5;
      labels[pi] = p.crop ? (partial ? kPartialCrop : kCrop)
                          : (partial ? kPartialWeed : kWeed);
      for (std::size_t k = 0; k < p.parts.size(); ++k) {
        const Ellipse& e = p.parts[k];
        const Rgb& col = p.colors[k];
        if (p.crop) ++leaf_id;
        const double r = e.extent();
        const long x0 = std::max(0L, static_cast<long>(std::floor(e.cx - r)));
        const long x1 = std::min(static_cast<long>(size) - 1, static_cast<long>(e.cx + r));
        const long y0 = std::max(0L, static_cast<long>(std::floor(e.cy - r)));
        const long y1 = std::min(static_cast<long>(size) - 1, static_cast<long>(e.cy + r));
        for (long y = y0; y <= y1; ++y) {
          for (long x = x0; x <= x1; ++x) {
            const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
            if (!e.contains(fx, fy)) continue;
            const std::size_t i = static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x);
            const double shade = 1.0 - 0.45 * e.radius2(fx, fy);
            const double n = rng.uniform(-6, 6);
            out.image[i * 3 + 0] = clamp8(col.r * shade + n);
            out.image[i * 3 + 1] = clamp8(col.g * shade + n);
            out.image[i * 3 + 2] = clamp8(col.b * shade + n);
            out.semantics[i] = labels[pi];
            out.plant_instances[i] = plant_id;
            out.leaf_instances[i] = p.crop ? leaf_id : 0;
          }
        }
      }
    }

    // Drop visibility rows of plants that ended up fully occluded.
    const auto present = instance_ids(out.plant_instances);
    std::erase_if(out.visibility,
                  [&](const auto& kv) { return !present.count(kv.first); });

    // The first crop must keep at least 3 visible leaves.
    std::set<std::uint16_t> first_leaves;
    const auto first_id = static_cast<std::uint16_t>(first_crop + 1);
    for (std::size_t i = 0; i < px; ++i) {
      if (out.plant_instances[i] == first_id && out.leaf_instances[i]) {
        first_leaves.insert(out.leaf_instances[i]);
      }
    }
    if (first_leaves.size() >= 3) return out;
  }
}

void synth_generate(const fs::path& root, const SynthOptions& options) {
  const fs::path dir = root / options.split;
  for (std::size_t i = 0; i < options.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05zu", i);
    write_sample_dir(dir, synth_sample(options.size, mix_seed(options.seed, i),
                                       options.max_leaves, name));
  }
}

}  // namespace hps
