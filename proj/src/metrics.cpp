#include "hps/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "hps/errors.hpp"

namespace hps {
namespace {

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": sizes " + std::to_string(a) +
                     " and " + std::to_string(b) + " differ");
  }
}

std::unordered_map<std::uint16_t, std::uint64_t> areas(
    const std::vector<std::uint16_t>& ids) {
  std::unordered_map<std::uint16_t, std::uint64_t> out;
  for (std::uint16_t id : ids) {
    if (id) ++out[id];
  }
  return out;
}

std::vector<std::uint16_t> sorted_keys(
    const std::unordered_map<std::uint16_t, std::uint64_t>& m) {
  std::vector<std::uint16_t> k;
  k.reserve(m.size());
  for (const auto& [id, a] : m) k.push_back(id);
  std::sort(k.begin(), k.end());
  return k;
}

bool is_crop(std::uint8_t s) { return s == kCrop || s == kPartialCrop; }
bool is_weed(std::uint8_t s) { return s == kWeed || s == kPartialWeed; }

std::vector<std::uint16_t> crop_ids(const std::vector<std::uint8_t>& sem,
                                    const std::vector<std::uint16_t>& plant) {
  std::vector<std::uint16_t> out(plant.size(), 0);
  for (std::size_t i = 0; i < plant.size(); ++i) {
    if (is_crop(sem[i])) out[i] = plant[i];
  }
  return out;
}

StuffTally stuff(const std::vector<std::uint8_t>& gt,
                 const std::vector<std::uint8_t>& pred, bool (*member)(std::uint8_t)) {
  StuffTally t;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool a = member(gt[i]), b = member(pred[i]);
    t.intersection += a && b;
    t.uni += a || b;
  }
  return t;
}

bool is_soil(std::uint8_t s) { return s == kSoil; }

EvalTally evaluate_maps(const HierarchicalSample& gt,
                        const std::vector<std::uint8_t>& sem,
                        const std::vector<std::uint16_t>& plant,
                        const std::vector<std::uint16_t>& leaf) {
  const std::size_t n = gt.pixels();
  require_same_size(sem.size(), n, "evaluate_image semantics");
  require_same_size(plant.size(), n, "evaluate_image plant instances");
  require_same_size(leaf.size(), n, "evaluate_image leaf instances");
  const Mask region = ignore_region_of(gt);
  EvalTally t;
  {
    IgnoreResult r = apply_ignore_rule(crop_ids(gt.semantics, gt.plant_instances),
                                       crop_ids(sem, plant), region);
    t.crop.add(match_instances(r.pred, r.gt));
  }
  {
    IgnoreResult r = apply_ignore_rule(gt.leaf_instances, leaf, region);
    t.leaf.add(match_instances(r.pred, r.gt));
  }
  t.weed = stuff(gt.semantics, sem, is_weed);
  t.soil = stuff(gt.semantics, sem, is_soil);
  return t;
}

}  // namespace

double iou(const Mask& a, const Mask& b) {
  require_same_size(a.size(), b.size(), "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MatchSet match_instances(const std::vector<std::uint16_t>& pred,
                         const std::vector<std::uint16_t>& gt) {
  require_same_size(pred.size(), gt.size(), "match_instances");
  const auto pa = areas(pred), ga = areas(gt);
  std::unordered_map<std::uint32_t, std::uint64_t> inter;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (pred[i] && gt[i]) ++inter[(std::uint32_t{pred[i]} << 16) | gt[i]];
  }
  MatchSet m;
  std::unordered_map<std::uint16_t, bool> pred_used, gt_used;
  for (const auto& [key, count] : inter) {
    const auto p = static_cast<std::uint16_t>(key >> 16);
    const auto g = static_cast<std::uint16_t>(key & 0xffff);
    const std::uint64_t uni = pa.at(p) + ga.at(g) - count;
    // IoU > 0.5 <=> 2 * intersection > union, decided in integers.
    if (2 * count > uni) {
      m.tp.push_back({p, g, static_cast<double>(count) / static_cast<double>(uni)});
      pred_used[p] = gt_used[g] = true;
    }
  }
  std::sort(m.tp.begin(), m.tp.end(),
            [](const TpPair& a, const TpPair& b) { return a.gt < b.gt; });
  for (std::uint16_t p : sorted_keys(pa)) {
    if (!pred_used.count(p)) m.fp.push_back(p);
  }
  for (std::uint16_t g : sorted_keys(ga)) {
    if (!gt_used.count(g)) m.fn.push_back(g);
  }
  return m;
}

double pq_value(const MatchSet& m) {
  ThingTally t;
  t.add(m);
  return t.pq();
}

PqResult pq_class(const std::vector<Mask>& pred, const std::vector<Mask>& gt) {
  auto to_ids = [](const std::vector<Mask>& masks, std::size_t n,
                   const char* side) {
    std::vector<std::uint16_t> ids(n, 0);
    if (masks.size() > 0xffff) {
      throw DataError(std::string(side) + ": too many instances");
    }
    for (std::size_t k = 0; k < masks.size(); ++k) {
      require_same_size(masks[k].size(), n, "pq_class");
      for (std::size_t i = 0; i < n; ++i) {
        if (!masks[k][i]) continue;
        if (ids[i]) {
          throw DataError(std::string(side) + " instances " +
                          std::to_string(ids[i] - 1) + " and " +
                          std::to_string(k) + " overlap at pixel " +
                          std::to_string(i));
        }
        ids[i] = static_cast<std::uint16_t>(k + 1);
      }
    }
    return ids;
  };
  std::size_t n = 0;
  if (!pred.empty()) n = pred.front().size();
  else if (!gt.empty()) n = gt.front().size();
  PqResult r;
  r.matches = match_instances(to_ids(pred, n, "prediction"), to_ids(gt, n, "ground truth"));
  r.pq = pq_value(r.matches);
  return r;
}

IgnoreResult apply_ignore_rule(const std::vector<std::uint16_t>& gt,
                               const std::vector<std::uint16_t>& pred,
                               const Mask& region) {
  IgnoreResult r{gt, pred, {}, {}};
  if (region.empty()) return r;
  require_same_size(gt.size(), region.size(), "apply_ignore_rule");
  require_same_size(pred.size(), region.size(), "apply_ignore_rule");
  auto mostly_inside = [&](const std::vector<std::uint16_t>& ids) {
    std::unordered_map<std::uint16_t, std::uint64_t> inside;
    const auto total = areas(ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] && region[i]) ++inside[ids[i]];
    }
    std::vector<std::uint16_t> out;
    for (std::uint16_t id : sorted_keys(total)) {
      auto it = inside.find(id);
      if (it != inside.end() && 2 * it->second > total.at(id)) out.push_back(id);
    }
    return out;
  };
  auto erase = [](std::vector<std::uint16_t>& ids,
                  const std::vector<std::uint16_t>& drop) {
    if (drop.empty()) return;
    for (auto& id : ids) {
      if (id && std::binary_search(drop.begin(), drop.end(), id)) id = 0;
    }
  };
  r.ignored_gt = mostly_inside(gt);
  r.removed_pred = mostly_inside(pred);
  erase(r.gt, r.ignored_gt);
  erase(r.pred, r.removed_pred);
  return r;
}

Mask ignore_region_of(const HierarchicalSample& gt) {
  Mask region(gt.pixels(), 0);
  bool any = false;
  for (std::size_t i = 0; i < region.size(); ++i) {
    const std::uint8_t s = gt.semantics[i];
    bool ignore = s == kPartialCrop || s == kPartialWeed;
    if (!ignore && gt.plant_instances[i] && !gt.visibility.empty()) {
      auto it = gt.visibility.find(gt.plant_instances[i]);
      ignore = it != gt.visibility.end() && it->second < 0.5;
    }
    region[i] = ignore;
    any = any || ignore;
  }
  if (!any) region.clear();
  return region;
}

void ThingTally::add(const MatchSet& m) {
  for (const TpPair& p : m.tp) iou_sum += p.iou;
  tp += m.tp.size();
  fp += m.fp.size();
  fn += m.fn.size();
}

void ThingTally::merge(const ThingTally& o) {
  iou_sum += o.iou_sum;
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
}

double ThingTally::pq() const {
  if (tp + fp + fn == 0) return 100.0;
  const double denom = static_cast<double>(tp) +
                       0.5 * static_cast<double>(fp) +
                       0.5 * static_cast<double>(fn);
  return 100.0 * iou_sum / denom;
}

void StuffTally::merge(const StuffTally& o) {
  intersection += o.intersection;
  uni += o.uni;
}

double StuffTally::iou() const {
  if (uni == 0) return 100.0;
  return 100.0 * static_cast<double>(intersection) / static_cast<double>(uni);
}

void EvalTally::merge(const EvalTally& o) {
  crop.merge(o.crop);
  leaf.merge(o.leaf);
  weed.merge(o.weed);
  soil.merge(o.soil);
}

EvalTally evaluate_image(const HierarchicalSample& gt,
                         const HierarchicalSample& pred) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError(gt.name + ": prediction is " + std::to_string(pred.width) +
                     "x" + std::to_string(pred.height) + ", ground truth " +
                     std::to_string(gt.width) + "x" + std::to_string(gt.height));
  }
  return evaluate_maps(gt, pred.semantics, pred.plant_instances,
                       pred.leaf_instances);
}

EvalTally evaluate_image(const HierarchicalSample& gt, const PanopticMap& pred) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError(gt.name + ": prediction size differs from ground truth");
  }
  return evaluate_maps(gt, pred.semantic, pred.plant_instance, pred.leaf_instance);
}

MetricReport aggregate(const std::vector<EvalTally>& images) {
  EvalTally total;
  for (const auto& t : images) total.merge(t);
  MetricReport r = aggregate_components(total.crop.pq(), total.leaf.pq(),
                                        total.weed.iou(), total.soil.iou());
  r.tally = total;
  return r;
}

MetricReport aggregate_components(double pq_crop, double pq_leaf,
                                  double iou_weed, double iou_soil) {
  MetricReport r;
  r.pq_crop = pq_crop;
  r.pq_leaf = pq_leaf;
  r.iou_weed = iou_weed;
  r.iou_soil = iou_soil;
  r.pq = (pq_crop + pq_leaf) / 2.0;
  r.pq_dagger = (pq_crop + pq_leaf + iou_weed + iou_soil) / 4.0;
  return r;
}

MetricReport evaluate_dirs(const std::filesystem::path& pred_dir,
                           const std::filesystem::path& gt_dir,
                           std::size_t workers) {
  const DatasetIndex index = DatasetIndex::open_dir(gt_dir);
  const std::size_t n = index.size();
  std::vector<EvalTally> tallies(n);
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&](std::size_t first) {
    LoadOptions opts;
    opts.with_image = false;
    for (std::size_t i = first; i < n; i += workers) {
      try {
        const std::string& name = index.names()[i];
        tallies[i] = evaluate_image(load_sample_dir(gt_dir, name, opts),
                                    load_sample_dir(pred_dir, name, opts));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return aggregate(tallies);
}

double round_half_even(double x, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double y = x * scale;
  const double f = std::floor(y);
  const double frac = y - f;
  double r;
  if (std::abs(frac - 0.5) <= 1e-9 * std::max(1.0, std::abs(y))) {
    r = std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
  } else {
    r = std::round(y);
  }
  return r / scale;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", round_half_even(v, 2));
  return buf;
}

}  // namespace

void write_report_csv(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream out = open_out(path);
  out << "metric,value\n"
      << "PQ_dagger," << fixed2(r.pq_dagger) << "\n"
      << "PQ," << fixed2(r.pq) << "\n"
      << "PQ_crop," << fixed2(r.pq_crop) << "\n"
      << "PQ_leaf," << fixed2(r.pq_leaf) << "\n"
      << "IoU_weed," << fixed2(r.iou_weed) << "\n"
      << "IoU_soil," << fixed2(r.iou_soil) << "\n";
  if (!out) throw DataError("failed writing " + path.string());
}

void write_tally_csv(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream out = open_out(path);
  char buf[160];
  out << "class,tp,fp,fn,iou_sum,intersection,union\n";
  auto thing = [&](const char* name, const ThingTally& t) {
    std::snprintf(buf, sizeof buf, "%s,%llu,%llu,%llu,%.6f,,\n", name,
                  static_cast<unsigned long long>(t.tp),
                  static_cast<unsigned long long>(t.fp),
                  static_cast<unsigned long long>(t.fn), t.iou_sum);
    out << buf;
  };
  auto stuff_row = [&](const char* name, const StuffTally& t) {
    std::snprintf(buf, sizeof buf, "%s,,,,,%llu,%llu\n", name,
                  static_cast<unsigned long long>(t.intersection),
                  static_cast<unsigned long long>(t.uni));
    out << buf;
  };
  thing("crop", r.tally.crop);
  thing("leaf", r.tally.leaf);
  stuff_row("weed", r.tally.weed);
  stuff_row("soil", r.tally.soil);
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace hps
