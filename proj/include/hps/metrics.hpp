#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hps/dataset.hpp"
#include "hps/panoptic_map.hpp"

namespace hps {

using Mask = std::vector<std::uint8_t>;

// |a ∩ b| / |a ∪ b|; 1 when both are empty. Throws ShapeError.
double iou(const Mask& a, const Mask& b);

struct TpPair {
  std::uint16_t pred = 0;
  std::uint16_t gt = 0;
  double iou = 0;
};

// TP pairs sorted by GT id; every pair has IoU > 0.5.
struct MatchSet {
  std::vector<TpPair> tp;
  std::vector<std::uint16_t> fp;
  std::vector<std::uint16_t> fn;
};

// Matches instances of two id maps (0 = none) at IoU > 0.5. Such a matching
// is unique because instances within a map are disjoint.
MatchSet match_instances(const std::vector<std::uint16_t>& pred,
                         const std::vector<std::uint16_t>& gt);

// 100 * sum IoU / (TP + FP/2 + FN/2); 100 when both sides are empty.
double pq_value(const MatchSet& m);

struct PqResult {
  double pq = 0;
  MatchSet matches;
};

// Instances given as masks; mask k gets id k + 1. Throws DataError when two
// masks of one side overlap and ShapeError on size mismatch.
PqResult pq_class(const std::vector<Mask>& pred, const std::vector<Mask>& gt);

struct IgnoreResult {
  std::vector<std::uint16_t> gt;    // ignored GT instances zeroed
  std::vector<std::uint16_t> pred;  // removed predictions zeroed
  std::vector<std::uint16_t> ignored_gt;
  std::vector<std::uint16_t> removed_pred;
};

// GT instances with more than half their area inside `region` leave the
// matching; predictions with more than half their area inside it are
// removed and count neither as TP nor FP. An empty region is the identity.
IgnoreResult apply_ignore_rule(const std::vector<std::uint16_t>& gt,
                               const std::vector<std::uint16_t>& pred,
                               const Mask& region);

// Pixels of plants labeled partial (3/4) or with visible fraction < 0.5.
Mask ignore_region_of(const HierarchicalSample& gt);

struct ThingTally {
  double iou_sum = 0;
  std::uint64_t tp = 0, fp = 0, fn = 0;
  void add(const MatchSet& m);
  void merge(const ThingTally& o);
  double pq() const;  // 0..100, 100 when nothing was counted
};

struct StuffTally {
  std::uint64_t intersection = 0, uni = 0;
  void merge(const StuffTally& o);
  double iou() const;  // 0..100, 100 when the union is empty
};

struct EvalTally {
  ThingTally crop, leaf;
  StuffTally weed, soil;
  void merge(const EvalTally& o);
};

// Unrounded values on a 0-100 scale.
struct MetricReport {
  double pq_crop = 0, pq_leaf = 0, iou_weed = 0, iou_soil = 0;
  double pq = 0, pq_dagger = 0;
  EvalTally tally;
};

// One image. Predictions use the ground-truth encodings; labels 3/4 in a
// prediction count as crop/weed. Throws ShapeError on size mismatch.
EvalTally evaluate_image(const HierarchicalSample& gt,
                         const HierarchicalSample& pred);
EvalTally evaluate_image(const HierarchicalSample& gt, const PanopticMap& pred);

// Dataset-level: per-class values from summed tallies.
MetricReport aggregate(const std::vector<EvalTally>& images);
MetricReport aggregate_components(double pq_crop, double pq_leaf,
                                  double iou_weed, double iou_soil);

// Evaluates every sample of the ground-truth split directory against the
// prediction directory. Throws DataError on missing files.
MetricReport evaluate_dirs(const std::filesystem::path& pred_dir,
                           const std::filesystem::path& gt_dir,
                           std::size_t workers = 1);

// Half-to-even at `decimals` places; decimal ties within binary roundoff
// count as ties.
double round_half_even(double x, int decimals);

// `metric,value` rows: PQ_dagger, PQ, PQ_crop, PQ_leaf, IoU_weed, IoU_soil.
void write_report_csv(const std::filesystem::path& path, const MetricReport& r);
// `class,tp,fp,fn,iou_sum,intersection,union` rows: crop, leaf, weed, soil.
void write_tally_csv(const std::filesystem::path& path, const MetricReport& r);

}  // namespace hps
