#pragma once

#include <cstddef>
#include <vector>

#include "hps/dataset.hpp"
#include "hps/model.hpp"

namespace hps {

struct LossWeights {
  double cls = 1.0;
  double mask = 2.5;
  double no_object = 0.1;  // class-loss weight of unmatched queries

  void validate() const;  // throws ConfigError
};

// How full-resolution GT masks are reduced to the mask-logit grid.
enum class PoolMode { max, average };

// Targets of one stream on the loss grid. masks is [G, height*width] with
// values in [0, 1].
struct StreamTargets {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> classes;
  std::vector<double> masks;

  std::size_t count() const { return classes.size(); }
  void add(int cls, const std::vector<double>& mask);
};

struct GroundTruthSegments {
  StreamTargets plant;
  StreamTargets leaf;
};

// Plant stream: one segment per crop instance (class 1) plus merged weed
// (class 2) and soil (class 0) segments when present. Leaf stream: one
// class-0 segment per leaf. Partial labels count as their full class.
GroundTruthSegments ground_truth_from(const HierarchicalSample& sample,
                                      std::size_t stride,
                                      PoolMode pool = PoolMode::max);

// Pools a full-resolution binary mask [h*w] by `stride`.
std::vector<double> pool_mask(const std::vector<std::uint8_t>& mask,
                              std::size_t h, std::size_t w, std::size_t stride,
                              PoolMode pool);

// Mean stable sigmoid BCE over pixels.
template <typename T>
double bce_mask_loss(const Tensor<T>& logits, const Tensor<T>& target);

// 1 - (2 sum(p t) + 1) / (sum p + sum t + 1).
template <typename T>
double dice_loss(const Tensor<T>& probs, const Tensor<T>& target);

// Mean over queries of -log p(target); targets equal to K (no-object) are
// weighted by no_object_weight.
template <typename T>
double class_loss(const Tensor<T>& class_probs, const std::vector<int>& targets,
                  double no_object_weight = 0.1);

// cost[i, j] = w.cls * -p_i(c_j) + w.mask * (bce(m_i, t_j) + dice(m_i, t_j)),
// row-major [N, G]. Throws ShapeError when G > N or the grids differ.
template <typename T>
std::vector<double> match_cost_matrix(const SegmentPrediction<T>& pred,
                                      const StreamTargets& gt,
                                      const LossWeights& w);

// Records assignments on one evaluation and replays them later so that
// finite differences see a fixed matching.
struct MatchTrace {
  enum class Mode { off, record, replay };
  Mode mode = Mode::off;
  std::vector<std::vector<std::size_t>> assignments;
  std::size_t cursor = 0;
};

struct LayerLoss {
  Stream stream = Stream::plant;
  int layer = 0;
  double cls = 0;
  double mask = 0;
  std::size_t matched = 0;
};

// Component sums over supervised layers and the weighted total.
struct LossBreakdown {
  double cls_plant = 0;
  double mask_plant = 0;
  double cls_leaf = 0;
  double mask_leaf = 0;
  double total = 0;
  std::vector<LayerLoss> layers;
};

// w.cls * (cls_plant + cls_leaf) + w.mask * (mask_plant + mask_leaf).
inline double combine_components(const LossBreakdown& b, const LossWeights& w) {
  return w.cls * (b.cls_plant + b.cls_leaf) + w.mask * (b.mask_plant + b.mask_leaf);
}

template <typename T>
struct LossResult {
  Var<T> total;
  LossBreakdown breakdown;
};

// Independent matching per stream and supervised layer, then
// total = sum over layers of w.cls * L_cls + w.mask * (L_bce + L_dice) for
// both streams, each layer weighted equally.
template <typename T>
LossResult<T> total_loss(Graph<T>& g, const ModelOutput<T>& output,
                         const GroundTruthSegments& gt, const LossWeights& w,
                         MatchTrace* trace = nullptr);

}  // namespace hps
