#include "hps/loss.hpp"

#include <Eigen/Dense>
#include <algorithm>

#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "hps/hungarian.hpp"

namespace hps {

using MatrixXdR =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void LossWeights::validate() const {
  if (!(cls >= 0) || !(mask >= 0) || !(no_object >= 0)) {
    throw ConfigError("loss weights must be non-negative");
  }
}

void StreamTargets::add(int cls, const std::vector<double>& mask) {
  if (mask.size() != height * width) {
    throw ShapeError("target mask has " + std::to_string(mask.size()) +
                     " pixels, expected " + std::to_string(height * width));
  }
  classes.push_back(cls);
  masks.insert(masks.end(), mask.begin(), mask.end());
}

std::vector<double> pool_mask(const std::vector<std::uint8_t>& mask,
                              std::size_t h, std::size_t w, std::size_t stride,
                              PoolMode pool) {
  if (stride == 0 || h % stride != 0 || w % stride != 0) {
    throw ShapeError("pool_mask: " + std::to_string(h) + "x" +
                     std::to_string(w) + " is not divisible by stride " +
                     std::to_string(stride));
  }
  const std::size_t oh = h / stride, ow = w / stride;
  const double cell = static_cast<double>(stride * stride);
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask[y * w + x]) continue;
      double& o = out[(y / stride) * ow + x / stride];
      o = pool == PoolMode::max ? 1.0 : o + 1.0 / cell;
    }
  }
  return out;
}

GroundTruthSegments ground_truth_from(const HierarchicalSample& s,
                                      std::size_t stride, PoolMode pool) {
  const std::size_t h = s.height, w = s.width, n = s.pixels();
  GroundTruthSegments gt;
  gt.plant.height = gt.leaf.height = h / stride;
  gt.plant.width = gt.leaf.width = w / stride;

  std::vector<std::uint8_t> soil(n, 0), weed(n, 0);
  std::map<std::uint16_t, std::vector<std::uint8_t>> crops, leaves;
  bool any_soil = false, any_weed = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t sem = s.semantics[i];
    if (sem == kSoil) {
      soil[i] = 1;
      any_soil = true;
    } else if (sem == kWeed || sem == kPartialWeed) {
      weed[i] = 1;
      any_weed = true;
    } else if ((sem == kCrop || sem == kPartialCrop) && s.plant_instances[i]) {
      auto& m = crops[s.plant_instances[i]];
      if (m.empty()) m.assign(n, 0);
      m[i] = 1;
    }
    if (s.leaf_instances[i]) {
      auto& m = leaves[s.leaf_instances[i]];
      if (m.empty()) m.assign(n, 0);
      m[i] = 1;
    }
  }
  if (any_soil) gt.plant.add(kSoil, pool_mask(soil, h, w, stride, pool));
  for (const auto& [id, m] : crops) {
    gt.plant.add(kCrop, pool_mask(m, h, w, stride, pool));
  }
  if (any_weed) gt.plant.add(kWeed, pool_mask(weed, h, w, stride, pool));
  for (const auto& [id, m] : leaves) {
    gt.leaf.add(0, pool_mask(m, h, w, stride, pool));
  }
  return gt;
}

template <typename T>
double bce_mask_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("bce_mask_loss: " + shape_str(logits.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  if (logits.empty()) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    sum += softplus(x) - static_cast<double>(target[i]) * x;
  }
  return sum / static_cast<double>(logits.size());
}

template <typename T>
double dice_loss(const Tensor<T>& probs, const Tensor<T>& target) {
  if (probs.shape() != target.shape()) {
    throw ShapeError("dice_loss: " + shape_str(probs.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  double inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    inter += static_cast<double>(probs[i]) * target[i];
    sp += probs[i];
    st += target[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
}

template <typename T>
double class_loss(const Tensor<T>& class_probs, const std::vector<int>& targets,
                  double no_object_weight) {
  require_rank(class_probs.shape(), 2, "class_loss");
  const std::size_t n = class_probs.dim(0), k1 = class_probs.dim(1);
  if (targets.size() != n) {
    throw ShapeError("class_loss: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " queries");
  }
  if (n == 0) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= k1) {
      throw ShapeError("class_loss: target " + std::to_string(t) +
                       " out of range [0, " + std::to_string(k1) + ")");
    }
    const double wgt = static_cast<std::size_t>(t) == k1 - 1 ? no_object_weight : 1.0;
    sum += wgt * -std::log(static_cast<double>(class_probs.at(i, static_cast<std::size_t>(t))));
  }
  return sum / static_cast<double>(n);
}

namespace {

// True when the targets sit on a finer grid than the prediction, in which
// case logits are bilinearly upsampled to the target grid before scoring.
template <typename T>
bool needs_upsampling(const SegmentPrediction<T>& pred, const StreamTargets& gt) {
  if (pred.height == 0 || pred.width == 0) return false;  // grid unknown
  if (gt.height == pred.height && gt.width == pred.width) return false;
  if (gt.height < pred.height || gt.width < pred.width ||
      gt.height % pred.height || gt.width % pred.width) {
    throw ShapeError("target grid " + std::to_string(gt.height) + "x" +
                     std::to_string(gt.width) +
                     " is not an integer multiple of the prediction grid " +
                     std::to_string(pred.height) + "x" + std::to_string(pred.width));
  }
  return true;
}

}  // namespace

template <typename T>
std::vector<double> match_cost_matrix(const SegmentPrediction<T>& pred,
                                      const StreamTargets& gt,
                                      const LossWeights& w) {
  Tensor<T> fine;
  if (needs_upsampling(pred, gt)) {
    Tensor<T> coarse = pred.mask_logits->value;
    const std::size_t rows = coarse.dim(0);
    coarse.reshape({rows, pred.height, pred.width});
    fine = resize_bilinear(coarse, gt.height, gt.width);
    fine.reshape({rows, gt.height * gt.width});
  }
  const Tensor<T>& logits = fine.size() ? fine : pred.mask_logits->value;
  const std::size_t n = logits.dim(0), p = logits.dim(1), g = gt.count();
  if (g > n) {
    throw ShapeError("match_cost_matrix: " + std::to_string(g) +
                     " ground-truth segments exceed capacity of " +
                     std::to_string(n) + " queries");
  }
  if (p != gt.height * gt.width) {
    throw ShapeError("match_cost_matrix: prediction grid has " +
                     std::to_string(p) + " pixels, targets " +
                     std::to_string(gt.height * gt.width));
  }
  if (g == 0) return {};
  MatrixXdR x(n, p), s(n, p);
  Eigen::VectorXd sp(n), ssum(n);
  for (std::size_t i = 0; i < n; ++i) {
    double a = 0, b = 0;
    for (std::size_t j = 0; j < p; ++j) {
      const double v = logits[i * p + j];
      x(i, j) = v;
      s(i, j) = sigmoid(v);
      a += softplus(v);
      b += s(i, j);
    }
    sp(i) = a;
    ssum(i) = b;
  }
  // Copied into aligned storage so reductions do not depend on the address.
  const MatrixXdR t = Eigen::Map<const MatrixXdR>(
      gt.masks.data(), static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(p));
  const MatrixXdR xt = x * t.transpose();
  const MatrixXdR st = s * t.transpose();
  const Eigen::VectorXd tsum = t.rowwise().sum();
  const Tensor<T>& probs = pred.class_probs;
  std::vector<double> cost(n * g);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < g; ++j) {
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      const double bce = (sp(ii) - xt(ii, jj)) / static_cast<double>(p);
      const double dice =
          1.0 - (2.0 * st(ii, jj) + 1.0) / (ssum(ii) + tsum(jj) + 1.0);
      const double pc =
          probs.at(i, static_cast<std::size_t>(gt.classes[j]));
      cost[i * g + j] = w.cls * -pc + w.mask * (bce + dice);
    }
  }
  return cost;
}

namespace {

template <typename T>
LayerLoss stream_layer_loss(Graph<T>& g, const SegmentPrediction<T>& pred,
                            const StreamTargets& gt, const LossWeights& w,
                            MatchTrace* trace, Var<T>& cls_out,
                            Var<T>& mask_out) {
  const std::size_t n = pred.class_logits->value.dim(0);
  const std::size_t k = pred.class_logits->value.dim(1) - 1;
  const std::size_t ng = gt.count();
  std::vector<std::size_t> assignment;
  if (trace && trace->mode == MatchTrace::Mode::replay) {
    if (trace->cursor >= trace->assignments.size()) {
      throw ShapeError("match trace exhausted during replay");
    }
    assignment = trace->assignments[trace->cursor++];
  } else {
    assignment = hungarian_assign(match_cost_matrix(pred, gt, w), n, ng);
    if (trace && trace->mode == MatchTrace::Mode::record) {
      trace->assignments.push_back(assignment);
    }
  }

  std::vector<int> targets(n, static_cast<int>(k));
  std::vector<T> weights(n, static_cast<T>(w.no_object));
  for (std::size_t j = 0; j < ng; ++j) {
    targets[assignment[j]] = gt.classes[j];
    weights[assignment[j]] = T(1);
  }
  cls_out = ops::cross_entropy(g, pred.class_logits, targets, weights);

  LayerLoss out;
  out.stream = pred.stream;
  out.layer = pred.layer_index;
  out.cls = static_cast<double>(cls_out->value[0]);
  out.matched = ng;
  if (ng == 0) {
    mask_out = nullptr;
    return out;
  }
  // Pairs in query order, so the sums do not depend on the order of the
  // ground-truth segments.
  std::vector<std::size_t> by_query(ng);
  std::iota(by_query.begin(), by_query.end(), std::size_t{0});
  std::sort(by_query.begin(), by_query.end(),
            [&](std::size_t a, std::size_t b) { return assignment[a] < assignment[b]; });
  const std::size_t p = gt.height * gt.width;
  Tensor<T> tgt({ng, p});
  std::vector<std::size_t> rows(ng);
  for (std::size_t r = 0; r < ng; ++r) {
    const std::size_t j = by_query[r];
    rows[r] = assignment[j];
    for (std::size_t i = 0; i < p; ++i) tgt[r * p + i] = static_cast<T>(gt.masks[j * p + i]);
  }
  Var<T> picked = ops::gather_rows(g, pred.mask_logits, rows);
  if (needs_upsampling(pred, gt)) {
    picked = ops::reshape(g, picked, {ng, pred.height, pred.width});
    picked = ops::resize_bilinear(g, picked, gt.height, gt.width);
    picked = ops::reshape(g, picked, {ng, p});
  }
  mask_out = ops::add(g, ops::sigmoid_bce_mean(g, picked, tgt),
                      ops::dice_rows_mean(g, picked, tgt));
  out.mask = static_cast<double>(mask_out->value[0]);
  return out;
}

}  // namespace

template <typename T>
LossResult<T> total_loss(Graph<T>& g, const ModelOutput<T>& output,
                         const GroundTruthSegments& gt, const LossWeights& w,
                         MatchTrace* trace) {
  w.validate();
  if (output.plant.empty() || output.leaf.empty()) {
    throw ShapeError("total_loss: each stream needs a supervised layer");
  }
  if (trace) {
    if (trace->mode == MatchTrace::Mode::record) trace->assignments.clear();
    trace->cursor = 0;
  }
  LossResult<T> result;
  std::vector<Var<T>> terms;
  std::vector<T> coeffs;
  auto run = [&](const std::vector<SegmentPrediction<T>>& preds,
                 const StreamTargets& targets, double& cls_sum,
                 double& mask_sum) {
    for (const auto& pred : preds) {
      Var<T> cls, mask;
      LayerLoss ll = stream_layer_loss(g, pred, targets, w, trace, cls, mask);
      terms.push_back(cls);
      coeffs.push_back(static_cast<T>(w.cls));
      if (mask) {
        terms.push_back(mask);
        coeffs.push_back(static_cast<T>(w.mask));
      }
      cls_sum += ll.cls;
      mask_sum += ll.mask;
      result.breakdown.layers.push_back(ll);
    }
  };
  LossBreakdown& b = result.breakdown;
  run(output.plant, gt.plant, b.cls_plant, b.mask_plant);
  run(output.leaf, gt.leaf, b.cls_leaf, b.mask_leaf);
  result.total = ops::weighted_sum(g, terms, coeffs);
  b.total = static_cast<double>(result.total->value[0]);
  return result;
}

#define HPS_INSTANTIATE(T)                                                     \
  template double bce_mask_loss(const Tensor<T>&, const Tensor<T>&);           \
  template double dice_loss(const Tensor<T>&, const Tensor<T>&);               \
  template double class_loss(const Tensor<T>&, const std::vector<int>&,        \
                             double);                                          \
  template std::vector<double> match_cost_matrix(                              \
      const SegmentPrediction<T>&, const StreamTargets&, const LossWeights&);  \
  template LossResult<T> total_loss(Graph<T>&, const ModelOutput<T>&,          \
                                    const GroundTruthSegments&,                \
                                    const LossWeights&, MatchTrace*);
HPS_INSTANTIATE(float)
HPS_INSTANTIATE(double)
#undef HPS_INSTANTIATE

}  // namespace hps
