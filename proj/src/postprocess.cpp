#include "hps/postprocess.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "hps/dataset.hpp"
#include "hps/errors.hpp"

namespace hps {

void InferenceConfig::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(mask_confidence_threshold)) {
    throw ConfigError("mask_confidence_threshold must be in [0, 1]");
  }
  if (!unit(overlap_threshold)) {
    throw ConfigError("overlap_threshold must be in [0, 1]");
  }
}

template <typename T>
std::vector<KeptQuery> filter_queries(const Tensor<T>& class_probs,
                                      const InferenceConfig& cfg) {
  require_rank(class_probs.shape(), 2, "filter_queries");
  const std::size_t n = class_probs.dim(0), k1 = class_probs.dim(1);
  if (k1 < 2) throw ShapeError("filter_queries: need a real class and no-object");
  std::vector<KeptQuery> kept;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c + 1 < k1; ++c) {
      if (class_probs.at(i, c) > class_probs.at(i, best)) best = c;
    }
    const double score = static_cast<double>(class_probs.at(i, best));
    if (static_cast<double>(class_probs.at(i, k1 - 1)) > score) continue;
    if (score < cfg.mask_confidence_threshold) continue;
    kept.push_back({i, static_cast<int>(best), score});
  }
  return kept;
}

StreamMap panoptic_assemble(const std::vector<KeptQuery>& kept,
                            const Tensor<float>& probs, std::size_t height,
                            std::size_t width, Stream stream,
                            const InferenceConfig& cfg) {
  const std::size_t n = height * width, k = kept.size();
  if (probs.size() != k * n) {
    throw ShapeError("panoptic_assemble: probabilities " +
                     shape_str(probs.shape()) + " for " + std::to_string(k) +
                     " queries at " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  StreamMap out;
  out.height = height;
  out.width = width;
  out.label.assign(n, StreamMap::kNone);
  out.instance.assign(n, 0);

  // Sequential scan in query order: a later query takes a pixel only with a
  // strictly larger weighted probability, or an equal one and a higher score.
  std::vector<std::int32_t> win(n, -1);
  std::vector<double> best(n, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const float* m = probs.data() + i * n;
    const double s = kept[i].score;
    for (std::size_t p = 0; p < n; ++p) {
      const double v = s * static_cast<double>(m[p]);
      if (v <= 0.0) continue;
      if (v > best[p] ||
          (v == best[p] && s > kept[static_cast<std::size_t>(win[p])].score)) {
        best[p] = v;
        win[p] = static_cast<std::int32_t>(i);
      }
    }
  }

  std::vector<std::size_t> native(k, 0), retained(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    const float* m = probs.data() + i * n;
    for (std::size_t p = 0; p < n; ++p) native[i] += m[p] >= 0.5f;
  }
  for (std::size_t p = 0; p < n; ++p) {
    if (win[p] >= 0 && probs[static_cast<std::size_t>(win[p]) * n + p] >= 0.5f) {
      ++retained[static_cast<std::size_t>(win[p])];
    }
  }

  // Surviving queries grouped into units: one per thing, one per stuff class.
  struct Unit {
    int label = 0;
    double score = 0;
    std::size_t first = 0;
    std::size_t area = 0;
    std::uint16_t id = 0;
  };
  std::vector<Unit> units;
  std::vector<std::int32_t> unit_of(k, -1);
  std::map<int, std::size_t> stuff_unit;
  for (std::size_t i = 0; i < k; ++i) {
    if (native[i] == 0 || retained[i] == 0) continue;
    if (static_cast<double>(retained[i]) <
        cfg.overlap_threshold * static_cast<double>(native[i])) {
      continue;
    }
    const int label = kept[i].label;
    const bool thing = stream == Stream::leaf || label == kCrop;
    if (!thing) {
      auto it = stuff_unit.find(label);
      if (it != stuff_unit.end()) {
        Unit& u = units[it->second];
        u.score = std::max(u.score, kept[i].score);
        unit_of[i] = static_cast<std::int32_t>(it->second);
        continue;
      }
      stuff_unit[label] = units.size();
    }
    unit_of[i] = static_cast<std::int32_t>(units.size());
    units.push_back({label, kept[i].score, i, 0, 0});
  }

  for (std::size_t p = 0; p < n; ++p) {
    if (win[p] < 0) continue;
    const auto i = static_cast<std::size_t>(win[p]);
    if (unit_of[i] < 0 || probs[i * n + p] < 0.5f) continue;
    ++units[static_cast<std::size_t>(unit_of[i])].area;
  }

  std::vector<std::size_t> order;
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (units[u].area > 0) order.push_back(u);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (units[a].score != units[b].score) return units[a].score > units[b].score;
    return units[a].first < units[b].first;
  });
  std::uint16_t next = 1;
  const int stream_index = stream == Stream::plant ? 0 : 1;
  for (std::size_t u : order) {
    Unit& unit = units[u];
    const bool soil = stream == Stream::plant && unit.label == kSoil;
    unit.id = soil ? 0 : next++;
    out.segments.push_back(
        {unit.id, stream_index, unit.label, unit.score, unit.area});
  }

  for (std::size_t p = 0; p < n; ++p) {
    if (win[p] < 0) continue;
    const auto i = static_cast<std::size_t>(win[p]);
    if (unit_of[i] < 0 || probs[i * n + p] < 0.5f) continue;
    const Unit& unit = units[static_cast<std::size_t>(unit_of[i])];
    out.label[p] = static_cast<std::uint8_t>(unit.label);
    out.instance[p] = unit.id;
  }
  return out;
}

PanopticMap hierarchical_output(const StreamMap& plant, const StreamMap& leaf) {
  if (plant.height != leaf.height || plant.width != leaf.width) {
    throw ShapeError("hierarchical_output: plant map " +
                     std::to_string(plant.width) + "x" +
                     std::to_string(plant.height) + " vs leaf map " +
                     std::to_string(leaf.width) + "x" +
                     std::to_string(leaf.height));
  }
  PanopticMap m(plant.height, plant.width);
  for (std::size_t p = 0; p < plant.label.size(); ++p) {
    m.semantic[p] = plant.label[p] == StreamMap::kNone
                        ? static_cast<std::uint8_t>(kSoil)
                        : plant.label[p];
  }
  m.plant_instance = plant.instance;
  m.leaf_instance = leaf.instance;
  m.segments = plant.segments;
  m.segments.insert(m.segments.end(), leaf.segments.begin(), leaf.segments.end());
  return m;
}

StreamQueries select_and_upsample(const SegmentPrediction<float>& pred,
                                  std::size_t height, std::size_t width,
                                  const InferenceConfig& cfg) {
  StreamQueries out;
  out.kept = filter_queries(pred.class_probs, cfg);
  const std::size_t k = out.kept.size(), hw = pred.height * pred.width;
  if (k == 0) {
    out.probs = Tensor<float>({0, height * width});
    return out;
  }
  Tensor<float> low({k, pred.height, pred.width});
  const Tensor<float>& logits = pred.mask_logits->value;
  for (std::size_t r = 0; r < k; ++r) {
    std::copy_n(logits.data() + out.kept[r].query * hw, hw, low.data() + r * hw);
  }
  out.probs = resize_bilinear(low, height, width);
  for (float& v : out.probs.values()) v = sigmoid(v);
  out.probs.reshape({k, height * width});
  return out;
}

BackboneFeatures<float> run_backbone(const Model<float>& model, Graph<float>& g,
                                     const Tensor<float>& image) {
  return model.backbone_forward(g, image);
}

HeadResult run_head(const Model<float>& model, Graph<float>& g,
                    const BackboneFeatures<float>& features, std::size_t height,
                    std::size_t width, const InferenceConfig& cfg) {
  ForwardOptions opts;
  opts.keep_all_layers = false;
  ModelOutput<float> out = model.head_forward(g, features, opts);
  HeadResult r;
  r.height = height;
  r.width = width;
  r.plant = select_and_upsample(out.plant.back(), height, width, cfg);
  r.leaf = select_and_upsample(out.leaf.back(), height, width, cfg);
  return r;
}

PanopticMap run_postprocess(const HeadResult& head, const InferenceConfig& cfg) {
  StreamMap plant = panoptic_assemble(head.plant.kept, head.plant.probs,
                                      head.height, head.width, Stream::plant, cfg);
  StreamMap leaf = panoptic_assemble(head.leaf.kept, head.leaf.probs,
                                     head.height, head.width, Stream::leaf, cfg);
  return hierarchical_output(plant, leaf);
}

PanopticMap infer(const Model<float>& model, const Tensor<float>& image,
                  const InferenceConfig& cfg) {
  cfg.validate();
  Graph<float> g(false);
  const std::size_t h = image.dim(1), w = image.dim(2);
  BackboneFeatures<float> f = run_backbone(model, g, image);
  HeadResult head = run_head(model, g, f, h, w, cfg);
  return run_postprocess(head, cfg);
}

template std::vector<KeptQuery> filter_queries(const Tensor<float>&,
                                               const InferenceConfig&);
template std::vector<KeptQuery> filter_queries(const Tensor<double>&,
                                               const InferenceConfig&);

}  // namespace hps
