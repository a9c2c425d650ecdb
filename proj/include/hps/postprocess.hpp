#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hps/model.hpp"
#include "hps/panoptic_map.hpp"

namespace hps {

struct InferenceConfig {
  double mask_confidence_threshold = 0.5;
  double overlap_threshold = 0.8;
  void validate() const;  // both in [0, 1]; throws ConfigError
};

struct KeptQuery {
  std::size_t query = 0;
  int label = 0;  // argmax over real classes
  double score = 0;
};

// Drops queries whose no-object probability wins or whose best real class
// scores below the confidence threshold. Output is in query order.
template <typename T>
std::vector<KeptQuery> filter_queries(const Tensor<T>& class_probs,
                                      const InferenceConfig& cfg);

// Single-stream segmentation. label holds the class per pixel or kNone;
// instance ids are dense from 1 in descending score order.
struct StreamMap {
  static constexpr std::uint8_t kNone = 255;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> label;
  std::vector<std::uint16_t> instance;
  std::vector<Segment> segments;
};

// probs [kept, H*W] holds the full-resolution mask probabilities of the
// kept queries in order. Plant stream: crop (1) is a thing, weed (2) and
// soil (0) are merged per class; soil carries instance id 0. Leaf stream:
// every leaf is a thing.
StreamMap panoptic_assemble(const std::vector<KeptQuery>& kept,
                            const Tensor<float>& probs, std::size_t height,
                            std::size_t width, Stream stream,
                            const InferenceConfig& cfg);

// Plant map defines semantic (unassigned pixels are soil) and
// plant_instance; the leaf map defines leaf_instance on its own.
// Throws ShapeError on a resolution mismatch.
PanopticMap hierarchical_output(const StreamMap& plant, const StreamMap& leaf);

// Kept queries of one stream with their masks at input resolution.
struct StreamQueries {
  std::vector<KeptQuery> kept;
  Tensor<float> probs;  // [kept, H*W]
};

struct HeadResult {
  StreamQueries plant;
  StreamQueries leaf;
  std::size_t height = 0;
  std::size_t width = 0;
};

// Filters the final-layer predictions and bilinearly upsamples only the
// kept queries' mask logits to height x width before the sigmoid.
StreamQueries select_and_upsample(const SegmentPrediction<float>& pred,
                                  std::size_t height, std::size_t width,
                                  const InferenceConfig& cfg);

// The three timed stages of inference.
BackboneFeatures<float> run_backbone(const Model<float>& model, Graph<float>& g,
                                     const Tensor<float>& image);
HeadResult run_head(const Model<float>& model, Graph<float>& g,
                    const BackboneFeatures<float>& features, std::size_t height,
                    std::size_t width, const InferenceConfig& cfg);
PanopticMap run_postprocess(const HeadResult& head, const InferenceConfig& cfg);

// Whole pipeline on a normalized [3, H, W] image.
PanopticMap infer(const Model<float>& model, const Tensor<float>& image,
                  const InferenceConfig& cfg);

}  // namespace hps
