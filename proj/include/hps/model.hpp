#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hps/model_config.hpp"
#include "hps/numerics.hpp"
#include "hps/parameter.hpp"
#include "hps/rng.hpp"

namespace hps {

enum class Stream { plant, leaf };

inline const char* stream_name(Stream s) {
  return s == Stream::plant ? "plant" : "leaf";
}

// Backbone outputs at strides 4, 8, 16, 32; each [C_s, H/s, W/s].
template <typename T>
struct BackboneFeatures {
  std::array<Var<T>, 4> stages;
};

// Pyramid levels ordered coarse to fine (1/32, 1/16, 1/8), each
// [C, h, w]. Sinusoidal encodings are kept separately as [h*w, C] and are
// added to attention keys.
template <typename T>
struct PixelDecoderOutput {
  std::array<Var<T>, 3> pyramid;
  std::array<Tensor<T>, 3> positional;
  Var<T> pixel_embedding;  // [C, H/mask_stride, W/mask_stride]
};

template <typename T>
struct SegmentPrediction {
  Stream stream = Stream::plant;
  int layer_index = -1;  // -1 for the pre-decoder prediction
  Var<T> class_logits;   // [N, K+1], last column = no-object
  Tensor<T> class_probs;  // softmax(class_logits)
  Var<T> mask_embed;      // [N, C], row i is the mask embedding of query i
  Var<T> mask_logits;     // [N, h*w] on the pixel-embedding grid
  std::size_t height = 0;
  std::size_t width = 0;
};

template <typename T>
struct ModelOutput {
  // One entry per supervised decoder layer; back() is the final layer.
  std::vector<SegmentPrediction<T>> plant;
  std::vector<SegmentPrediction<T>> leaf;
};

// Records attention masks on one forward pass and replays them on later
// passes, making the objective smooth for finite differencing.
struct ForwardTrace {
  enum class Mode { off, record, replay };
  Mode mode = Mode::off;
  std::vector<AttentionMask> masks;
  std::size_t cursor = 0;
};

struct ForwardOptions {
  bool keep_all_layers = true;
  ForwardTrace* trace = nullptr;
};

struct ParameterCounts {
  std::size_t backbone = 0;
  std::size_t pixel_decoder = 0;
  std::size_t decoder_layer = 0;     // one transformer decoder layer
  std::size_t decoder_extras = 0;    // queries + level embeddings + norm, per decoder
  std::size_t query_embeddings = 0;  // query features + positions, all decoders
  std::size_t decoders = 0;          // all decoders including extras
  std::size_t plant_module = 0;
  std::size_t leaf_module = 0;
  std::size_t total = 0;
};

// Closed-form parameter counts. Accepts hypothetical configs
// (e.g. zero layers) without validation.
ParameterCounts count_parameters(const ModelConfig& cfg);

// Boolean attention mask from mask logits [N, h, w] resized to (th, tw):
// attendable where sigmoid(logit) > 0.5. A query with nothing attendable
// gets a full row.
template <typename T>
AttentionMask attention_mask_from(const Tensor<T>& mask_logits,
                                  std::size_t target_h, std::size_t target_w);

// 2-D sine/cosine encoding [h*w, channels] (channels even).
template <typename T>
Tensor<T> sine_position_encoding(std::size_t h, std::size_t w,
                                 std::size_t channels);

// 8-bit interleaved RGB -> normalized [3, H, W].
template <typename T>
Tensor<T> image_to_tensor(const std::vector<std::uint8_t>& rgb,
                          std::size_t height, std::size_t width);

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  // Backbone stages with index < n stop receiving gradients. The stem is
  // stage 0; stages 1..4 emit the stride 4..32 features.
  void freeze_backbone_stages(int n);
  int frozen_stages() const { return frozen_stages_; }

  BackboneFeatures<T> backbone_forward(Graph<T>& g,
                                       const Tensor<T>& image) const;
  PixelDecoderOutput<T> pixel_decoder_forward(
      Graph<T>& g, const BackboneFeatures<T>& features) const;

  // One transformer decoder layer: masked cross-attention, self-attention,
  // FFN, each with residual + post layer norm.
  Var<T> decoder_layer_forward(Graph<T>& g, int decoder, int layer,
                               const Var<T>& queries, const Var<T>& memory,
                               const Tensor<T>& memory_pos,
                               const AttentionMask* mask) const;

  // Class distribution and mask logits for one stream from decoder output
  // (already normalized) and the flattened pixel embedding [C, h*w].
  SegmentPrediction<T> segmentation_module_forward(
      Graph<T>& g, Stream stream, const Var<T>& queries,
      const Var<T>& pixel_embedding_flat, std::size_t h, std::size_t w) const;

  // Pixel decoder, transformer decoder(s) and segmentation modules.
  ModelOutput<T> head_forward(Graph<T>& g, const BackboneFeatures<T>& features,
                              const ForwardOptions& options = {}) const;

  ModelOutput<T> forward(Graph<T>& g, const Tensor<T>& image,
                         const ForwardOptions& options = {}) const;

 private:
  struct Conv {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    std::size_t stride = 1;
  };
  struct Linear {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
  };
  struct Norm {
    Parameter<T>* gain = nullptr;
    Parameter<T>* bias = nullptr;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct DecoderLayer {
    Attention cross, self;
    Norm cross_norm, self_norm, ffn_norm;
    Linear ffn1, ffn2;
  };
  struct Decoder {
    std::string prefix;
    Parameter<T>* query_feat = nullptr;
    Parameter<T>* query_pos = nullptr;
    Parameter<T>* level_embed = nullptr;
    Norm norm;
    std::vector<DecoderLayer> layers;
    std::vector<Stream> serves;
  };
  struct SegModule {
    Linear cls;
    std::array<Linear, 3> mlp;
  };

  Conv make_conv(Rng& rng, const std::string& name, std::size_t in,
                 std::size_t out, std::size_t k, std::size_t stride,
                 ParamGroup group, int stage);
  Linear make_linear(Rng& rng, const std::string& name, std::size_t in,
                     std::size_t out);
  Norm make_norm(const std::string& name, std::size_t d);
  Attention make_attention(Rng& rng, const std::string& name, std::size_t d);
  SegModule make_seg_module(Rng& rng, const std::string& name,
                            std::size_t classes);

  Var<T> apply_conv(Graph<T>& g, const Conv& c, const Var<T>& x,
                    bool relu) const;
  Var<T> apply_linear(Graph<T>& g, const Linear& l, const Var<T>& x) const;
  Var<T> apply_norm(Graph<T>& g, const Norm& n, const Var<T>& x) const;
  AttentionWeights<T> weights(const Attention& a) const;

  ModelConfig config_;
  ParameterSet<T> params_;
  int frozen_stages_ = 0;

  std::vector<std::vector<Conv>> backbone_;  // 5 stages
  std::array<Conv, 4> lateral_;              // strides 4, 8, 16, 32
  std::array<Conv, 4> fuse_;
  Conv mask_proj_;
  std::vector<Decoder> decoders_;
  SegModule plant_module_, leaf_module_;
};

}  // namespace hps
