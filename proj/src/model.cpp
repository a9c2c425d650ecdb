#include "hps/model.hpp"

#include <cmath>
#include <numbers>

namespace hps {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (transformers != 1 && transformers != 2) {
    fail("transformers must be 1 or 2, got " + std::to_string(transformers));
  }
  if (layers_per_level != 1 && layers_per_level != 3) {
    fail("layers_per_level must be 1 or 3, got " +
         std::to_string(layers_per_level));
  }
  if (num_queries == 0) fail("num_queries must be positive");
  if (embed_dim == 0 || embed_dim % 2 != 0) {
    fail("embed_dim must be a positive even number");
  }
  if (heads == 0 || embed_dim % heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) +
         " is not divisible by heads " + std::to_string(heads));
  }
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (k_plant == 0 || k_leaf == 0) fail("class counts must be positive");
  if (mask_stride != 4) {
    fail("mask_stride must be 4 (pixel embedding is taken at stride 4)");
  }
  for (std::size_t w : backbone_widths) {
    if (w == 0) fail("backbone widths must be positive");
  }
}

ParameterCounts count_parameters(const ModelConfig& cfg) {
  const std::size_t c = cfg.embed_dim, f = cfg.ffn_dim, n = cfg.num_queries;
  const auto& w = cfg.backbone_widths;
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) {
    return k * k * in * out + out;
  };
  ParameterCounts p;
  p.backbone = conv(3, w[0], 3) + 2 * conv(w[0], w[0], 3);
  for (std::size_t s = 1; s < 4; ++s) {
    p.backbone += conv(w[s - 1], w[s], 3) + conv(w[s], w[s], 3);
  }
  for (std::size_t s = 0; s < 4; ++s) {
    p.pixel_decoder += conv(w[s], c, 1) + conv(c, c, 3);
  }
  p.pixel_decoder += conv(c, c, 1);

  const std::size_t attention = 4 * (c * c + c);
  p.decoder_layer = 2 * attention + (c * f + f) + (f * c + c) + 3 * (2 * c);
  p.decoder_extras = 2 * n * c + ModelConfig::kFeatureLevels * c + 2 * c;
  const std::size_t t = static_cast<std::size_t>(std::max(cfg.transformers, 0));
  const std::size_t layers =
      ModelConfig::kFeatureLevels *
      static_cast<std::size_t>(std::max(cfg.layers_per_level, 0));
  p.query_embeddings = t * 2 * n * c;
  p.decoders = t * (layers * p.decoder_layer + p.decoder_extras);
  auto module = [c](std::size_t k) {
    return c * (k + 1) + (k + 1) + 3 * (c * c + c);
  };
  p.plant_module = module(cfg.k_plant);
  p.leaf_module = module(cfg.k_leaf);
  p.total = p.backbone + p.pixel_decoder + p.decoders + p.plant_module +
            p.leaf_module;
  return p;
}

template <typename T>
AttentionMask attention_mask_from(const Tensor<T>& mask_logits,
                                  std::size_t target_h, std::size_t target_w) {
  require_rank(mask_logits.shape(), 3, "attention_mask_from");
  const std::size_t n = mask_logits.dim(0);
  const Tensor<T> resized = resize_bilinear(mask_logits, target_h, target_w);
  const std::size_t cols = target_h * target_w;
  AttentionMask mask(n, cols, 0);
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) {
      const bool on = resized[i * cols + j] > T(0);
      mask.allow[i * cols + j] = on;
      any = any || on;
    }
    if (!any) {
      std::fill_n(mask.allow.begin() + static_cast<std::ptrdiff_t>(i * cols),
                  cols, std::uint8_t{1});
    }
  }
  return mask;
}

template <typename T>
Tensor<T> sine_position_encoding(std::size_t h, std::size_t w,
                                 std::size_t channels) {
  if (channels % 2 != 0) {
    throw ShapeError("sine_position_encoding: channel count must be even");
  }
  const std::size_t feats = channels / 2;
  const double two_pi = 2.0 * std::numbers::pi;
  const double eps = 1e-6;
  std::vector<double> dim_t(feats);
  for (std::size_t i = 0; i < feats; ++i) {
    dim_t[i] = std::pow(10000.0, 2.0 * static_cast<double>(i / 2) /
                                     static_cast<double>(feats));
  }
  Tensor<T> pos({h * w, channels});
  for (std::size_t y = 0; y < h; ++y) {
    const double ye = (static_cast<double>(y) + 1) / (static_cast<double>(h) + eps) * two_pi;
    for (std::size_t x = 0; x < w; ++x) {
      const double xe = (static_cast<double>(x) + 1) / (static_cast<double>(w) + eps) * two_pi;
      T* row = pos.data() + (y * w + x) * channels;
      for (std::size_t i = 0; i < feats; ++i) {
        const double vy = ye / dim_t[i], vx = xe / dim_t[i];
        row[i] = static_cast<T>(i % 2 == 0 ? std::sin(vy) : std::cos(vy));
        row[feats + i] = static_cast<T>(i % 2 == 0 ? std::sin(vx) : std::cos(vx));
      }
    }
  }
  return pos;
}

template <typename T>
Tensor<T> image_to_tensor(const std::vector<std::uint8_t>& rgb,
                          std::size_t height, std::size_t width) {
  if (rgb.size() != height * width * 3) {
    throw ShapeError("image_to_tensor: buffer is not " +
                     std::to_string(height) + "x" + std::to_string(width) +
                     "x3");
  }
  static constexpr double kMean[3] = {123.675, 116.28, 103.53};
  static constexpr double kStd[3] = {58.395, 57.12, 57.375};
  Tensor<T> out({3, height, width});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < height * width; ++i) {
      out[c * height * width + i] =
          static_cast<T>((rgb[i * 3 + c] - kMean[c]) / kStd[c]);
    }
  }
  return out;
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& w = config_.backbone_widths;
  const std::size_t c = config_.embed_dim;

  backbone_.resize(5);
  backbone_[0].push_back(make_conv(rng, "backbone.stem.conv0", 3, w[0], 3, 2,
                                   ParamGroup::backbone, 0));
  std::size_t in = w[0];
  for (int s = 1; s <= 4; ++s) {
    const std::size_t out = w[static_cast<std::size_t>(s - 1)];
    const std::string base = "backbone.stage" + std::to_string(s);
    backbone_[static_cast<std::size_t>(s)].push_back(
        make_conv(rng, base + ".conv0", in, out, 3, 2, ParamGroup::backbone, s));
    backbone_[static_cast<std::size_t>(s)].push_back(
        make_conv(rng, base + ".conv1", out, out, 3, 1, ParamGroup::backbone, s));
    in = out;
  }

  static constexpr const char* kStrideNames[4] = {"s4", "s8", "s16", "s32"};
  for (std::size_t l = 0; l < 4; ++l) {
    lateral_[l] = make_conv(rng, std::string("pixel_decoder.lateral_") + kStrideNames[l],
                            w[l], c, 1, 1, ParamGroup::head, -1);
    fuse_[l] = make_conv(rng, std::string("pixel_decoder.fuse_") + kStrideNames[l],
                         c, c, 3, 1, ParamGroup::head, -1);
  }
  mask_proj_ = make_conv(rng, "pixel_decoder.mask_proj", c, c, 1, 1,
                         ParamGroup::head, -1);

  const std::size_t n = config_.num_queries;
  auto build_decoder = [&](const std::string& prefix,
                           std::vector<Stream> serves) {
    Decoder d;
    d.prefix = prefix;
    d.serves = std::move(serves);
    // Unit-normal embeddings keep the queries distinct from the first step.
    Tensor<T> qfeat({n, c});
    for (auto& v : qfeat.values()) v = static_cast<T>(rng.normal(0.0, 1.0));
    d.query_feat = &params_.add(prefix + ".query_feat", std::move(qfeat));
    Tensor<T> qpos({n, c});
    for (auto& v : qpos.values()) v = static_cast<T>(rng.normal(0.0, 1.0));
    d.query_pos = &params_.add(prefix + ".query_pos", std::move(qpos));
    Tensor<T> lvl({ModelConfig::kFeatureLevels, c});
    for (auto& v : lvl.values()) v = static_cast<T>(rng.normal(0.0, 1.0));
    d.level_embed = &params_.add(prefix + ".level_embed", std::move(lvl));
    for (std::size_t i = 0; i < config_.decoder_layers(); ++i) {
      const std::string lp = prefix + ".layer" + std::to_string(i);
      DecoderLayer layer;
      layer.cross = make_attention(rng, lp + ".cross_attn", c);
      layer.cross_norm = make_norm(lp + ".cross_norm", c);
      layer.self = make_attention(rng, lp + ".self_attn", c);
      layer.self_norm = make_norm(lp + ".self_norm", c);
      layer.ffn1 = make_linear(rng, lp + ".ffn.fc1", c, config_.ffn_dim);
      layer.ffn2 = make_linear(rng, lp + ".ffn.fc2", config_.ffn_dim, c);
      layer.ffn_norm = make_norm(lp + ".ffn_norm", c);
      d.layers.push_back(layer);
    }
    d.norm = make_norm(prefix + ".norm", c);
    decoders_.push_back(std::move(d));
  };
  if (config_.transformers == 1) {
    build_decoder("decoder", {Stream::plant, Stream::leaf});
  } else {
    build_decoder("plant_decoder", {Stream::plant});
    build_decoder("leaf_decoder", {Stream::leaf});
  }
  plant_module_ = make_seg_module(rng, "plant_head", config_.k_plant);
  leaf_module_ = make_seg_module(rng, "leaf_head", config_.k_leaf);
}

template <typename T>
typename Model<T>::Conv Model<T>::make_conv(Rng& rng, const std::string& name,
                                            std::size_t in, std::size_t out,
                                            std::size_t k, std::size_t stride,
                                            ParamGroup group, int stage) {
  Tensor<T> weight({out, in, k, k});
  const double std = std::sqrt(2.0 / static_cast<double>(in * k * k));
  for (auto& v : weight.values()) v = static_cast<T>(rng.normal(0.0, std));
  Conv conv;
  conv.w = &params_.add(name + ".weight", std::move(weight), group, stage);
  conv.b = &params_.add(name + ".bias", Tensor<T>({out}), group, stage);
  conv.stride = stride;
  return conv;
}

template <typename T>
typename Model<T>::Linear Model<T>::make_linear(Rng& rng,
                                                const std::string& name,
                                                std::size_t in,
                                                std::size_t out) {
  Tensor<T> weight({out, in});
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& v : weight.values()) {
    v = static_cast<T>(rng.uniform(-bound, bound));
  }
  Linear l;
  l.w = &params_.add(name + ".weight", std::move(weight));
  l.b = &params_.add(name + ".bias", Tensor<T>({out}));
  return l;
}

template <typename T>
typename Model<T>::Norm Model<T>::make_norm(const std::string& name,
                                            std::size_t d) {
  Norm n;
  n.gain = &params_.add(name + ".gain", Tensor<T>({d}, T(1)));
  n.bias = &params_.add(name + ".bias", Tensor<T>({d}));
  return n;
}

template <typename T>
typename Model<T>::Attention Model<T>::make_attention(Rng& rng,
                                                      const std::string& name,
                                                      std::size_t d) {
  Attention a;
  a.q = make_linear(rng, name + ".q_proj", d, d);
  a.k = make_linear(rng, name + ".k_proj", d, d);
  a.v = make_linear(rng, name + ".v_proj", d, d);
  a.o = make_linear(rng, name + ".out_proj", d, d);
  return a;
}

template <typename T>
typename Model<T>::SegModule Model<T>::make_seg_module(Rng& rng,
                                                       const std::string& name,
                                                       std::size_t classes) {
  const std::size_t c = config_.embed_dim;
  SegModule m;
  m.cls = make_linear(rng, name + ".class", c, classes + 1);
  for (std::size_t i = 0; i < 3; ++i) {
    m.mlp[i] = make_linear(rng, name + ".mask_mlp" + std::to_string(i), c, c);
  }
  return m;
}

template <typename T>
void Model<T>::freeze_backbone_stages(int n) {
  if (n < 0 || n > 5) {
    throw ConfigError("freeze_stages must be in [0, 5], got " +
                      std::to_string(n));
  }
  frozen_stages_ = n;
  for (auto& p : params_) {
    if (p.group == ParamGroup::backbone) p.set_learnable(p.stage >= n);
  }
}

template <typename T>
Var<T> Model<T>::apply_conv(Graph<T>& g, const Conv& c, const Var<T>& x,
                            bool relu) const {
  Var<T> y = ops::conv2d(g, x, c.w->var, c.b->var, c.stride);
  return relu ? ops::relu(g, y) : y;
}

template <typename T>
Var<T> Model<T>::apply_linear(Graph<T>& g, const Linear& l,
                              const Var<T>& x) const {
  return ops::linear(g, x, l.w->var, l.b->var);
}

template <typename T>
Var<T> Model<T>::apply_norm(Graph<T>& g, const Norm& n, const Var<T>& x) const {
  return ops::layer_norm(g, x, n.gain->var, n.bias->var);
}

template <typename T>
AttentionWeights<T> Model<T>::weights(const Attention& a) const {
  return {a.q.w->var, a.q.b->var, a.k.w->var, a.k.b->var,
          a.v.w->var, a.v.b->var, a.o.w->var, a.o.b->var};
}

template <typename T>
BackboneFeatures<T> Model<T>::backbone_forward(Graph<T>& g,
                                               const Tensor<T>& image) const {
  require_rank(image.shape(), 3, "backbone_forward");
  if (image.dim(0) != 3 || image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0 ||
      image.dim(1) == 0 || image.dim(2) == 0) {
    throw ShapeError("backbone_forward: expected [3, H, W] with H, W divisible "
                     "by 32, got " + shape_str(image.shape()));
  }
  BackboneFeatures<T> out;
  Var<T> x = g.constant(image);
  for (std::size_t s = 0; s < backbone_.size(); ++s) {
    for (const Conv& c : backbone_[s]) x = apply_conv(g, c, x, true);
    if (s >= 1) out.stages[s - 1] = x;
  }
  return out;
}

template <typename T>
PixelDecoderOutput<T> Model<T>::pixel_decoder_forward(
    Graph<T>& g, const BackboneFeatures<T>& features) const {
  PixelDecoderOutput<T> out;
  std::array<Var<T>, 4> fused;
  for (int l = 3; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    Var<T> lat = apply_conv(g, lateral_[li], features.stages[li], false);
    if (l < 3) {
      const Var<T>& coarse = fused[li + 1];
      lat = ops::add(g, lat,
                     ops::resize_bilinear(g, coarse, lat->value.dim(1),
                                          lat->value.dim(2)));
    }
    fused[li] = apply_conv(g, fuse_[li], lat, true);
  }
  const std::size_t c = config_.embed_dim;
  for (std::size_t level = 0; level < 3; ++level) {
    const Var<T>& f = fused[3 - level];  // s32, s16, s8
    out.pyramid[level] = f;
    out.positional[level] =
        sine_position_encoding<T>(f->value.dim(1), f->value.dim(2), c);
  }
  out.pixel_embedding = apply_conv(g, mask_proj_, fused[0], false);
  return out;
}

template <typename T>
Var<T> Model<T>::decoder_layer_forward(Graph<T>& g, int decoder, int layer,
                                       const Var<T>& queries,
                                       const Var<T>& memory,
                                       const Tensor<T>& memory_pos,
                                       const AttentionMask* mask) const {
  const Decoder& d = decoders_.at(static_cast<std::size_t>(decoder));
  const DecoderLayer& p = d.layers.at(static_cast<std::size_t>(layer));
  const std::size_t heads = config_.heads;
  const Var<T>& qpos = d.query_pos->var;

  Var<T> keys = ops::add(g, memory, g.constant(memory_pos));
  Var<T> attn = multi_head_attention(g, ops::add(g, queries, qpos), keys,
                                     memory, heads, weights(p.cross), mask);
  Var<T> x = apply_norm(g, p.cross_norm, ops::add(g, queries, attn));

  Var<T> qk = ops::add(g, x, qpos);
  attn = multi_head_attention(g, qk, qk, x, heads, weights(p.self), nullptr);
  x = apply_norm(g, p.self_norm, ops::add(g, x, attn));

  Var<T> h = ops::relu(g, apply_linear(g, p.ffn1, x));
  h = apply_linear(g, p.ffn2, h);
  return apply_norm(g, p.ffn_norm, ops::add(g, x, h));
}

template <typename T>
SegmentPrediction<T> Model<T>::segmentation_module_forward(
    Graph<T>& g, Stream stream, const Var<T>& queries,
    const Var<T>& pixel_embedding_flat, std::size_t h, std::size_t w) const {
  const SegModule& m = stream == Stream::plant ? plant_module_ : leaf_module_;
  SegmentPrediction<T> pred;
  pred.stream = stream;
  pred.class_logits = apply_linear(g, m.cls, queries);
  pred.class_probs = softmax(pred.class_logits->value);
  Var<T> e = ops::relu(g, apply_linear(g, m.mlp[0], queries));
  e = ops::relu(g, apply_linear(g, m.mlp[1], e));
  e = apply_linear(g, m.mlp[2], e);
  pred.mask_embed = e;
  pred.mask_logits = ops::matmul(g, e, pixel_embedding_flat);
  pred.height = h;
  pred.width = w;
  return pred;
}

template <typename T>
ModelOutput<T> Model<T>::head_forward(Graph<T>& g,
                                      const BackboneFeatures<T>& features,
                                      const ForwardOptions& options) const {
  const std::size_t c = config_.embed_dim;
  PixelDecoderOutput<T> pd = pixel_decoder_forward(g, features);
  const std::size_t mh = pd.pixel_embedding->value.dim(1);
  const std::size_t mw = pd.pixel_embedding->value.dim(2);
  Var<T> pix = ops::reshape(g, pd.pixel_embedding, {c, mh * mw});

  std::array<Var<T>, 3> memory;
  std::array<std::pair<std::size_t, std::size_t>, 3> level_hw;
  for (std::size_t l = 0; l < 3; ++l) {
    const Var<T>& f = pd.pyramid[l];
    level_hw[l] = {f->value.dim(1), f->value.dim(2)};
    memory[l] = ops::transpose(
        g, ops::reshape(g, f, {c, level_hw[l].first * level_hw[l].second}));
  }

  ForwardTrace* trace = options.trace;
  if (trace && trace->mode == ForwardTrace::Mode::record) {
    trace->masks.clear();
  }
  if (trace) trace->cursor = 0;

  auto next_mask = [&](const std::vector<SegmentPrediction<T>>& preds,
                       std::size_t level) {
    if (trace && trace->mode == ForwardTrace::Mode::replay) {
      if (trace->cursor >= trace->masks.size()) {
        throw ShapeError("forward trace exhausted during replay");
      }
      return trace->masks[trace->cursor++];
    }
    const auto [th, tw] = level_hw[level];
    AttentionMask mask;
    for (const auto& p : preds) {
      Tensor<T> logits =
          p.mask_logits->value.reshaped({config_.num_queries, mh, mw});
      AttentionMask m = attention_mask_from(logits, th, tw);
      if (mask.allow.empty()) {
        mask = std::move(m);
      } else {
        for (std::size_t i = 0; i < mask.allow.size(); ++i) {
          mask.allow[i] = mask.allow[i] | m.allow[i];
        }
      }
    }
    if (trace && trace->mode == ForwardTrace::Mode::record) {
      trace->masks.push_back(mask);
    }
    return mask;
  };

  ModelOutput<T> out;
  for (std::size_t di = 0; di < decoders_.size(); ++di) {
    const Decoder& d = decoders_[di];
    auto predict = [&](const Var<T>& tgt, int layer_index) {
      Var<T> normed = apply_norm(g, d.norm, tgt);
      std::vector<SegmentPrediction<T>> preds;
      for (Stream s : d.serves) {
        preds.push_back(segmentation_module_forward(g, s, normed, pix, mh, mw));
        preds.back().layer_index = layer_index;
      }
      return preds;
    };

    std::array<Var<T>, 3> mem;
    for (std::size_t l = 0; l < 3; ++l) {
      mem[l] = ops::add_row(g, memory[l],
                            ops::slice_rows(g, d.level_embed->var, l, 1));
    }
    Var<T> tgt = d.query_feat->var;
    std::vector<SegmentPrediction<T>> preds = predict(tgt, -1);
    AttentionMask mask = next_mask(preds, 0);
    const std::size_t layers = d.layers.size();
    for (std::size_t i = 0; i < layers; ++i) {
      const std::size_t level = i % 3;
      tgt = decoder_layer_forward(g, static_cast<int>(di), static_cast<int>(i),
                                  tgt, mem[level], pd.positional[level], &mask);
      preds = predict(tgt, static_cast<int>(i));
      if (i + 1 < layers) mask = next_mask(preds, (i + 1) % 3);
      if (options.keep_all_layers || i + 1 == layers) {
        for (auto& p : preds) {
          (p.stream == Stream::plant ? out.plant : out.leaf).push_back(p);
        }
      }
    }
  }
  return out;
}

template <typename T>
ModelOutput<T> Model<T>::forward(Graph<T>& g, const Tensor<T>& image,
                                 const ForwardOptions& options) const {
  return head_forward(g, backbone_forward(g, image), options);
}

template class Model<float>;
template class Model<double>;
template AttentionMask attention_mask_from(const Tensor<float>&, std::size_t,
                                           std::size_t);
template AttentionMask attention_mask_from(const Tensor<double>&, std::size_t,
                                           std::size_t);
template Tensor<float> sine_position_encoding(std::size_t, std::size_t,
                                              std::size_t);
template Tensor<double> sine_position_encoding(std::size_t, std::size_t,
                                               std::size_t);
template Tensor<float> image_to_tensor(const std::vector<std::uint8_t>&,
                                       std::size_t, std::size_t);
template Tensor<double> image_to_tensor(const std::vector<std::uint8_t>&,
                                        std::size_t, std::size_t);

}  // namespace hps
