#include "hps/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "hps/checkpoint.hpp"
#include "hps/errors.hpp"
#include "hps/rng.hpp"

namespace hps {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (!(base_lr > 0) || !std::isfinite(base_lr)) fail("base_lr must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (!(backbone_lr_mult >= 0)) fail("backbone_lr_mult must be non-negative");
  if (!(decay_factor > 0 && decay_factor <= 1)) fail("decay_factor must be in (0, 1]");
  double prev = 0;
  for (double f : decay_fractions) {
    if (!(f > prev && f <= 1)) {
      fail("decay_fractions must be strictly increasing in (0, 1]");
    }
    prev = f;
  }
  if (epochs == 0 && max_steps == 0) fail("epochs must be positive");
  if (freeze_stages < 0 || freeze_stages > 5) fail("freeze_stages must be in [0, 5]");
  if (!(clip_norm >= 0)) fail("clip_norm must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    fail("adam betas must be in [0, 1)");
  }
  if (!(eps > 0)) fail("eps must be positive");
}

double lr_at(std::size_t step, std::size_t total, const TrainConfig& cfg,
             ParamGroup group) {
  if (step >= total) {
    throw ConfigError("lr_at: step " + std::to_string(step) +
                      " outside [0, " + std::to_string(total) + ")");
  }
  double lr = cfg.base_lr;
  for (double f : cfg.decay_fractions) {
    // The epsilon keeps products like 0.29 * 100 from flooring to 28.
    const auto boundary =
        static_cast<std::size_t>(std::floor(f * static_cast<double>(total) + 1e-9));
    if (step >= boundary) lr *= cfg.decay_factor;
  }
  return group == ParamGroup::backbone ? lr * cfg.backbone_lr_mult : lr;
}

AdamW::AdamW(ParameterSet<float>& params, double beta1, double beta2, double eps)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value().size(), 0.0);
    v_.emplace_back(p.value().size(), 0.0);
  }
}

void AdamW::step(double lr_head, double lr_backbone, double weight_decay) {
  for (auto& p : params_) {
    if (!p.learnable || p.var->grad.empty()) continue;
    if (!p.var->grad.all_finite()) {
      throw NumericError("non-finite gradient in " + p.name + "; step rejected");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter<float>& p = params_[k];
    if (!p.learnable) continue;
    const double lr = p.group == ParamGroup::backbone ? lr_backbone : lr_head;
    float* theta = p.value().data();
    const float* grad = p.var->grad.empty() ? nullptr : p.var->grad.data();
    std::vector<double>& m = m_[k];
    std::vector<double>& v = v_[k];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = grad ? static_cast<double>(grad[i]) : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      const double th = static_cast<double>(theta[i]);
      theta[i] = static_cast<float>(th - lr * (update + weight_decay * th));
    }
  }
}

double clip_gradients(ParameterSet<float>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.learnable || p.var->grad.empty()) continue;
    for (float g : p.var->grad.values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      if (!p.learnable || p.var->grad.empty()) continue;
      for (float& g : p.var->grad.values()) g *= s;
    }
  }
  return norm;
}

MetricReport evaluate_model(const Model<float>& model,
                            const std::vector<HierarchicalSample>& samples,
                            const InferenceConfig& cfg) {
  std::vector<EvalTally> tallies;
  tallies.reserve(samples.size());
  for (const auto& s : samples) {
    const Tensor<float> img = image_to_tensor<float>(s.image, s.height, s.width);
    tallies.push_back(evaluate_image(s, infer(model, img, cfg)));
  }
  return aggregate(tallies);
}

namespace {

struct Prepared {
  Tensor<float> image;
  GroundTruthSegments gt;
};

void write_log_row(std::ofstream& out, const TrainRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                r.step, r.lr_head, r.lr_backbone, r.loss.total,
                r.loss.cls_plant, r.loss.mask_plant, r.loss.cls_leaf,
                r.loss.mask_leaf);
  out << buf;
  out.flush();
}

}  // namespace

FitResult fit(Model<float>& model, const std::vector<HierarchicalSample>& train,
              const std::vector<HierarchicalSample>& val,
              const TrainConfig& cfg, const FitOptions& options) {
  cfg.validate();
  options.loss_weights.validate();
  options.inference.validate();
  if (train.empty()) throw DataError("fit: training set is empty");

  const std::size_t mask_stride = model.config().mask_stride;
  const std::size_t stride = options.target_stride ? options.target_stride : mask_stride;
  if (mask_stride % stride != 0) {
    throw ConfigError("target_stride must divide mask_stride " + std::to_string(mask_stride));
  }
  std::vector<Prepared> data;
  data.reserve(train.size());
  for (const auto& s : train) {
    if (s.image.empty()) throw DataError("fit: sample " + s.name + " has no image");
    data.push_back({image_to_tensor<float>(s.image, s.height, s.width),
                    ground_truth_from(s, stride, options.pool)});
  }

  model.freeze_backbone_stages(cfg.freeze_stages);
  AdamW opt(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps);
  const std::size_t n = data.size();
  const std::size_t total = cfg.max_steps ? cfg.max_steps : cfg.epochs * n;
  const std::size_t eval_every = cfg.eval_every ? cfg.eval_every : n;

  std::ofstream log;
  FitResult result;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log.open(options.out_dir / "train_log.csv", std::ios::trunc);
    if (!log) throw DataError("cannot write " + (options.out_dir / "train_log.csv").string());
    log << "step,lr_head,lr_backbone,L_total,L_cls_plant,L_mask_plant,L_cls_leaf,L_mask_leaf\n";
    result.checkpoint = options.out_dir / "best.ckpt";
  }

  std::vector<std::size_t> order(n);
  int bad_in_a_row = 0;
  for (std::size_t step = 0; step < total; ++step) {
    if (step % n == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle_rng(mix_seed(cfg.seed, 1000 + step / n));
      shuffle_rng.shuffle(order);
    }
    const Prepared& sample = data[order[step % n]];

    TrainRecord rec;
    rec.step = step;
    rec.lr_head = lr_at(step, total, cfg, ParamGroup::head);
    rec.lr_backbone = lr_at(step, total, cfg, ParamGroup::backbone);

    model.parameters().zero_grad();
    bool finite = true;
    try {
      Graph<float> g(true);
      ModelOutput<float> out = model.forward(g, sample.image);
      // Non-finite logits surface here as a NumericError from the matcher.
      LossResult<float> loss = total_loss(g, out, sample.gt, options.loss_weights);
      rec.loss = loss.breakdown;
      finite = std::isfinite(loss.breakdown.total);
      if (finite) {
        g.backward(loss.total);
        if (cfg.clip_norm > 0) clip_gradients(model.parameters(), cfg.clip_norm);
        opt.step(rec.lr_head, rec.lr_backbone, cfg.weight_decay);
      }
    } catch (const NumericError&) {
      finite = false;
      rec.loss.total = std::numeric_limits<double>::quiet_NaN();
    }
    if (!finite) {
      if (++bad_in_a_row >= 2) {
        throw NumericError("fit: non-finite loss or gradient at steps " +
                           std::to_string(step - 1) + " and " +
                           std::to_string(step) + "; training aborted");
      }
    } else {
      bad_in_a_row = 0;
    }

    result.log.push_back(rec);
    if (log.is_open()) write_log_row(log, rec);
    if (options.on_step) options.on_step(rec);
    result.steps = step + 1;

    const bool last = step + 1 == total;
    if (!val.empty() && ((step + 1) % eval_every == 0 || last)) {
      MetricReport report = evaluate_model(model, val, options.inference);
      if (options.on_eval) options.on_eval(step + 1, report);
      if (report.pq > result.best_pq) {
        result.best_pq = report.pq;
        result.best_step = step + 1;
        if (!result.checkpoint.empty()) {
          save_checkpoint(result.checkpoint, options.config_text, model.parameters());
        }
      }
    }
  }
  if (val.empty() && !result.checkpoint.empty()) {
    save_checkpoint(result.checkpoint, options.config_text, model.parameters());
    result.best_step = result.steps;
  }
  return result;
}

}  // namespace hps
