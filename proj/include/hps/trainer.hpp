#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hps/dataset.hpp"
#include "hps/loss.hpp"
#include "hps/metrics.hpp"
#include "hps/model.hpp"
#include "hps/postprocess.hpp"

namespace hps {

struct TrainConfig {
  double base_lr = 1e-4;
  double weight_decay = 0.05;
  double backbone_lr_mult = 0.1;
  std::vector<double> decay_fractions{0.9, 0.95};  // strictly increasing in (0, 1]
  double decay_factor = 0.1;
  std::size_t epochs = 100;
  int freeze_stages = 4;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;   // 0: epochs * training-set size
  double clip_norm = 0.0;      // global gradient-norm clip, 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t eval_every = 0;  // steps between validations, 0: once per epoch

  void validate() const;  // throws ConfigError
};

// base_lr * decay_factor^(#fractions f with step >= floor(f * total))
// (* backbone_lr_mult for the backbone group). Throws ConfigError when
// step >= total.
double lr_at(std::size_t step, std::size_t total, const TrainConfig& cfg,
             ParamGroup group);

// Adam moments with decoupled weight decay:
// θ ← θ − lr · (m̂ / (√v̂ + ε) + wd · θ). Parameters that are not learnable
// are never touched.
class AdamW {
 public:
  AdamW(ParameterSet<float>& params, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  // Throws NumericError naming the parameter when any learnable gradient is
  // non-finite; nothing is updated in that case.
  void step(double lr_head, double lr_backbone, double weight_decay);
  std::size_t steps() const { return t_; }

 private:
  ParameterSet<float>& params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Scales learnable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradients(ParameterSet<float>& params, double max_norm);

struct TrainRecord {
  std::size_t step = 0;
  double lr_head = 0;
  double lr_backbone = 0;
  LossBreakdown loss;
};

struct FitOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::string config_text;        // embedded in checkpoints
  LossWeights loss_weights;
  InferenceConfig inference;
  PoolMode pool = PoolMode::max;
  // Grid of the loss targets; 0 uses the model's mask_stride. A finer grid
  // must divide mask_stride, and predictions are upsampled to it.
  std::size_t target_stride = 0;
  std::function<void(const TrainRecord&)> on_step;
  std::function<void(std::size_t step, const MetricReport&)> on_eval;
};

struct FitResult {
  std::vector<TrainRecord> log;
  std::size_t steps = 0;
  double best_pq = -1;
  std::size_t best_step = 0;
  std::filesystem::path checkpoint;
};

// Batch-size-1 training with a per-epoch deterministic shuffle. Writes
// train_log.csv and best.ckpt (highest validation PQ; without validation
// samples, the final weights) when out_dir is set. Throws DataError on an
// empty training set and NumericError after two consecutive non-finite
// losses.
FitResult fit(Model<float>& model, const std::vector<HierarchicalSample>& train,
              const std::vector<HierarchicalSample>& val,
              const TrainConfig& cfg, const FitOptions& options = {});

// Runs inference on each sample and aggregates against its labels.
MetricReport evaluate_model(const Model<float>& model,
                            const std::vector<HierarchicalSample>& samples,
                            const InferenceConfig& cfg);

}  // namespace hps
