#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hps/ops.hpp"
#include "hps/parameter.hpp"

namespace hps {

// y = x W^T + b over the last axis of a rank-1 or rank-2 input.
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight,
                         const Tensor<T>& bias);

// Softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias);

// Input/output projections of one attention block. Biases may be null.
// k_b is kept for layout parity but has no effect on the output.
template <typename T>
struct AttentionWeights {
  Var<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
};

// Scaled dot-product attention with `heads` heads (scale 1/sqrt(d/heads))
// followed by the output projection. q [N, d], k and v [M, d].
template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const Var<T>& q, const Var<T>& k,
                            const Var<T>& v, std::size_t heads,
                            const AttentionWeights<T>& w,
                            const AttentionMask* mask = nullptr);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // 0 checks every element; otherwise a deterministic sample per tensor.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  std::string worst_param;
  bool passed = true;
};

// Compares analytic gradients with central differences
// (f(θ+h) - f(θ-h)) / 2h for every learnable parameter. `loss(true)` must
// evaluate the objective and accumulate gradients into zeroed parameter
// buffers; `loss(false)` only evaluates. Throws NumericError on a
// non-finite objective.
GradCheckReport finite_diff_check(const std::function<double(bool)>& loss,
                                  ParameterSet<double>& params,
                                  const GradCheckOptions& options = {});

}  // namespace hps
