#include "hps/numerics.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "hps/rng.hpp"

namespace hps {

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight,
                         const Tensor<T>& bias) {
  Graph<T> g(false);
  const bool vec = x.rank() == 1;
  Tensor<T> x2 = vec ? x.reshaped({1, x.size()}) : x;
  Var<T> y = ops::linear(g, g.constant(std::move(x2)), g.constant(weight),
                         g.constant(bias));
  if (vec) return std::move(y->value).reshaped({y->value.size()});
  return y->value;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  Graph<T> g(false);
  const std::size_t k = x.shape().back();
  Var<T> y = ops::softmax_rows(g, g.constant(x.reshaped({x.size() / k, k})));
  return std::move(y->value).reshaped(x.shape());
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias) {
  Graph<T> g(false);
  const std::size_t d = x.shape().back();
  Var<T> y = ops::layer_norm(g, g.constant(x.reshaped({x.size() / d, d})),
                             g.constant(gain), g.constant(bias));
  return std::move(y->value).reshaped(x.shape());
}

template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const Var<T>& q, const Var<T>& k,
                            const Var<T>& v, std::size_t heads,
                            const AttentionWeights<T>& w,
                            const AttentionMask* mask) {
  const std::size_t d = q->value.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) +
                      " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Var<T> qp = ops::linear(g, q, w.q_w, w.q_b);
  // A key bias adds q.b_k to every score of a row, which softmax cancels
  // exactly, so it is left out of the computation.
  Var<T> kp = ops::linear(g, k, w.k_w, Var<T>{});
  Var<T> vp = ops::linear(g, v, w.v_w, w.v_b);
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = heads == 1 ? qp : ops::slice_cols(g, qp, h * dh, dh);
    Var<T> kh = heads == 1 ? kp : ops::slice_cols(g, kp, h * dh, dh);
    Var<T> vh = heads == 1 ? vp : ops::slice_cols(g, vp, h * dh, dh);
    Var<T> scores = ops::scale(g, ops::matmul(g, qh, kh, false, true), scale);
    Var<T> attn = ops::softmax_rows(g, scores, mask);
    outs.push_back(ops::matmul(g, attn, vh));
  }
  Var<T> merged = heads == 1 ? outs[0] : ops::concat_cols(g, outs);
  return ops::linear(g, merged, w.o_w, w.o_b);
}

GradCheckReport finite_diff_check(const std::function<double(bool)>& loss,
                                  ParameterSet<double>& params,
                                  const GradCheckOptions& options) {
  auto eval = [&](bool with_grad, const std::string& where) {
    const double v = loss(with_grad);
    if (!std::isfinite(v)) {
      throw NumericError("finite_diff_check: non-finite loss " + where);
    }
    return v;
  };
  params.zero_grad();
  for (auto& p : params) {
    if (p.learnable) p.gradient().fill(0.0);
  }
  eval(true, "at the base point");

  GradCheckReport report;
  Rng rng(options.seed);
  const double h = options.step;
  for (auto& p : params) {
    if (!p.learnable) continue;
    const Tensor<double> analytic = p.gradient();
    std::vector<std::size_t> idx(p.value().size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.max_entries_per_param &&
        idx.size() > options.max_entries_per_param) {
      for (std::size_t i = 0; i < options.max_entries_per_param; ++i) {
        const auto span = static_cast<int>(idx.size() - 1 - i);
        std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.uniform_int(0, span))]);
      }
      idx.resize(options.max_entries_per_param);
    }
    GradCheckEntry entry;
    entry.name = p.name;
    for (std::size_t i : idx) {
      double& theta = p.value()[i];
      const double saved = theta;
      theta = saved + h;
      const double fp = eval(false, "perturbing " + p.name);
      theta = saved - h;
      const double fm = eval(false, "perturbing " + p.name);
      theta = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++entry.checked;
      if (entry.checked == 1 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    if (report.entries.empty() || entry.max_rel_error > report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst_param = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

#define HPS_INSTANTIATE_NUMERICS(T)                                          \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&,      \
                                    const Tensor<T>&);                       \
  template Tensor<T> softmax(const Tensor<T>&);                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,          \
                                const Tensor<T>&);                           \
  template Var<T> multi_head_attention(Graph<T>&, const Var<T>&,             \
                                       const Var<T>&, const Var<T>&,         \
                                       std::size_t, const AttentionWeights<T>&, \
                                       const AttentionMask*);

HPS_INSTANTIATE_NUMERICS(float)
HPS_INSTANTIATE_NUMERICS(double)
#undef HPS_INSTANTIATE_NUMERICS

}  // namespace hps
