#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hps/autograd.hpp"

namespace hps {

// Boolean attention mask [rows, cols]; 1 = attendable.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  AttentionMask() = default;
  AttentionMask(std::size_t r, std::size_t c, std::uint8_t v = 1)
      : rows(r), cols(c), allow(r * c, v) {}
  bool row_empty(std::size_t r) const {
    for (std::size_t c = 0; c < cols; ++c) {
      if (allow[r * cols + c]) return false;
    }
    return true;
  }
  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;
};

namespace ops {

// op(a) @ op(b), where op transposes when requested. a, b rank 2.
template <typename T>
Var<T> matmul(Graph<T>& g, const Var<T>& a, const Var<T>& b,
              bool trans_a = false, bool trans_b = false);

// x [M, in] @ w[out, in]^T + b[out]. `b` may be null.
template <typename T>
Var<T> linear(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b);

// x [M, N] + row broadcast over M; row has N elements.
template <typename T>
Var<T> add_row(Graph<T>& g, const Var<T>& x, const Var<T>& row);

template <typename T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T s);

template <typename T>
Var<T> relu(Graph<T>& g, const Var<T>& x);

// Row-wise normalization over the last axis of a rank-2 tensor.
template <typename T>
Var<T> layer_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gain,
                  const Var<T>& bias, T eps = T(1e-5));

// Row-wise softmax. Masked entries get weight 0; a row whose mask allows
// nothing falls back to the unmasked softmax.
template <typename T>
Var<T> softmax_rows(Graph<T>& g, const Var<T>& x,
                    const AttentionMask* mask = nullptr);

template <typename T>
Var<T> transpose(Graph<T>& g, const Var<T>& x);

template <typename T>
Var<T> slice_cols(Graph<T>& g, const Var<T>& x, std::size_t start,
                  std::size_t len);

template <typename T>
Var<T> slice_rows(Graph<T>& g, const Var<T>& x, std::size_t start,
                  std::size_t len);

template <typename T>
Var<T> concat_cols(Graph<T>& g, const std::vector<Var<T>>& parts);

template <typename T>
Var<T> reshape(Graph<T>& g, const Var<T>& x, Shape shape);

template <typename T>
Var<T> gather_rows(Graph<T>& g, const Var<T>& x,
                   const std::vector<std::size_t>& rows);

// x [C, H, W], w [Co, C, k, k] (k odd, zero padding k/2), b [Co] or null.
template <typename T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b,
              std::size_t stride);

// Bilinear resize of [C, H, W] with half-pixel centers (align_corners=false).
template <typename T>
Var<T> resize_bilinear(Graph<T>& g, const Var<T>& x, std::size_t out_h,
                       std::size_t out_w);

// Mean over all elements of the numerically stable sigmoid BCE.
template <typename T>
Var<T> sigmoid_bce_mean(Graph<T>& g, const Var<T>& logits,
                        const Tensor<T>& targets);

// Mean over rows of 1 - (2 sum(p t) + 1) / (sum p + sum t + 1), p = sigmoid.
template <typename T>
Var<T> dice_rows_mean(Graph<T>& g, const Var<T>& logits,
                      const Tensor<T>& targets);

// sum_i weight[i] * -log softmax(logits_i)[target_i] / N.
template <typename T>
Var<T> cross_entropy(Graph<T>& g, const Var<T>& logits,
                     const std::vector<int>& targets,
                     const std::vector<T>& weights);

// sum_k weights[k] * terms[k]; every term is a scalar.
template <typename T>
Var<T> weighted_sum(Graph<T>& g, const std::vector<Var<T>>& terms,
                    const std::vector<T>& weights);

}  // namespace ops

// Plain (non-recording) helpers.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h,
                          std::size_t out_w);

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                   : std::exp(x) / (T(1) + std::exp(x));
}

// log(1 + exp(x)) without overflow.
template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace hps
