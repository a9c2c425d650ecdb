#include "hps/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hps {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;
using Stride = Eigen::OuterStride<>;
template <typename T>
using StridedMap = Eigen::Map<Mat<T>, 0, Stride>;
template <typename T>
using CStridedMap = Eigen::Map<const Mat<T>, 0, Stride>;

template <typename T>
CMapM<T> cmap(const Tensor<T>& t, std::size_t r, std::size_t c) {
  return CMapM<T>(t.data(), static_cast<Eigen::Index>(r),
                  static_cast<Eigen::Index>(c));
}
template <typename T>
MapM<T> map(Tensor<T>& t, std::size_t r, std::size_t c) {
  return MapM<T>(t.data(), static_cast<Eigen::Index>(r),
                 static_cast<Eigen::Index>(c));
}

std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.back(); }

void require_2d(const Shape& s, const char* what) { require_rank(s, 2, what); }

template <typename T>
Var<T> out_var(Tensor<T> v) {
  return make_var(std::move(v), false);
}

// Per-axis bilinear sampling table for half-pixel-center resizing.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;
};

Taps make_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    std::size_t hi = std::min(lo + 1, in - 1);
    t.lo[o] = lo;
    t.hi[o] = hi;
    t.w_hi[o] = src - static_cast<double>(lo);
  }
  return t;
}

template <typename T>
void resize_plane(const T* src, std::size_t h, std::size_t w, T* dst,
                  std::size_t oh, std::size_t ow, const Taps& ty,
                  const Taps& tx) {
  for (std::size_t y = 0; y < oh; ++y) {
    const T wy = static_cast<T>(ty.w_hi[y]);
    const T* r0 = src + ty.lo[y] * w;
    const T* r1 = src + ty.hi[y] * w;
    T* d = dst + y * ow;
    for (std::size_t x = 0; x < ow; ++x) {
      const T wx = static_cast<T>(tx.w_hi[x]);
      const T top = r0[tx.lo[x]] * (T(1) - wx) + r0[tx.hi[x]] * wx;
      const T bot = r1[tx.lo[x]] * (T(1) - wx) + r1[tx.hi[x]] * wx;
      d[x] = top * (T(1) - wy) + bot * wy;
    }
  }
  (void)h;
}

template <typename T>
void resize_plane_backward(const T* dout, std::size_t oh, std::size_t ow,
                           T* dsrc, std::size_t w, const Taps& ty,
                           const Taps& tx) {
  for (std::size_t y = 0; y < oh; ++y) {
    const T wy = static_cast<T>(ty.w_hi[y]);
    T* r0 = dsrc + ty.lo[y] * w;
    T* r1 = dsrc + ty.hi[y] * w;
    const T* d = dout + y * ow;
    for (std::size_t x = 0; x < ow; ++x) {
      const T wx = static_cast<T>(tx.w_hi[x]);
      const T g = d[x];
      r0[tx.lo[x]] += g * (T(1) - wy) * (T(1) - wx);
      r0[tx.hi[x]] += g * (T(1) - wy) * wx;
      r1[tx.lo[x]] += g * wy * (T(1) - wx);
      r1[tx.hi[x]] += g * wy * wx;
    }
  }
}

// Fills cols [C*k*k, rows*wo] for output rows [r0, r0+rows).
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w,
            std::size_t k, std::size_t stride, std::size_t r0,
            std::size_t rows, std::size_t wo, T* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t ncol = rows * wo;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* plane = x + ci * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = cols + ((ci * k + ky) * k + kx) * ncol;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>((r0 + r) * stride + ky) - pad;
          T* drow = dst + r * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + wo, T(0));
            continue;
          }
          const T* srow = plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
            drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                           ? T(0)
                           : srow[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w,
            std::size_t k, std::size_t stride, std::size_t r0,
            std::size_t rows, std::size_t wo, T* dx) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t ncol = rows * wo;
  for (std::size_t ci = 0; ci < c; ++ci) {
    T* plane = dx + ci * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = cols + ((ci * k + ky) * k + kx) * ncol;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>((r0 + r) * stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* prow = plane + static_cast<std::size_t>(iy) * w;
          const T* srow = src + r * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) {
              prow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

constexpr std::size_t kIm2colBudget = std::size_t{1} << 22;

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h,
                          std::size_t out_w) {
  require_rank(x.shape(), 3, "resize_bilinear");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, out_h, out_w});
  const Taps ty = make_taps(h, out_h), tx = make_taps(w, out_w);
  for (std::size_t ci = 0; ci < c; ++ci) {
    resize_plane(x.data() + ci * h * w, h, w, out.data() + ci * out_h * out_w,
                 out_h, out_w, ty, tx);
  }
  return out;
}

namespace ops {

template <typename T>
Var<T> matmul(Graph<T>& g, const Var<T>& a, const Var<T>& b, bool trans_a,
              bool trans_b) {
  require_2d(a->value.shape(), "matmul lhs");
  require_2d(b->value.shape(), "matmul rhs");
  const std::size_t ar = a->value.dim(0), ac = a->value.dim(1);
  const std::size_t br = b->value.dim(0), bc = b->value.dim(1);
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ " +
                     shape_str(a->value.shape()) + " x " +
                     shape_str(b->value.shape()));
  }
  Tensor<T> out({m, n});
  auto A = cmap(a->value, ar, ac);
  auto B = cmap(b->value, br, bc);
  auto C = map(out, m, n);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else C.noalias() = A.transpose() * B.transpose();
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&a, &b})) {
    Node<T>* on = o.get();
    g.push(o, [a, b, on, ar, ac, br, bc, m, n, trans_a, trans_b] {
      auto dC = cmap(on->grad, m, n);
      auto A = cmap(a->value, ar, ac);
      auto B = cmap(b->value, br, bc);
      if (a->requires_grad) {
        auto dA = map(a->grad_buffer(), ar, ac);
        if (!trans_a && !trans_b) dA.noalias() += dC * B.transpose();
        else if (!trans_a && trans_b) dA.noalias() += dC * B;
        else if (trans_a && !trans_b) dA.noalias() += B * dC.transpose();
        else dA.noalias() += B.transpose() * dC.transpose();
      }
      if (b->requires_grad) {
        auto dB = map(b->grad_buffer(), br, bc);
        if (!trans_a && !trans_b) dB.noalias() += A.transpose() * dC;
        else if (!trans_a && trans_b) dB.noalias() += dC.transpose() * A;
        else if (trans_a && !trans_b) dB.noalias() += A * dC;
        else dB.noalias() += dC.transpose() * A.transpose();
      }
    });
  }
  return o;
}

template <typename T>
Var<T> linear(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_2d(x->value.shape(), "linear input");
  require_2d(w->value.shape(), "linear weight");
  const std::size_t m = x->value.dim(0), din = x->value.dim(1);
  const std::size_t dout = w->value.dim(0);
  if (w->value.dim(1) != din) {
    throw ShapeError("linear: input " + shape_str(x->value.shape()) +
                     " incompatible with weight " +
                     shape_str(w->value.shape()));
  }
  if (b && b->value.size() != dout) {
    throw ShapeError("linear: bias " + shape_str(b->value.shape()) +
                     " incompatible with weight " +
                     shape_str(w->value.shape()));
  }
  Tensor<T> out({m, dout});
  auto Y = map(out, m, dout);
  Y.noalias() = cmap(x->value, m, din) * cmap(w->value, dout, din).transpose();
  if (b) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(
        b->value.data(), static_cast<Eigen::Index>(dout));
    Y.rowwise() += bias;
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x, &w, &b})) {
    Node<T>* on = o.get();
    g.push(o, [x, w, b, on, m, din, dout] {
      auto dY = cmap(on->grad, m, dout);
      if (x->requires_grad) {
        map(x->grad_buffer(), m, din).noalias() +=
            dY * cmap(w->value, dout, din);
      }
      if (w->requires_grad) {
        map(w->grad_buffer(), dout, din).noalias() +=
            dY.transpose() * cmap(x->value, m, din);
      }
      if (b && b->requires_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(
            b->grad_buffer().data(), static_cast<Eigen::Index>(dout));
        db += dY.colwise().sum();
      }
    });
  }
  return o;
}

template <typename T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw ShapeError("add: " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&a, &b})) {
    Node<T>* on = o.get();
    g.push(o, [a, b, on] {
      for (const Var<T>* in : {&a, &b}) {
        if (!(*in)->requires_grad) continue;
        auto& gi = (*in)->grad_buffer();
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += on->grad[i];
      }
    });
  }
  return o;
}

template <typename T>
Var<T> add_row(Graph<T>& g, const Var<T>& x, const Var<T>& row) {
  require_2d(x->value.shape(), "add_row");
  const std::size_t m = x->value.dim(0), n = x->value.dim(1);
  if (row->value.size() != n) {
    throw ShapeError("add_row: row " + shape_str(row->value.shape()) +
                     " vs matrix " + shape_str(x->value.shape()));
  }
  Tensor<T> out = x->value;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row->value[j];
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x, &row})) {
    Node<T>* on = o.get();
    g.push(o, [x, row, on, m, n] {
      if (x->requires_grad) {
        auto& gx = x->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
      }
      if (row->requires_grad) {
        auto& gr = row->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gr[j] += on->grad[i * n + j];
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T s) {
  Tensor<T> out = x->value;
  for (auto& v : out.values()) v *= s;
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on, s] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * on->grad[i];
    });
  }
  return o;
}

template <typename T>
Var<T> relu(Graph<T>& g, const Var<T>& x) {
  Tensor<T> out = x->value;
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (x->value[i] > T(0)) gx[i] += on->grad[i];
      }
    });
  }
  return o;
}

template <typename T>
Var<T> layer_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gain,
                  const Var<T>& bias, T eps) {
  require_2d(x->value.shape(), "layer_norm");
  const std::size_t m = x->value.dim(0), d = x->value.dim(1);
  if (d == 0) throw ShapeError("layer_norm: empty feature axis");
  if (gain->value.size() != d || bias->value.size() != d) {
    throw ShapeError("layer_norm: affine parameters do not match width " +
                     std::to_string(d));
  }
  Tensor<T> out({m, d});
  Tensor<T> xhat({m, d});
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x->value.data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (row[j] - mean) * inv;
      xhat[i * d + j] = xh;
      out[i * d + j] = xh * gain->value[j] + bias->value[j];
    }
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x, &gain, &bias})) {
    Node<T>* on = o.get();
    g.push(o, [x, gain, bias, on, m, d, xhat = std::move(xhat),
               inv_std = std::move(inv_std)] {
      const auto& dy = on->grad;
      if (gain->requires_grad || bias->requires_grad) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            if (gain->requires_grad) {
              gain->grad_buffer()[j] += dy[i * d + j] * xhat[i * d + j];
            }
            if (bias->requires_grad) bias->grad_buffer()[j] += dy[i * d + j];
          }
        }
      }
      if (x->requires_grad) {
        auto& gx = x->grad_buffer();
        std::vector<T> dxh(d);
        for (std::size_t i = 0; i < m; ++i) {
          T mean_dxh = 0, mean_dxh_xh = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dxh[j] = dy[i * d + j] * gain->value[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xhat[i * d + j];
          }
          mean_dxh /= static_cast<T>(d);
          mean_dxh_xh /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[i * d + j] += inv_std[i] * (dxh[j] - mean_dxh -
                                           xhat[i * d + j] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> softmax_rows(Graph<T>& g, const Var<T>& x, const AttentionMask* mask) {
  const Shape& s = x->value.shape();
  const std::size_t m = rows_of(s), n = cols_of(s);
  if (s.size() > 2) throw ShapeError("softmax_rows: rank > 2");
  if (mask && (mask->rows != m || mask->cols != n)) {
    throw ShapeError("softmax_rows: mask [" + std::to_string(mask->rows) +
                     ", " + std::to_string(mask->cols) + "] vs scores " +
                     shape_str(s));
  }
  Tensor<T> out(s);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x->value.data() + i * n;
    T* y = out.data() + i * n;
    const std::uint8_t* allow =
        (mask && !mask->row_empty(i)) ? mask->allow.data() + i * n : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!allow || allow[j]) mx = std::max(mx, row[j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = (!allow || allow[j]) ? std::exp(row[j] - mx) : T(0);
      sum += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on, m, n] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const T* y = on->value.data() + i * n;
        const T* dy = on->grad.data() + i * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return o;
}

template <typename T>
Var<T> transpose(Graph<T>& g, const Var<T>& x) {
  require_2d(x->value.shape(), "transpose");
  const std::size_t m = x->value.dim(0), n = x->value.dim(1);
  Tensor<T> out({n, m});
  map(out, n, m) = cmap(x->value, m, n).transpose();
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on, m, n] {
      map(x->grad_buffer(), m, n) += cmap(on->grad, n, m).transpose();
    });
  }
  return o;
}

template <typename T>
Var<T> slice_cols(Graph<T>& g, const Var<T>& x, std::size_t start,
                  std::size_t len) {
  require_2d(x->value.shape(), "slice_cols");
  const std::size_t m = x->value.dim(0), n = x->value.dim(1);
  if (start + len > n) throw ShapeError("slice_cols: range out of bounds");
  Tensor<T> out({m, len});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(x->value.data() + i * n + start, len, out.data() + i * len);
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on, m, n, start, len] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
          gx[i * n + start + j] += on->grad[i * len + j];
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> slice_rows(Graph<T>& g, const Var<T>& x, std::size_t start,
                  std::size_t len) {
  require_2d(x->value.shape(), "slice_rows");
  const std::size_t m = x->value.dim(0), n = x->value.dim(1);
  if (start + len > m) throw ShapeError("slice_rows: range out of bounds");
  Tensor<T> out({len, n});
  std::copy_n(x->value.data() + start * n, len * n, out.data());
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on, n, start, len] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < len * n; ++i) gx[start * n + i] += on->grad[i];
    });
  }
  return o;
}

template <typename T>
Var<T> concat_cols(Graph<T>& g, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0]->value.dim(0);
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_2d(p->value.shape(), "concat_cols");
    if (p->value.dim(0) != m) throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p->value.dim(1));
    n += p->value.dim(1);
  }
  Tensor<T> out({m, n});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(parts[k]->value.data() + i * widths[k], widths[k],
                  out.data() + i * n + off);
    }
    off += widths[k];
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, parts)) {
    Node<T>* on = o.get();
    g.push(o, [parts, on, m, n, widths] {
      std::size_t off = 0;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (parts[k]->requires_grad) {
          auto& gp = parts[k]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < widths[k]; ++j) {
              gp[i * widths[k] + j] += on->grad[i * n + off + j];
            }
          }
        }
        off += widths[k];
      }
    });
  }
  return o;
}

template <typename T>
Var<T> reshape(Graph<T>& g, const Var<T>& x, Shape shape) {
  Var<T> o = out_var(x->value.reshaped(std::move(shape)));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return o;
}

template <typename T>
Var<T> gather_rows(Graph<T>& g, const Var<T>& x,
                   const std::vector<std::size_t>& rows) {
  require_2d(x->value.shape(), "gather_rows");
  const std::size_t m = x->value.dim(0), n = x->value.dim(1);
  Tensor<T> out({rows.size(), n});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= m) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x->value.data() + rows[k] * n, n, out.data() + k * n);
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on, rows, n] {
      auto& gx = x->grad_buffer();
      for (std::size_t k = 0; k < rows.size(); ++k) {
        for (std::size_t j = 0; j < n; ++j) {
          gx[rows[k] * n + j] += on->grad[k * n + j];
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& b,
              std::size_t stride) {
  require_rank(x->value.shape(), 3, "conv2d input");
  require_rank(w->value.shape(), 4, "conv2d weight");
  const std::size_t c = x->value.dim(0), h = x->value.dim(1),
                    wd = x->value.dim(2);
  const std::size_t co = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != c || w->value.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: weight " + shape_str(w->value.shape()) +
                     " incompatible with input " +
                     shape_str(x->value.shape()));
  }
  if (b && b->value.size() != co) throw ShapeError("conv2d: bias size");
  if (stride == 0) throw ShapeError("conv2d: zero stride");
  const std::size_t pad = k / 2;
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t ckk = c * k * k;
  const std::size_t hw_out = ho * wo;
  const bool pointwise = (k == 1 && stride == 1);

  Tensor<T> out({co, ho, wo});
  auto Wm = cmap(w->value, co, ckk);
  if (pointwise) {
    map(out, co, hw_out).noalias() = Wm * cmap(x->value, c, h * wd);
  } else {
    const std::size_t rows_per =
        std::max<std::size_t>(1, kIm2colBudget / std::max<std::size_t>(1, ckk * wo));
    std::vector<T> cols;
    for (std::size_t r0 = 0; r0 < ho; r0 += rows_per) {
      const std::size_t rows = std::min(rows_per, ho - r0);
      const std::size_t ncol = rows * wo;
      cols.resize(ckk * ncol);
      im2col(x->value.data(), c, h, wd, k, stride, r0, rows, wo, cols.data());
      StridedMap<T> O(out.data() + r0 * wo, static_cast<Eigen::Index>(co),
                      static_cast<Eigen::Index>(ncol),
                      Stride(static_cast<Eigen::Index>(hw_out)));
      O.noalias() = Wm * CMapM<T>(cols.data(), static_cast<Eigen::Index>(ckk),
                                  static_cast<Eigen::Index>(ncol));
    }
  }
  if (b) {
    for (std::size_t o = 0; o < co; ++o) {
      T* p = out.data() + o * hw_out;
      const T bv = b->value[o];
      for (std::size_t i = 0; i < hw_out; ++i) p[i] += bv;
    }
  }
  Var<T> o = out_var(std::move(out));
  if (g.tracks(o, {&x, &w, &b})) {
    Node<T>* on = o.get();
    g.push(o, [x, w, b, on, c, h, wd, co, k, stride, ho, wo, ckk, hw_out,
               pointwise] {
      const auto& dy = on->grad;
      if (b && b->requires_grad) {
        auto& gb = b->grad_buffer();
        for (std::size_t oc = 0; oc < co; ++oc) {
          T s = 0;
          for (std::size_t i = 0; i < hw_out; ++i) s += dy[oc * hw_out + i];
          gb[oc] += s;
        }
      }
      auto Wm = cmap(w->value, co, ckk);
      if (pointwise) {
        auto dY = cmap(dy, co, hw_out);
        if (w->requires_grad) {
          map(w->grad_buffer(), co, ckk).noalias() +=
              dY * cmap(x->value, c, h * wd).transpose();
        }
        if (x->requires_grad) {
          map(x->grad_buffer(), c, h * wd).noalias() += Wm.transpose() * dY;
        }
        return;
      }
      const std::size_t rows_per = std::max<std::size_t>(
          1, kIm2colBudget / std::max<std::size_t>(1, ckk * wo));
      std::vector<T> cols, dcols;
      for (std::size_t r0 = 0; r0 < ho; r0 += rows_per) {
        const std::size_t rows = std::min(rows_per, ho - r0);
        const std::size_t ncol = rows * wo;
        CStridedMap<T> dY(dy.data() + r0 * wo, static_cast<Eigen::Index>(co),
                          static_cast<Eigen::Index>(ncol),
                          Stride(static_cast<Eigen::Index>(hw_out)));
        if (w->requires_grad) {
          cols.resize(ckk * ncol);
          im2col(x->value.data(), c, h, wd, k, stride, r0, rows, wo,
                 cols.data());
          map(w->grad_buffer(), co, ckk).noalias() +=
              dY * CMapM<T>(cols.data(), static_cast<Eigen::Index>(ckk),
                            static_cast<Eigen::Index>(ncol))
                       .transpose();
        }
        if (x->requires_grad) {
          dcols.resize(ckk * ncol);
          MapM<T>(dcols.data(), static_cast<Eigen::Index>(ckk),
                  static_cast<Eigen::Index>(ncol))
              .noalias() = Wm.transpose() * dY;
          col2im(dcols.data(), c, h, wd, k, stride, r0, rows, wo,
                 x->grad_buffer().data());
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> resize_bilinear(Graph<T>& g, const Var<T>& x, std::size_t out_h,
                       std::size_t out_w) {
  Var<T> o = out_var(hps::resize_bilinear(x->value, out_h, out_w));
  if (g.tracks(o, {&x})) {
    Node<T>* on = o.get();
    g.push(o, [x, on, out_h, out_w] {
      const std::size_t c = x->value.dim(0), h = x->value.dim(1),
                        w = x->value.dim(2);
      const Taps ty = make_taps(h, out_h), tx = make_taps(w, out_w);
      auto& gx = x->grad_buffer();
      for (std::size_t ci = 0; ci < c; ++ci) {
        resize_plane_backward(on->grad.data() + ci * out_h * out_w, out_h,
                              out_w, gx.data() + ci * h * w, w, ty, tx);
      }
    });
  }
  return o;
}

template <typename T>
Var<T> sigmoid_bce_mean(Graph<T>& g, const Var<T>& logits,
                        const Tensor<T>& targets) {
  if (logits->value.shape() != targets.shape()) {
    throw ShapeError("sigmoid_bce_mean: logits " +
                     shape_str(logits->value.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::size_t n = targets.size();
  if (n == 0) throw ShapeError("sigmoid_bce_mean: empty input");
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = logits->value[i];
    sum += softplus(x) - x * targets[i];
  }
  Var<T> o = out_var(Tensor<T>({1}, {sum / static_cast<T>(n)}));
  if (g.tracks(o, {&logits})) {
    Node<T>* on = o.get();
    g.push(o, [logits, on, targets, n] {
      auto& gx = logits->grad_buffer();
      const T s = on->grad[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        gx[i] += s * (sigmoid(logits->value[i]) - targets[i]);
      }
    });
  }
  return o;
}

template <typename T>
Var<T> dice_rows_mean(Graph<T>& g, const Var<T>& logits,
                      const Tensor<T>& targets) {
  if (logits->value.shape() != targets.shape()) {
    throw ShapeError("dice_rows_mean: logits " +
                     shape_str(logits->value.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::size_t m = rows_of(targets.shape()), n = cols_of(targets.shape());
  if (m == 0) throw ShapeError("dice_rows_mean: empty input");
  std::vector<T> inter(m, 0), denom(m, 0);
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const T p = sigmoid(logits->value[i * n + j]);
      const T t = targets[i * n + j];
      inter[i] += p * t;
      denom[i] += p + t;
    }
    denom[i] += T(1);
    total += T(1) - (T(2) * inter[i] + T(1)) / denom[i];
  }
  Var<T> o = out_var(Tensor<T>({1}, {total / static_cast<T>(m)}));
  if (g.tracks(o, {&logits})) {
    Node<T>* on = o.get();
    g.push(o, [logits, on, targets, m, n, inter = std::move(inter),
               denom = std::move(denom)] {
      auto& gx = logits->grad_buffer();
      const T s = on->grad[0] / static_cast<T>(m);
      for (std::size_t i = 0; i < m; ++i) {
        const T num = T(2) * inter[i] + T(1);
        const T d2 = denom[i] * denom[i];
        for (std::size_t j = 0; j < n; ++j) {
          const T p = sigmoid(logits->value[i * n + j]);
          const T t = targets[i * n + j];
          const T dp = -(T(2) * t * denom[i] - num) / d2;
          gx[i * n + j] += s * dp * p * (T(1) - p);
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> cross_entropy(Graph<T>& g, const Var<T>& logits,
                     const std::vector<int>& targets,
                     const std::vector<T>& weights) {
  require_2d(logits->value.shape(), "cross_entropy");
  const std::size_t m = logits->value.dim(0), k = logits->value.dim(1);
  if (targets.size() != m || weights.size() != m) {
    throw ShapeError("cross_entropy: target/weight count mismatch");
  }
  if (m == 0) throw ShapeError("cross_entropy: no rows");
  Tensor<T> probs({m, k});
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= k) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range [0, " + std::to_string(k) + ")");
    }
    const T* row = logits->value.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
    total += weights[i] * (lse - row[targets[i]]);
  }
  Var<T> o = out_var(Tensor<T>({1}, {total / static_cast<T>(m)}));
  if (g.tracks(o, {&logits})) {
    Node<T>* on = o.get();
    g.push(o, [logits, on, targets, weights, m, k, probs = std::move(probs)] {
      auto& gx = logits->grad_buffer();
      const T s = on->grad[0] / static_cast<T>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const T onehot = static_cast<int>(j) == targets[i] ? T(1) : T(0);
          gx[i * k + j] += s * weights[i] * (probs[i * k + j] - onehot);
        }
      }
    });
  }
  return o;
}

template <typename T>
Var<T> weighted_sum(Graph<T>& g, const std::vector<Var<T>>& terms,
                    const std::vector<T>& weights) {
  if (terms.size() != weights.size()) {
    throw ShapeError("weighted_sum: term/weight count mismatch");
  }
  T total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i]->value.size() != 1) {
      throw ShapeError("weighted_sum: terms must be scalars");
    }
    total += weights[i] * terms[i]->value[0];
  }
  Var<T> o = out_var(Tensor<T>({1}, {total}));
  if (g.tracks(o, terms)) {
    Node<T>* on = o.get();
    g.push(o, [terms, weights, on] {
      for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i]->requires_grad) {
          terms[i]->grad_buffer()[0] += weights[i] * on->grad[0];
        }
      }
    });
  }
  return o;
}

#define HPS_INSTANTIATE_OPS(T)                                                \
  template Var<T> matmul(Graph<T>&, const Var<T>&, const Var<T>&, bool, bool); \
  template Var<T> linear(Graph<T>&, const Var<T>&, const Var<T>&,             \
                         const Var<T>&);                                      \
  template Var<T> add(Graph<T>&, const Var<T>&, const Var<T>&);               \
  template Var<T> add_row(Graph<T>&, const Var<T>&, const Var<T>&);           \
  template Var<T> scale(Graph<T>&, const Var<T>&, T);                         \
  template Var<T> relu(Graph<T>&, const Var<T>&);                             \
  template Var<T> layer_norm(Graph<T>&, const Var<T>&, const Var<T>&,         \
                             const Var<T>&, T);                               \
  template Var<T> softmax_rows(Graph<T>&, const Var<T>&,                      \
                               const AttentionMask*);                         \
  template Var<T> transpose(Graph<T>&, const Var<T>&);                        \
  template Var<T> slice_cols(Graph<T>&, const Var<T>&, std::size_t,           \
                             std::size_t);                                    \
  template Var<T> slice_rows(Graph<T>&, const Var<T>&, std::size_t,           \
                             std::size_t);                                    \
  template Var<T> concat_cols(Graph<T>&, const std::vector<Var<T>>&);         \
  template Var<T> reshape(Graph<T>&, const Var<T>&, Shape);                   \
  template Var<T> gather_rows(Graph<T>&, const Var<T>&,                       \
                              const std::vector<std::size_t>&);               \
  template Var<T> conv2d(Graph<T>&, const Var<T>&, const Var<T>&,             \
                         const Var<T>&, std::size_t);                         \
  template Var<T> resize_bilinear(Graph<T>&, const Var<T>&, std::size_t,      \
                                  std::size_t);                               \
  template Var<T> sigmoid_bce_mean(Graph<T>&, const Var<T>&,                  \
                                   const Tensor<T>&);                         \
  template Var<T> dice_rows_mean(Graph<T>&, const Var<T>&, const Tensor<T>&); \
  template Var<T> cross_entropy(Graph<T>&, const Var<T>&,                     \
                                const std::vector<int>&,                      \
                                const std::vector<T>&);                       \
  template Var<T> weighted_sum(Graph<T>&, const std::vector<Var<T>>&,         \
                               const std::vector<T>&);

HPS_INSTANTIATE_OPS(float)
HPS_INSTANTIATE_OPS(double)
#undef HPS_INSTANTIATE_OPS

}  // namespace ops

template Tensor<float> resize_bilinear(const Tensor<float>&, std::size_t,
                                       std::size_t);
template Tensor<double> resize_bilinear(const Tensor<double>&, std::size_t,
                                        std::size_t);

}  // namespace hps
