#pragma once

#include <Eigen/Core>

#include <cstring>
#include <vector>

#include "kdmri/errors.hpp"
#include "kdmri/tensor.hpp"

namespace kdmri {

// One 2-D convolution, stride 1, pad (kernel-1)/2 so spatial size is
// preserved. Weights live in an external flat parameter vector at w_off
// (out*in*k*k scalars, out-major) followed by the bias at b_off (out scalars).
struct ConvSpec {
  int in_ch = 0, out_ch = 0, kernel = 3;
  size_t w_off = 0, b_off = 0;

  size_t weight_count() const {
    return static_cast<size_t>(out_ch) * in_ch * kernel * kernel;
  }
  size_t bias_count() const { return static_cast<size_t>(out_ch); }
};

// Per-thread scratch for the im2col buffers.
template <class T>
struct Workspace {
  std::vector<T> col, col_grad;

  void ensure(size_t n) {
    if (col.size() < n) col.resize(n);
    if (col_grad.size() < n) col_grad.resize(n);
  }
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRM = Eigen::Map<const RowMat<T>>;

// col is (C*k*k) x (H*W) row-major; row index (c*k + ki)*k + kj, column
// index y*W + x.
template <class T>
void im2col(const T* im, int C, int H, int W, int k, T* col) {
  const int pad = k / 2;
  const size_t plane = static_cast<size_t>(H) * W;
  size_t row = 0;
  for (int c = 0; c < C; ++c) {
    const T* src = im + c * plane;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj, ++row) {
        T* dst = col + row * plane;
        const int dy = ki - pad, dx = kj - pad;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          T* drow = dst + static_cast<size_t>(y) * W;
          if (sy < 0 || sy >= H) {
            std::memset(drow, 0, sizeof(T) * W);
            continue;
          }
          const T* srow = src + static_cast<size_t>(sy) * W;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          if (x0 > 0) std::memset(drow, 0, sizeof(T) * x0);
          if (x1 > x0) std::memcpy(drow + x0, srow + x0 + dx, sizeof(T) * (x1 - x0));
          if (x1 < W) std::memset(drow + x1, 0, sizeof(T) * (W - x1));
        }
      }
    }
  }
}

// Scatter-add the col layout back onto an image (adjoint of im2col).
template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, T* im) {
  const int pad = k / 2;
  const size_t plane = static_cast<size_t>(H) * W;
  size_t row = 0;
  for (int c = 0; c < C; ++c) {
    T* dst = im + c * plane;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj, ++row) {
        const T* src = col + row * plane;
        const int dy = ki - pad, dx = kj - pad;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const T* srow = src + static_cast<size_t>(y) * W;
          T* drow = dst + static_cast<size_t>(sy) * W;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int x = x0; x < x1; ++x) drow[x + dx] += srow[x];
        }
      }
    }
  }
}

}  // namespace detail

template <class T>
void conv_forward(const ConvSpec& spec, const T* params, const FeatureMap<T>& in,
                  FeatureMap<T>& out, Workspace<T>& ws) {
  const int K = spec.kernel;
  const size_t plane = in.plane();
  const size_t krows = static_cast<size_t>(spec.in_ch) * K * K;
  ws.ensure(krows * plane);
  detail::im2col(in.data(), in.c, in.h, in.w, K, ws.col.data());

  if (out.c != spec.out_ch || out.h != in.h || out.w != in.w)
    out = FeatureMap<T>(spec.out_ch, in.h, in.w);
  detail::CMapRM<T> W(params + spec.w_off, spec.out_ch, static_cast<Eigen::Index>(krows));
  detail::CMapRM<T> col(ws.col.data(), static_cast<Eigen::Index>(krows),
                        static_cast<Eigen::Index>(plane));
  detail::MapRM<T> O(out.data(), spec.out_ch, static_cast<Eigen::Index>(plane));
  O.noalias() = W * col;
  const T* bias = params + spec.b_off;
  for (int o = 0; o < spec.out_ch; ++o) {
    T* dst = out.channel(o);
    const T b = bias[o];
    for (size_t i = 0; i < plane; ++i) dst[i] += b;
  }
}

// grad_in is assigned; grad_params (same layout as params) is accumulated.
template <class T>
void conv_backward(const ConvSpec& spec, const T* params, const FeatureMap<T>& in,
                   const FeatureMap<T>& grad_out, FeatureMap<T>* grad_in, T* grad_params,
                   Workspace<T>& ws) {
  const int K = spec.kernel;
  const size_t plane = in.plane();
  const size_t krows = static_cast<size_t>(spec.in_ch) * K * K;
  ws.ensure(krows * plane);

  detail::CMapRM<T> G(grad_out.data(), spec.out_ch, static_cast<Eigen::Index>(plane));

  if (grad_params) {
    detail::im2col(in.data(), in.c, in.h, in.w, K, ws.col.data());
    detail::CMapRM<T> col(ws.col.data(), static_cast<Eigen::Index>(krows),
                          static_cast<Eigen::Index>(plane));
    detail::MapRM<T> GW(grad_params + spec.w_off, spec.out_ch,
                        static_cast<Eigen::Index>(krows));
    GW.noalias() += G * col.transpose();
    T* gb = grad_params + spec.b_off;
    for (int o = 0; o < spec.out_ch; ++o) {
      const T* src = grad_out.channel(o);
      T s = T(0);
      for (size_t i = 0; i < plane; ++i) s += src[i];
      gb[o] += s;
    }
  }

  if (grad_in) {
    detail::CMapRM<T> W(params + spec.w_off, spec.out_ch, static_cast<Eigen::Index>(krows));
    detail::MapRM<T> CG(ws.col_grad.data(), static_cast<Eigen::Index>(krows),
                        static_cast<Eigen::Index>(plane));
    CG.noalias() = W.transpose() * G;
    if (!grad_in->same_shape(in)) *grad_in = FeatureMap<T>(in.c, in.h, in.w);
    std::fill(grad_in->v.begin(), grad_in->v.end(), T(0));
    detail::col2im_add(ws.col_grad.data(), in.c, in.h, in.w, K, grad_in->data());
  }
}

template <class T>
void relu_inplace(FeatureMap<T>& f) {
  for (auto& x : f.v)
    if (x < T(0)) x = T(0);
}

// relu'(z) recovered from the stored post-activation value: a > 0 <=> z > 0.
template <class T>
void relu_backward_inplace(const FeatureMap<T>& post_act, FeatureMap<T>& grad) {
  for (size_t i = 0; i < grad.v.size(); ++i)
    if (post_act.v[i] <= T(0)) grad.v[i] = T(0);
}

}  // namespace kdmri
