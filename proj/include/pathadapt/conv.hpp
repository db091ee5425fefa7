#pragma once

// Image-shaped ops on single [C x H x W] tensors: strided convolution via
// im2col, 2x2/stride-2 transposed convolution, channel concat and bilinear
// resize.

#include <cmath>
#include <vector>

#include "pathadapt/tensor.hpp"

namespace pathadapt {

namespace detail {
template <class T>
void require_chw(const Tensor<T>& t, const char* op) {
  require(t.rank() == 3, std::string(op) + ": expected [C x H x W], got " + shape_str(t.shape()));
}
}  // namespace detail

// weight [Co x Ci x K x K], bias [Co].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  detail::require_chw(x, "conv2d");
  detail::require(weight.rank() == 4, "conv2d: weight must be [Co x Ci x K x K], got " +
                                          shape_str(weight.shape()));
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = weight.dim(0), kk = weight.dim(2);
  detail::require(weight.dim(1) == ci && weight.dim(3) == kk,
                  "conv2d: weight " + shape_str(weight.shape()) + " does not fit input " +
                      shape_str(x.shape()));
  detail::require(bias.size() == co, "conv2d: bias width mismatch");
  detail::require(stride > 0 && h + 2 * pad >= kk && w + 2 * pad >= kk, "conv2d: bad geometry");
  const std::size_t ho = (h + 2 * pad - kk) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kk) / stride + 1;
  const std::size_t cols = ci * kk * kk, npix = ho * wo;

  // im2col: [npix x cols]
  std::vector<T> col(npix * cols, T(0));
  std::vector<long> src(npix * cols, -1);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const std::size_t row = oy * wo + ox;
      for (std::size_t c = 0; c < ci; ++c)
        for (std::size_t ky = 0; ky < kk; ++ky)
          for (std::size_t kx = 0; kx < kk; ++kx) {
            const long iy = long(oy * stride + ky) - long(pad);
            const long ix = long(ox * stride + kx) - long(pad);
            if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
            const std::size_t at = row * cols + (c * kk + ky) * kk + kx;
            src[at] = long((c * h + std::size_t(iy)) * w + std::size_t(ix));
            col[at] = x[std::size_t(src[at])];
          }
    }
  // out[co x npix] = W[co x cols] * col^T
  std::vector<T> y(co * npix);
  auto colt = detail::transposed(col.data(), npix, cols);
  detail::gemm_nn(weight.data().data(), colt.data(), y.data(), co, cols, npix, false);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t p = 0; p < npix; ++p) y[o * npix + p] += bias[o];

  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.node();
  return detail::make_result<T>(
      {co, ho, wo}, std::move(y), "conv2d", {&x, &weight, &bias},
      [xn, wn, bn, co, cols, npix, col = std::move(col), src = std::move(src)](Node<T>& out) {
        const T* dy = out.grad.data();
        if (T* db = detail::grad_of(bn))
          for (std::size_t o = 0; o < co; ++o) {
            double s = 0.0;
            for (std::size_t p = 0; p < npix; ++p) s += dy[o * npix + p];
            db[o] += static_cast<T>(s);
          }
        if (T* dw = detail::grad_of(wn))
          detail::gemm_nn(dy, col.data(), dw, co, npix, cols, true);
        if (T* dx = detail::grad_of(xn)) {
          // dcol[npix x cols] = dy^T[npix x co] * W[co x cols]
          auto dyt = detail::transposed(dy, co, npix);
          std::vector<T> dcol(npix * cols);
          detail::gemm_nn(dyt.data(), wn->data.data(), dcol.data(), npix, co, cols, false);
          for (std::size_t i = 0; i < dcol.size(); ++i)
            if (src[i] >= 0) dx[std::size_t(src[i])] += dcol[i];
        }
      });
}

// Kernel 2, stride 2: every input pixel writes a 2x2 output block.
// weight [Ci x Co x 2 x 2], bias [Co]. Output [Co x 2H x 2W].
template <class T>
Tensor<T> conv_transpose2x2(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_chw(x, "conv_transpose2x2");
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  detail::require(weight.rank() == 4 && weight.dim(0) == ci && weight.dim(2) == 2 &&
                      weight.dim(3) == 2,
                  "conv_transpose2x2: weight " + shape_str(weight.shape()) +
                      " does not fit input " + shape_str(x.shape()));
  const std::size_t co = weight.dim(1);
  detail::require(bias.size() == co, "conv_transpose2x2: bias width mismatch");
  const std::size_t npix = h * w, taps = co * 4;
  // Y[npix x taps] = X^T[npix x ci] * W[ci x taps]
  auto xt = detail::transposed(x.data().data(), ci, npix);
  std::vector<T> taps_out(npix * taps);
  detail::gemm_nn(xt.data(), weight.data().data(), taps_out.data(), npix, ci, taps, false);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<T> y(co * ho * wo);
  auto out_index = [=](std::size_t pix, std::size_t tap) {
    const std::size_t o = tap / 4, dy = (tap / 2) % 2, dx = tap % 2;
    const std::size_t iy = pix / w, ix = pix % w;
    return (o * ho + 2 * iy + dy) * wo + 2 * ix + dx;
  };
  for (std::size_t p = 0; p < npix; ++p)
    for (std::size_t t = 0; t < taps; ++t) y[out_index(p, t)] = taps_out[p * taps + t] + bias[t / 4];

  Node<T>* xn = x.node();
  Node<T>* wn = weight.node();
  Node<T>* bn = bias.node();
  return detail::make_result<T>(
      {co, ho, wo}, std::move(y), "conv_transpose2x2", {&x, &weight, &bias},
      [xn, wn, bn, ci, co, npix, taps, out_index, xt = std::move(xt)](Node<T>& out) {
        std::vector<T> dtaps(npix * taps);
        for (std::size_t p = 0; p < npix; ++p)
          for (std::size_t t = 0; t < taps; ++t) dtaps[p * taps + t] = out.grad[out_index(p, t)];
        if (T* db = detail::grad_of(bn))
          for (std::size_t o = 0; o < co; ++o) {
            double s = 0.0;
            for (std::size_t p = 0; p < npix; ++p)
              for (std::size_t k = 0; k < 4; ++k) s += dtaps[p * taps + o * 4 + k];
            db[o] += static_cast<T>(s);
          }
        if (T* dw = detail::grad_of(wn)) {
          // dW[ci x taps] = X[ci x npix] * dtaps
          detail::gemm_nn(xn->data.data(), dtaps.data(), dw, ci, npix, taps, true);
        }
        if (T* dx = detail::grad_of(xn)) {
          // dX[ci x npix] = W[ci x taps] * dtaps^T
          auto dt = detail::transposed(dtaps.data(), npix, taps);
          detail::gemm_nn(wn->data.data(), dt.data(), dx, ci, taps, npix, true);
        }
      });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_chw(a, "concat_channels");
  detail::require_chw(b, "concat_channels");
  detail::require(a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
                  "concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> y(a.values());
  y.insert(y.end(), b.data().begin(), b.data().end());
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  const std::size_t na = a.size();
  return detail::make_result<T>({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(y),
                                "concat_channels", {&a, &b}, [an, bn, na](Node<T>& out) {
                                  if (T* d = detail::grad_of(an))
                                    for (std::size_t i = 0; i < na; ++i) d[i] += out.grad[i];
                                  if (T* d = detail::grad_of(bn))
                                    for (std::size_t i = 0; i < bn->data.size(); ++i)
                                      d[i] += out.grad[na + i];
                                });
}

// Bilinear resampling with half-pixel centers (align_corners = false).
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_chw(x, "bilinear_resize");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return x;
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double s = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      double pos = (double(o) + 0.5) * s - 0.5;
      pos = std::clamp(pos, 0.0, double(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(pos));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, pos - double(i0)};
    }
    return t;
  };
  auto ty = taps(h, out_h), tx = taps(w, out_w);
  std::vector<T> y(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Tap& a = ty[oy];
        const Tap& b = tx[ox];
        const T* base = x.data().data() + ch * h * w;
        const double v = (1 - a.f) * ((1 - b.f) * base[a.i0 * w + b.i0] + b.f * base[a.i0 * w + b.i1]) +
                         a.f * ((1 - b.f) * base[a.i1 * w + b.i0] + b.f * base[a.i1 * w + b.i1]);
        y[(ch * out_h + oy) * out_w + ox] = static_cast<T>(v);
      }
  Node<T>* xn = x.node();
  return detail::make_result<T>(
      {c, out_h, out_w}, std::move(y), "bilinear_resize", {&x},
      [xn, c, h, w, out_h, out_w, ty, tx](Node<T>& out) {
        T* dx = detail::grad_of(xn);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const double g = out.grad[(ch * out_h + oy) * out_w + ox];
              const Tap& a = ty[oy];
              const Tap& b = tx[ox];
              T* base = dx + ch * h * w;
              base[a.i0 * w + b.i0] += static_cast<T>(g * (1 - a.f) * (1 - b.f));
              base[a.i0 * w + b.i1] += static_cast<T>(g * (1 - a.f) * b.f);
              base[a.i1 * w + b.i0] += static_cast<T>(g * a.f * (1 - b.f));
              base[a.i1 * w + b.i1] += static_cast<T>(g * a.f * b.f);
            }
      });
}

}  // namespace pathadapt
