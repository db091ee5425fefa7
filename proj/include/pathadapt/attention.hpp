#pragma once

// Fused multi-head scaled dot-product attention over a batch of sequences
// plus the token plumbing a ViT needs (class-token prepend, positional add).

#include <cmath>
#include <vector>

#include "pathadapt/tensor.hpp"

namespace pathadapt {

// q, k, v: [(batch*seq) x dim]. Returns [(batch*seq) x dim]. When `probs`
// is non-null it receives the attention matrices, laid out
// [batch][head][query][key].
template <class T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              std::size_t heads, std::size_t seq,
                              std::vector<T>* probs = nullptr) {
  detail::require_same(q, k, "multihead_attention");
  detail::require_same(q, v, "multihead_attention");
  detail::require_rank2(q, "multihead_attention");
  const std::size_t rows = q.dim(0), dim = q.dim(1);
  detail::require(heads > 0 && dim % heads == 0, "multihead_attention: dim " +
                                                     std::to_string(dim) + " not divisible by " +
                                                     std::to_string(heads) + " heads");
  detail::require(seq > 0 && rows % seq == 0, "multihead_attention: " + std::to_string(rows) +
                                                  " rows is not a multiple of seq " +
                                                  std::to_string(seq));
  const std::size_t batch = rows / seq, dh = dim / heads;
  const double scale = 1.0 / std::sqrt(double(dh));

  std::vector<T> p(batch * heads * seq * seq);
  std::vector<T> y(rows * dim, T(0));
  std::vector<double> srow(seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = p.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = q.data().data() + (b * seq + i) * dim + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < seq; ++j) {
          const T* kj = k.data().data() + (b * seq + j) * dim + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += double(qi[c]) * kj[c];
          srow[j] = s * scale;
          mx = std::max(mx, srow[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) z += (srow[j] = std::exp(srow[j] - mx));
        for (std::size_t j = 0; j < seq; ++j) P[i * seq + j] = static_cast<T>(srow[j] / z);
        std::vector<double> acc(dh, 0.0);
        for (std::size_t j = 0; j < seq; ++j) {
          const double pij = P[i * seq + j];
          const T* vj = v.data().data() + (b * seq + j) * dim + h * dh;
          for (std::size_t c = 0; c < dh; ++c) acc[c] += pij * vj[c];
        }
        T* yi = y.data() + (b * seq + i) * dim + h * dh;
        for (std::size_t c = 0; c < dh; ++c) yi[c] = static_cast<T>(acc[c]);
      }
    }
  if (probs) *probs = p;

  Node<T>* qn = q.node();
  Node<T>* kn = k.node();
  Node<T>* vn = v.node();
  return detail::make_result<T>(
      q.shape(), std::move(y), "multihead_attention", {&q, &k, &v},
      [qn, kn, vn, p = std::move(p), batch, heads, seq, dim, dh, scale](Node<T>& out) {
        T* dq = detail::grad_of(qn);
        T* dk = detail::grad_of(kn);
        T* dv = detail::grad_of(vn);
        const T* dy = out.grad.data();
        std::vector<double> dp(seq), ds(seq);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = p.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const T* dyi = dy + (b * seq + i) * dim + h * dh;
              // dP_ij = dy_i . v_j ; dV_j += P_ij dy_i
              double dot = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                const T* vj = vn->data.data() + (b * seq + j) * dim + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += double(dyi[c]) * vj[c];
                dp[j] = s;
                dot += s * P[i * seq + j];
                if (dv) {
                  T* dvj = dv + (b * seq + j) * dim + h * dh;
                  const double pij = P[i * seq + j];
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += static_cast<T>(pij * dyi[c]);
                }
              }
              for (std::size_t j = 0; j < seq; ++j) ds[j] = P[i * seq + j] * (dp[j] - dot) * scale;
              const T* qi = qn->data.data() + (b * seq + i) * dim + h * dh;
              T* dqi = dq ? dq + (b * seq + i) * dim + h * dh : nullptr;
              for (std::size_t j = 0; j < seq; ++j) {
                const T* kj = kn->data.data() + (b * seq + j) * dim + h * dh;
                if (dqi)
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += static_cast<T>(ds[j] * kj[c]);
                if (dk) {
                  T* dkj = dk + (b * seq + j) * dim + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += static_cast<T>(ds[j] * qi[c]);
                }
              }
            }
          }
      });
}

// patch tokens [(batch*T) x d] -> [(batch*(T+1)) x d] with `cls` [1 x d]
// inserted ahead of each sequence.
template <class T>
Tensor<T> prepend_class_token(const Tensor<T>& patches, const Tensor<T>& cls, std::size_t batch) {
  detail::require_rank2(patches, "prepend_class_token");
  const std::size_t d = patches.dim(1);
  detail::require(cls.size() == d, "prepend_class_token: class token width mismatch");
  detail::require(batch > 0 && patches.dim(0) % batch == 0,
                  "prepend_class_token: rows not divisible by batch");
  const std::size_t t = patches.dim(0) / batch, s = t + 1;
  std::vector<T> y(batch * s * d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(cls.data().data(), d, y.data() + b * s * d);
    std::copy_n(patches.data().data() + b * t * d, t * d, y.data() + (b * s + 1) * d);
  }
  Node<T>* pn = patches.node();
  Node<T>* cn = cls.node();
  return detail::make_result<T>({batch * s, d}, std::move(y), "prepend_class_token",
                                {&patches, &cls}, [pn, cn, batch, t, s, d](Node<T>& out) {
                                  T* dp = detail::grad_of(pn);
                                  T* dc = detail::grad_of(cn);
                                  for (std::size_t b = 0; b < batch; ++b) {
                                    if (dc)
                                      for (std::size_t j = 0; j < d; ++j)
                                        dc[j] += out.grad[b * s * d + j];
                                    if (dp)
                                      for (std::size_t i = 0; i < t * d; ++i)
                                        dp[b * t * d + i] += out.grad[(b * s + 1) * d + i];
                                  }
                                });
}

// x [(batch*seq) x d] + pos [seq x d], repeated for each sequence.
template <class T>
Tensor<T> add_positional(const Tensor<T>& x, const Tensor<T>& pos) {
  detail::require_rank2(x, "add_positional");
  detail::require_rank2(pos, "add_positional");
  const std::size_t seq = pos.dim(0), d = pos.dim(1);
  detail::require(x.dim(1) == d && x.dim(0) % seq == 0,
                  "add_positional: " + shape_str(x.shape()) + " vs positions " +
                      shape_str(pos.shape()));
  const std::size_t rows = x.dim(0);
  std::vector<T> y(x.values());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] += pos[(r % seq) * d + j];
  Node<T>* xn = x.node();
  Node<T>* pn = pos.node();
  return detail::make_result<T>(x.shape(), std::move(y), "add_positional", {&x, &pos},
                                [xn, pn, rows, seq, d](Node<T>& out) {
                                  if (T* dx = detail::grad_of(xn))
                                    for (std::size_t i = 0; i < rows * d; ++i) dx[i] += out.grad[i];
                                  if (T* dp = detail::grad_of(pn))
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < d; ++j)
                                        dp[(r % seq) * d + j] += out.grad[r * d + j];
                                });
}

}  // namespace pathadapt
