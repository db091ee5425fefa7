#pragma once

// Low-rank adapter attached in parallel to a frozen dense layer:
//
//   h = W0 x + bias + alpha * B (A x)
//
// W0 [d2 x d1] and bias stay frozen; A [r x d1] starts Gaussian and
// B [d2 x r] starts at zero, so a fresh adapter leaves the layer unchanged.

#include <array>
#include <memory>
#include <stdexcept>
#include <string>

#include "pathadapt/random.hpp"
#include "pathadapt/tensor.hpp"

namespace pathadapt {

enum class AttnTarget : int { q = 0, k = 1, v = 2, o = 3 };

inline constexpr std::array<const char*, 4> kAttnTargetNames{"q", "k", "v", "o"};

struct AdapterConfig {
  std::size_t rank = 64;
  float alpha = 1.0f;
  std::array<bool, 4> targets{true, true, true, true};  // q, k, v, o
  bool enabled = true;
  float init_std = 0.02f;
  std::uint64_t seed = 0;

  std::size_t target_count() const {
    std::size_t n = 0;
    for (bool t : targets) n += t;
    return n;
  }

  void validate() const {
    if (enabled && rank < 1) throw std::invalid_argument("adapter rank must be >= 1");
  }

  // Parses "qkvo"-style target strings.
  static std::array<bool, 4> parse_targets(const std::string& s) {
    std::array<bool, 4> t{false, false, false, false};
    for (char c : s) {
      const std::string name(1, c);
      bool found = false;
      for (std::size_t i = 0; i < 4; ++i)
        if (name == kAttnTargetNames[i]) t[i] = found = true;
      if (!found) throw std::invalid_argument("unknown adapter target '" + name + "' (use q,k,v,o)");
    }
    return t;
  }
};

template <class T>
struct AdapterLayer {
  Tensor<T> W0;    // shared with the host layer, frozen
  Tensor<T> bias;  // may be undefined
  Tensor<T> A;
  Tensor<T> B;
  T alpha = T(1);
  bool enabled = true;

  std::size_t rank() const { return A.dim(0); }
  std::size_t in_features() const { return W0.dim(1); }
  std::size_t out_features() const { return W0.dim(0); }
  std::size_t param_count() const { return A.size() + B.size(); }
};

template <class T>
AdapterLayer<T> make_adapter(const Tensor<T>& W0, const Tensor<T>& bias, std::size_t rank,
                             T alpha, Rng& rng, double init_std = 0.02) {
  if (rank < 1) throw std::invalid_argument("adapter rank must be >= 1");
  detail::require_rank2(W0, "make_adapter");
  AdapterLayer<T> layer;
  layer.W0 = W0;
  layer.bias = bias;
  layer.alpha = alpha;
  layer.A = Tensor<T>({rank, W0.dim(1)});
  for (auto& a : layer.A.values()) a = static_cast<T>(rng.normal(0.0, init_std));
  layer.B = Tensor<T>({W0.dim(0), rank});
  layer.A.set_requires_grad(true);
  layer.B.set_requires_grad(true);
  return layer;
}

// x: [d1] or [n x d1]. Gradient reaches A and B only; W0 and bias are
// frozen by their own requires_grad flags.
template <class T>
Tensor<T> adapter_forward(const AdapterLayer<T>& layer, const Tensor<T>& x) {
  const bool vec = x.rank() == 1;
  if ((vec ? x.dim(0) : x.rank() == 2 ? x.dim(1) : 0) != layer.in_features())
    throw DimensionError("adapter_forward: input " + shape_str(x.shape()) +
                         " does not match d1 = " + std::to_string(layer.in_features()));
  const Tensor<T> xm = vec ? reshape(x, {1, x.dim(0)}) : x;
  Tensor<T> h = linear(xm, layer.W0, layer.bias);
  if (layer.enabled) h = add(h, scale(linear(linear(xm, layer.A), layer.B), layer.alpha));
  return vec ? reshape(h, {layer.out_features()}) : h;
}

// W0 + alpha * B A.
template <class T>
Tensor<T> merge(const AdapterLayer<T>& layer) {
  NoGradGuard ng;
  Tensor<T> delta = matmul(layer.B, layer.A);
  std::vector<T> w(layer.W0.values());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += layer.alpha * delta[i];
  return Tensor<T>(layer.W0.shape(), std::move(w));
}

}  // namespace pathadapt
