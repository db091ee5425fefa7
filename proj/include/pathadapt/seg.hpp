#pragma once

// U-shaped segmenter: four stride-2 conv stages, four upsampling stages with
// skips, and a parallel backbone branch whose patch-token grid is projected
// and fed to the first decoder stage.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathadapt/conv.hpp"
#include "pathadapt/random.hpp"
#include "pathadapt/tensor.hpp"
#include "pathadapt/vit.hpp"

namespace pathadapt {

template <class T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
struct SegNet {
  static constexpr std::array<std::size_t, 4> kWidths{16, 32, 64, 128};

  std::size_t classes = 2;
  std::size_t in_channels = 3;
  std::array<ConvParams<T>, 4> enc;     // 3x3 stride 2
  std::array<ConvParams<T>, 4> dec;     // 3x3 stride 1, after concat
  std::array<ConvParams<T>, 4> up;      // 2x2 transposed, [Ci x Co x 2 x 2]
  ConvParams<T> head;                   // 1x1
  Tensor<T> proj_w;                     // [128 x backbone dim]
  Tensor<T> proj_b;                     // [128]

  SegNet() = default;
  SegNet(std::size_t backbone_dim, std::size_t num_classes, std::uint64_t seed,
         std::size_t channels = 3)
      : classes(num_classes), in_channels(channels) {
    Rng rng(seed);
    auto conv = [&](std::size_t co, std::size_t ci, std::size_t k) {
      ConvParams<T> p{Tensor<T>({co, ci, k, k}), Tensor<T>({co})};
      const double sd = std::sqrt(2.0 / double(ci * k * k));
      for (auto& v : p.weight.values()) v = static_cast<T>(rng.normal(0.0, sd));
      return p;
    };
    std::size_t ci = channels;
    for (std::size_t i = 0; i < 4; ++i) {
      enc[i] = conv(kWidths[i], ci, 3);
      ci = kWidths[i];
    }
    // Stage s consumes [deepest-first] skip e_(3-s) concatenated with the
    // previous stage output (or the projected tokens for s = 0).
    const std::array<std::size_t, 4> in_w{256, 128, 64, 32};
    const std::array<std::size_t, 4> mid_w{128, 64, 32, 16};
    const std::array<std::size_t, 4> out_w{64, 32, 16, 16};
    for (std::size_t s = 0; s < 4; ++s) {
      dec[s] = conv(mid_w[s], in_w[s], 3);
      up[s] = ConvParams<T>{Tensor<T>({mid_w[s], out_w[s], 2, 2}), Tensor<T>({out_w[s]})};
      const double sd = std::sqrt(1.0 / double(mid_w[s]));
      for (auto& v : up[s].weight.values()) v = static_cast<T>(rng.normal(0.0, sd));
    }
    head = conv(num_classes, 16, 1);
    proj_w = Tensor<T>({kWidths[3], backbone_dim});
    proj_b = Tensor<T>({kWidths[3]});
    const double sp = 1.0 / std::sqrt(double(backbone_dim));
    for (auto& v : proj_w.values()) v = static_cast<T>(rng.normal(0.0, sp));
    for (auto& [name, t] : named_parameters()) t.set_requires_grad(true);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string e = "seg.enc." + std::to_string(i);
      out.emplace_back(e + ".weight", enc[i].weight);
      out.emplace_back(e + ".bias", enc[i].bias);
    }
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string d = "seg.dec." + std::to_string(i);
      out.emplace_back(d + ".weight", dec[i].weight);
      out.emplace_back(d + ".bias", dec[i].bias);
      out.emplace_back(d + ".up.weight", up[i].weight);
      out.emplace_back(d + ".up.bias", up[i].bias);
    }
    out.emplace_back("seg.head.weight", head.weight);
    out.emplace_back("seg.head.bias", head.bias);
    out.emplace_back("seg.proj.weight", proj_w);
    out.emplace_back("seg.proj.bias", proj_b);
    return out;
  }
};

template <class T>
void check_seg_geometry(const ViTConfig& cfg, const Tensor<T>& image) {
  if (image.rank() != 3)
    throw DimensionError("seg_forward: expected [C x H x W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h % 16 != 0 || w % 16 != 0)
    throw std::invalid_argument("seg_forward: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " is not divisible by 16");
  if (h % cfg.patch_size != 0 || w % cfg.patch_size != 0)
    throw std::invalid_argument("seg_forward: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " is not divisible by patch size " +
                                std::to_string(cfg.patch_size));
  if (h != cfg.image_size || w != cfg.image_size)
    throw DimensionError("seg_forward: backbone expects " + std::to_string(cfg.image_size) +
                         "px images, got " + std::to_string(h) + "x" + std::to_string(w));
}

// Mask logits [classes x H x W].
template <class T>
Tensor<T> seg_forward(const SegNet<T>& net, const ViT<T>& backbone, const Tensor<T>& image,
                      bool use_adapters = true) {
  const auto& cfg = backbone.config();
  check_seg_geometry(cfg, image);
  std::array<Tensor<T>, 4> e;
  Tensor<T> x = image;
  for (std::size_t i = 0; i < 4; ++i) {
    x = relu(conv2d(x, net.enc[i].weight, net.enc[i].bias, 2, 1));
    e[i] = x;
  }
  // Patch tokens -> [dim grid] feature map at the bottleneck resolution.
  auto out = backbone.forward(backbone.embed_patches(image), use_adapters, false);
  const std::size_t g = cfg.grid();
  Tensor<T> fm = transpose(linear(out.patch_embs, net.proj_w, net.proj_b));
  fm = reshape(fm, {net.proj_w.dim(0), g, g});
  fm = bilinear_resize(fm, e[3].dim(1), e[3].dim(2));

  Tensor<T> d = fm;
  for (std::size_t s = 0; s < 4; ++s) {
    Tensor<T> cat = concat_channels(e[3 - s], d);
    Tensor<T> h = relu(conv2d(cat, net.dec[s].weight, net.dec[s].bias, 1, 1));
    d = conv_transpose2x2(h, net.up[s].weight, net.up[s].bias);
  }
  return conv2d(d, net.head.weight, net.head.bias, 1, 0);
}

inline constexpr double kDiceSmoothing = 1.0;

// 0.5 * mean pixel cross-entropy + 0.5 * (1 - mean over classes of soft dice),
// soft dice_c = (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps).
template <class T>
Tensor<T> seg_loss(const Tensor<T>& logits, const std::vector<int>& target) {
  if (logits.rank() != 3)
    throw DimensionError("seg_loss: logits must be [K x H x W], got " + shape_str(logits.shape()));
  const std::size_t k = logits.dim(0), n = logits.dim(1) * logits.dim(2);
  if (target.size() != n)
    throw DimensionError("seg_loss: mask has " + std::to_string(target.size()) +
                         " pixels, logits " + shape_str(logits.shape()));
  for (int t : target)
    if (t < 0 || std::size_t(t) >= k)
      throw std::out_of_range("seg_loss: label " + std::to_string(t) + " outside [0, " +
                              std::to_string(k) + ")");
  const T* z = logits.data().data();
  std::vector<double> p(k * n);  // class-major like the logits
  double ce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) m = std::max(m, double(z[c * n + i]));
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(double(z[c * n + i]) - m);
    for (std::size_t c = 0; c < k; ++c) p[c * n + i] = std::exp(double(z[c * n + i]) - m) / s;
    ce -= double(z[target[i] * n + i]) - m - std::log(s);
  }
  ce /= double(n);
  std::vector<double> inter(k, 0.0), denom(k, kDiceSmoothing);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      const double g = target[i] == int(c) ? 1.0 : 0.0;
      inter[c] += p[c * n + i] * g;
      denom[c] += p[c * n + i] + g;
    }
  double dice = 0.0;
  for (std::size_t c = 0; c < k; ++c) dice += (2.0 * inter[c] + kDiceSmoothing) / denom[c];
  dice /= double(k);
  const double loss = 0.5 * ce + 0.5 * (1.0 - dice);

  Node<T>* ln = logits.node();
  return detail::make_result<T>(
      {1}, {static_cast<T>(loss)}, "seg_loss", {&logits},
      [ln, p = std::move(p), inter, denom, target, k, n](Node<T>& out) {
        T* dz = detail::grad_of(ln);
        if (!dz) return;
        const double go = double(out.grad[0]);
        std::vector<double> u(k);
        for (std::size_t i = 0; i < n; ++i) {
          // dL/dp from the dice term, then through the per-pixel softmax.
          double dot = 0.0;
          for (std::size_t c = 0; c < k; ++c) {
            const double g = target[i] == int(c) ? 1.0 : 0.0;
            const double dd = (2.0 * g * denom[c] - (2.0 * inter[c] + kDiceSmoothing)) /
                              (denom[c] * denom[c]);
            u[c] = -0.5 * dd / double(k);
            dot += p[c * n + i] * u[c];
          }
          for (std::size_t c = 0; c < k; ++c) {
            const double pc = p[c * n + i];
            const double g = target[i] == int(c) ? 1.0 : 0.0;
            const double d = 0.5 * (pc - g) / double(n) + pc * (u[c] - dot);
            dz[c * n + i] += static_cast<T>(go * d);
          }
        }
      });
}

// Per-class hard dice; a class absent from both masks scores 1.
inline std::vector<double> dice_per_class(const std::vector<int>& pred, const std::vector<int>& target,
                                          std::size_t classes) {
  if (pred.size() != target.size())
    throw std::invalid_argument("dice: masks differ in size (" + std::to_string(pred.size()) +
                                " vs " + std::to_string(target.size()) + ")");
  std::vector<double> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t x = 0, y = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool a = pred[i] == int(c), b = target[i] == int(c);
      x += a;
      y += b;
      both += a && b;
    }
    out[c] = x + y == 0 ? 1.0 : 2.0 * double(both) / double(x + y);
  }
  return out;
}

inline double dice_score(const std::vector<int>& pred, const std::vector<int>& target,
                         std::size_t classes) {
  const auto d = dice_per_class(pred, target, classes);
  double s = 0.0;
  for (double v : d) s += v;
  return s / double(classes);
}

// Per-pixel argmax of [K x H x W] logits.
template <class T>
std::vector<int> argmax_mask(const Tensor<T>& logits) {
  const std::size_t k = logits.dim(0), n = logits.dim(1) * logits.dim(2);
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    T best = logits[i];
    for (std::size_t c = 1; c < k; ++c)
      if (logits[c * n + i] > best) {
        best = logits[c * n + i];
        out[i] = int(c);
      }
  }
  return out;
}

}  // namespace pathadapt
