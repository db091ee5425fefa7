#pragma once

// Miniature pre-norm vision transformer: image -> patch tokens -> class token
// embedding + patch embeddings + per-block class-token attention maps.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pathadapt/adapter.hpp"
#include "pathadapt/attention.hpp"
#include "pathadapt/random.hpp"
#include "pathadapt/tensor.hpp"

namespace pathadapt {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t channels = 3;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t hidden() const { return dim * mlp_ratio; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw std::invalid_argument("image_size " + std::to_string(image_size) +
                                  " is not divisible by patch_size " + std::to_string(patch_size));
    if (heads == 0 || dim % heads != 0)
      throw std::invalid_argument("dim " + std::to_string(dim) + " is not divisible by heads " +
                                  std::to_string(heads));
    if (channels == 0 || mlp_ratio == 0) throw std::invalid_argument("channels and mlp_ratio must be positive");
  }

  bool operator==(const ViTConfig&) const = default;
};

// Dense layer; an attached adapter replaces the plain forward when enabled.
template <class T>
struct Linear {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out]
  std::shared_ptr<AdapterLayer<T>> adapter;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double std = 0.02)
      : weight({out, in}), bias({out}) {
    for (auto& w : weight.values()) w = static_cast<T>(rng.normal(0.0, std));
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor<T> operator()(const Tensor<T>& x, bool use_adapter = true) const {
    if (use_adapter && adapter && adapter->enabled) return adapter_forward(*adapter, x);
    return linear(x, weight, bias);
  }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
  explicit LayerNormParams(std::size_t d = 0) : gamma({d}, T(1)), beta({d}) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gamma, beta, T(1e-5)); }
};

template <class T>
struct Block {
  LayerNormParams<T> norm1, norm2;
  std::array<Linear<T>, 4> attn;  // q, k, v, o
  Linear<T> fc1, fc2;

  Linear<T>& q() { return attn[0]; }
  Linear<T>& k() { return attn[1]; }
  Linear<T>& v() { return attn[2]; }
  Linear<T>& o() { return attn[3]; }
};

template <class T>
struct ViTOutput {
  Tensor<T> class_emb;   // [batch x dim], after the final norm
  Tensor<T> patch_embs;  // [(batch*T) x dim], after the final norm
  // One [depth x T] map per image: head-averaged attention of the class
  // token over the patch tokens, renormalized to sum to one.
  std::vector<Tensor<T>> attn_maps;
};

// Non-differentiable im2col of a [C x H x W] image into [T x C*p*p] rows.
template <class T>
std::vector<T> patchify(const Tensor<T>& image, const ViTConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.channels || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.image_size)
    throw DimensionError("embed_patches: image " + shape_str(image.shape()) + " does not match [" +
                         std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) +
                         "x" + std::to_string(cfg.image_size) + "]");
  const std::size_t p = cfg.patch_size, g = cfg.grid(), s = cfg.image_size;
  std::vector<T> rows(cfg.num_patches() * cfg.patch_dim());
  std::size_t at = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            rows[at++] = image[(c * s + gy * p + dy) * s + gx * p + dx];
  return rows;
}

template <class T>
class ViT {
 public:
  ViT() = default;
  ViT(const ViTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    patch_embed_ = Linear<T>(cfg.patch_dim(), cfg.dim, rng);
    cls_token_ = Tensor<T>({1, cfg.dim});
    pos_embed_ = Tensor<T>({cfg.seq_len(), cfg.dim});
    for (auto& v : cls_token_.values()) v = static_cast<T>(rng.normal(0.0, 0.02));
    for (auto& v : pos_embed_.values()) v = static_cast<T>(rng.normal(0.0, 0.02));
    cls_token_.set_requires_grad(true);
    pos_embed_.set_requires_grad(true);
    blocks_.resize(cfg.depth);
    for (auto& b : blocks_) {
      b.norm1 = LayerNormParams<T>(cfg.dim);
      b.norm2 = LayerNormParams<T>(cfg.dim);
      for (auto& l : b.attn) l = Linear<T>(cfg.dim, cfg.dim, rng);
      b.fc1 = Linear<T>(cfg.dim, cfg.hidden(), rng);
      b.fc2 = Linear<T>(cfg.hidden(), cfg.dim, rng);
    }
    norm_ = LayerNormParams<T>(cfg.dim);
  }

  const ViTConfig& config() const { return cfg_; }
  std::vector<Block<T>>& blocks() { return blocks_; }
  const std::vector<Block<T>>& blocks() const { return blocks_; }

  // Backbone parameters in a fixed order; names are checkpoint keys.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{
        {"patch_embed.weight", patch_embed_.weight},
        {"patch_embed.bias", patch_embed_.bias},
        {"cls_token", cls_token_},
        {"pos_embed", pos_embed_},
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      const auto& b = blocks_[i];
      out.emplace_back(p + "norm1.weight", b.norm1.gamma);
      out.emplace_back(p + "norm1.bias", b.norm1.beta);
      for (std::size_t t = 0; t < 4; ++t) {
        const std::string n = p + "attn." + kAttnTargetNames[t];
        out.emplace_back(n + ".weight", b.attn[t].weight);
        out.emplace_back(n + ".bias", b.attn[t].bias);
      }
      out.emplace_back(p + "norm2.weight", b.norm2.gamma);
      out.emplace_back(p + "norm2.bias", b.norm2.beta);
      out.emplace_back(p + "mlp.fc1.weight", b.fc1.weight);
      out.emplace_back(p + "mlp.fc1.bias", b.fc1.bias);
      out.emplace_back(p + "mlp.fc2.weight", b.fc2.weight);
      out.emplace_back(p + "mlp.fc2.bias", b.fc2.bias);
    }
    out.emplace_back("norm.weight", norm_.gamma);
    out.emplace_back("norm.bias", norm_.beta);
    return out;
  }

  static std::size_t parameter_tensor_count(const ViTConfig& cfg) { return 4 + 16 * cfg.depth + 2; }

  // Adapter tensors under the "adapter/" namespace, in block/target order.
  std::vector<std::pair<std::string, Tensor<T>>> adapter_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      for (std::size_t t = 0; t < 4; ++t)
        if (const auto& a = blocks_[i].attn[t].adapter) {
          const std::string n = "adapter/blocks." + std::to_string(i) + ".attn." +
                                kAttnTargetNames[t];
          out.emplace_back(n + ".A", a->A);
          out.emplace_back(n + ".B", a->B);
        }
    return out;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : named_parameters()) {
      Tensor<T> h = t;
      h.set_requires_grad(on);
    }
  }

  // [(1+T) x dim] tokens for one image: class token first, positions added.
  Tensor<T> embed_patches(const Tensor<T>& image) const { return embed_batch({image}); }

  // Stacked token sequences for a batch of images.
  Tensor<T> embed_batch(const std::vector<Tensor<T>>& images) const {
    if (images.empty()) throw std::invalid_argument("embed_batch: no images");
    std::vector<T> rows;
    rows.reserve(images.size() * cfg_.num_patches() * cfg_.patch_dim());
    for (const auto& im : images) {
      auto r = patchify(im, cfg_);
      rows.insert(rows.end(), r.begin(), r.end());
    }
    Tensor<T> patches({images.size() * cfg_.num_patches(), cfg_.patch_dim()}, std::move(rows));
    Tensor<T> tok = patch_embed_(patches);
    tok = prepend_class_token(tok, cls_token_, images.size());
    return add_positional(tok, pos_embed_);
  }

  ViTOutput<T> forward(const Tensor<T>& tokens, bool use_adapters = true,
                       bool want_attention = true) const {
    const std::size_t s = cfg_.seq_len(), t = cfg_.num_patches(), d = cfg_.dim;
    if (tokens.rank() != 2 || tokens.dim(1) != d || tokens.dim(0) % s != 0)
      throw DimensionError("forward: tokens " + shape_str(tokens.shape()) +
                           " are not a stack of [" + std::to_string(s) + "x" +
                           std::to_string(d) + "] sequences");
    const std::size_t batch = tokens.dim(0) / s;
    std::vector<std::vector<T>> maps(batch, std::vector<T>(cfg_.depth * t));
    Tensor<T> x = tokens;
    std::vector<T> probs;
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      const auto& b = blocks_[bi];
      Tensor<T> h = b.norm1(x);
      Tensor<T> q = b.attn[0](h, use_adapters);
      Tensor<T> k = b.attn[1](h, use_adapters);
      Tensor<T> v = b.attn[2](h, use_adapters);
      Tensor<T> a = multihead_attention(q, k, v, cfg_.heads, s, want_attention ? &probs : nullptr);
      x = add(x, b.attn[3](a, use_adapters));
      Tensor<T> m = b.fc2(gelu(b.fc1(b.norm2(x))));
      x = add(x, m);
      if (want_attention)
        for (std::size_t img = 0; img < batch; ++img) {
          T* row = maps[img].data() + bi * t;
          double total = 0.0;
          for (std::size_t j = 0; j < t; ++j) {
            double acc = 0.0;
            for (std::size_t hh = 0; hh < cfg_.heads; ++hh)
              acc += probs[((img * cfg_.heads + hh) * s + 0) * s + 1 + j];
            row[j] = static_cast<T>(acc / double(cfg_.heads));
            total += row[j];
          }
          for (std::size_t j = 0; j < t; ++j) row[j] = static_cast<T>(row[j] / total);
        }
    }
    x = norm_(x);
    std::vector<std::size_t> cls_rows(batch), patch_rows;
    patch_rows.reserve(batch * t);
    for (std::size_t img = 0; img < batch; ++img) {
      cls_rows[img] = img * s;
      for (std::size_t j = 0; j < t; ++j) patch_rows.push_back(img * s + 1 + j);
    }
    ViTOutput<T> out;
    out.class_emb = gather_rows(x, cls_rows);
    out.patch_embs = gather_rows(x, patch_rows);
    for (auto& m : maps) out.attn_maps.emplace_back(Shape{cfg_.depth, t}, std::move(m));
    return out;
  }

  // Class-token embeddings [batch x dim] for a batch of images.
  Tensor<T> encode(const std::vector<Tensor<T>>& images, bool use_adapters = true) const {
    return forward(embed_batch(images), use_adapters, false).class_emb;
  }

  // Wraps every targeted attention layer with a fresh adapter and freezes all
  // backbone parameters. Throws if adapters are already attached.
  std::size_t attach_adapters(const AdapterConfig& acfg) {
    acfg.validate();
    if (adapted_) throw std::logic_error("attach: backbone already carries adapters");
    pre_attach_flags_.clear();
    for (auto& [name, t] : named_parameters()) {
      pre_attach_flags_.push_back(t.requires_grad());
      Tensor<T> h = t;
      h.set_requires_grad(false);
    }
    Rng rng(acfg.seed);
    std::size_t created = 0;
    for (auto& b : blocks_)
      for (std::size_t t = 0; t < 4; ++t) {
        if (!acfg.targets[t]) continue;
        auto layer = make_adapter(b.attn[t].weight, b.attn[t].bias, acfg.rank,
                                  static_cast<T>(acfg.alpha), rng, acfg.init_std);
        layer.enabled = acfg.enabled;
        if (!acfg.enabled) {
          layer.A.set_requires_grad(false);
          layer.B.set_requires_grad(false);
        }
        b.attn[t].adapter = std::make_shared<AdapterLayer<T>>(std::move(layer));
        ++created;
      }
    adapted_ = true;
    return created;
  }

  void detach_adapters() {
    if (!adapted_) throw std::logic_error("detach: backbone carries no adapters");
    for (auto& b : blocks_)
      for (auto& l : b.attn) l.adapter.reset();
    auto params = named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i].second.set_requires_grad(pre_attach_flags_[i]);
    adapted_ = false;
  }

  bool adapted() const { return adapted_; }

  std::vector<std::shared_ptr<AdapterLayer<T>>> adapter_layers() const {
    std::vector<std::shared_ptr<AdapterLayer<T>>> out;
    for (const auto& b : blocks_)
      for (const auto& l : b.attn)
        if (l.adapter) out.push_back(l.adapter);
    return out;
  }

  // Deep copy: no tensor storage is shared with the source.
  ViT clone() const {
    ViT c;
    c.cfg_ = cfg_;
    auto copy_lin = [](const Linear<T>& l) {
      Linear<T> n;
      n.weight = l.weight.detach();
      n.weight.set_requires_grad(l.weight.requires_grad());
      n.bias = l.bias.detach();
      n.bias.set_requires_grad(l.bias.requires_grad());
      if (l.adapter) {
        auto a = std::make_shared<AdapterLayer<T>>(*l.adapter);
        a->W0 = n.weight;
        a->bias = n.bias;
        a->A = l.adapter->A.detach();
        a->A.set_requires_grad(l.adapter->A.requires_grad());
        a->B = l.adapter->B.detach();
        a->B.set_requires_grad(l.adapter->B.requires_grad());
        n.adapter = a;
      }
      return n;
    };
    auto copy_t = [](const Tensor<T>& t) {
      Tensor<T> n = t.detach();
      n.set_requires_grad(t.requires_grad());
      return n;
    };
    auto copy_ln = [&](const LayerNormParams<T>& p) {
      LayerNormParams<T> n;
      n.gamma = copy_t(p.gamma);
      n.beta = copy_t(p.beta);
      return n;
    };
    c.patch_embed_ = copy_lin(patch_embed_);
    c.cls_token_ = copy_t(cls_token_);
    c.pos_embed_ = copy_t(pos_embed_);
    for (const auto& b : blocks_) {
      Block<T> nb;
      nb.norm1 = copy_ln(b.norm1);
      nb.norm2 = copy_ln(b.norm2);
      for (std::size_t t = 0; t < 4; ++t) nb.attn[t] = copy_lin(b.attn[t]);
      nb.fc1 = copy_lin(b.fc1);
      nb.fc2 = copy_lin(b.fc2);
      c.blocks_.push_back(std::move(nb));
    }
    c.norm_ = copy_ln(norm_);
    c.adapted_ = adapted_;
    c.pre_attach_flags_ = pre_attach_flags_;
    return c;
  }

  // Mutable access used by checkpoint loading and tests that hand-set weights.
  Linear<T>& patch_embed() { return patch_embed_; }
  Tensor<T>& cls_token() { return cls_token_; }
  Tensor<T>& pos_embed() { return pos_embed_; }
  LayerNormParams<T>& final_norm() { return norm_; }

 private:
  ViTConfig cfg_;
  Linear<T> patch_embed_;
  Tensor<T> cls_token_;
  Tensor<T> pos_embed_;
  std::vector<Block<T>> blocks_;
  LayerNormParams<T> norm_;
  bool adapted_ = false;
  std::vector<bool> pre_attach_flags_;
};

// FNV-1a over the raw bytes of every backbone tensor; keys feature caches.
template <class T>
std::uint64_t backbone_hash(const ViT<T>& vit) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : vit.named_parameters()) {
    const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace pathadapt
