#pragma once

// Backbone-level adapter wiring and parameter accounting.

#include <vector>

#include "pathadapt/adapter.hpp"
#include "pathadapt/vit.hpp"

namespace pathadapt {

template <class T>
std::size_t attach(ViT<T>& vit, const AdapterConfig& cfg) {
  return vit.attach_adapters(cfg);
}

template <class T>
void detach(ViT<T>& vit) {
  vit.detach_adapters();
}

template <class T>
void set_adapters_enabled(ViT<T>& vit, bool on) {
  for (auto& a : vit.adapter_layers()) {
    a->enabled = on;
    a->A.set_requires_grad(on);
    a->B.set_requires_grad(on);
  }
}

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t total = 0;
  std::size_t adapter = 0;
  double ratio() const { return total ? double(trainable) / double(total) : 0.0; }
};

// Closed form per adapted layer: r * (d1 + d2).
inline std::size_t adapter_params_per_layer(std::size_t rank, std::size_t d_in, std::size_t d_out) {
  return rank * (d_in + d_out);
}

// Structural count, no allocation; usable for full-size configs.
inline ParamCount count_params(const ViTConfig& cfg, const AdapterConfig& acfg,
                               std::size_t head_params = 0) {
  const std::size_t d = cfg.dim, h = cfg.hidden();
  std::size_t base = cfg.patch_dim() * d + d + d + cfg.seq_len() * d + 2 * d;
  base += cfg.depth * (4 * (d * d + d) + 4 * d + (d * h + h) + (h * d + d));
  ParamCount pc;
  pc.adapter = cfg.depth * acfg.target_count() * adapter_params_per_layer(acfg.rank, d, d);
  pc.total = base + pc.adapter + head_params;
  pc.trainable = head_params + (acfg.enabled ? pc.adapter : 0);
  return pc;
}

// Walks the live model. `head` lists downstream trainable tensors.
template <class T>
ParamCount count_params(const ViT<T>& vit, const std::vector<Tensor<T>>& head = {}) {
  ParamCount pc;
  for (const auto& [name, t] : vit.named_parameters()) {
    pc.total += t.size();
    if (t.requires_grad()) pc.trainable += t.size();
  }
  for (const auto& a : vit.adapter_layers()) {
    pc.adapter += a->param_count();
    pc.total += a->param_count();
    if (a->enabled) pc.trainable += a->param_count();
  }
  for (const auto& t : head) {
    pc.total += t.size();
    pc.trainable += t.size();
  }
  return pc;
}

}  // namespace pathadapt
