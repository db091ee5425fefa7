#pragma once

// Downstream predictors: a linear classifier on the class embedding and a
// text-prompt classifier scoring cosine similarity against per-class text
// embeddings.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pathadapt/random.hpp"
#include "pathadapt/tensor.hpp"

namespace pathadapt {

template <class T>
struct LinearHead {
  Tensor<T> weight;  // [classes x dim]
  Tensor<T> bias;    // [classes]

  LinearHead() = default;
  LinearHead(std::size_t dim, std::size_t classes, std::uint64_t seed, double std = 0.02)
      : weight({classes, dim}), bias({classes}) {
    Rng rng(seed);
    for (auto& w : weight.values()) w = static_cast<T>(rng.normal(0.0, std));
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  std::size_t classes() const { return weight.dim(0); }
  std::size_t dim() const { return weight.dim(1); }
  std::vector<Tensor<T>> parameters() const { return {weight, bias}; }
};

// logits = W emb + b. emb is [dim] or [batch x dim].
template <class T>
Tensor<T> classify(const LinearHead<T>& head, const Tensor<T>& emb) {
  const bool vec = emb.rank() == 1;
  const std::size_t width = vec ? emb.dim(0) : emb.dim(1);
  if (width != head.dim())
    throw DimensionError("classify: embedding " + shape_str(emb.shape()) +
                         " does not match head width " + std::to_string(head.dim()));
  Tensor<T> x = vec ? reshape(emb, {1, width}) : emb;
  Tensor<T> y = linear(x, head.weight, head.bias);
  return vec ? reshape(y, {head.classes()}) : y;
}

inline constexpr const char* kPromptPrefix = "This is a histopathological image of ";
inline constexpr float kPromptTemperature = 0.07f;

inline std::string prompt_for(const std::string& class_name) { return kPromptPrefix + class_name; }

// Deterministic stand-in for a frozen text tower: the prompt string seeds a
// Gaussian vector which is scaled to unit length.
inline std::vector<float> stand_in_text_embedding(const std::string& prompt, std::size_t dim) {
  Rng rng(fnv1a(prompt));
  std::vector<float> v(dim);
  double n2 = 0.0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    n2 += double(x) * x;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& x : v) x = static_cast<float>(x * inv);
  return v;
}

template <class T>
struct PromptBank {
  std::vector<std::string> class_names;
  std::string prompt_template = std::string(kPromptPrefix) + "[CLASS]";
  Tensor<T> text_embs;   // [classes x dim_t], frozen
  Tensor<T> projection;  // [dim_t x dim], trainable

  std::size_t classes() const { return class_names.size(); }

  std::string prompt(std::size_t c) const { return prompt_for(class_names.at(c)); }

  // Bank with externally supplied text embeddings (one row per class).
  static PromptBank with_text_embeddings(std::vector<std::string> names, Tensor<T> text,
                                         std::size_t image_dim, std::uint64_t seed) {
    if (text.rank() != 2 || text.dim(0) != names.size())
      throw DimensionError("PromptBank: need one text embedding per class, got " +
                           shape_str(text.shape()) + " for " + std::to_string(names.size()) +
                           " classes");
    PromptBank b;
    b.class_names = std::move(names);
    b.text_embs = std::move(text);
    b.text_embs.set_requires_grad(false);
    const std::size_t dt = b.text_embs.dim(1);
    b.projection = Tensor<T>({dt, image_dim});
    Rng rng(seed);
    for (auto& w : b.projection.values())
      w = static_cast<T>(rng.normal(0.0, 1.0 / std::sqrt(double(image_dim))));
    b.projection.set_requires_grad(true);
    return b;
  }

  // Bank whose text embeddings come from the stand-in embedder.
  static PromptBank from_class_names(std::vector<std::string> names, std::size_t text_dim,
                                     std::size_t image_dim, std::uint64_t seed) {
    std::vector<T> rows;
    for (const auto& n : names) {
      auto e = stand_in_text_embedding(prompt_for(n), text_dim);
      rows.insert(rows.end(), e.begin(), e.end());
    }
    Tensor<T> text({names.size(), text_dim}, std::move(rows));
    return with_text_embeddings(std::move(names), std::move(text), image_dim, seed);
  }
};

// logit_c = cos(P emb, text_c) / temperature. emb is [dim] or [batch x dim].
template <class T>
Tensor<T> prompt_logits(const PromptBank<T>& bank, const Tensor<T>& emb,
                        T temperature = static_cast<T>(kPromptTemperature)) {
  if (!(temperature > T(0))) throw std::invalid_argument("prompt_logits: temperature must be > 0");
  const bool vec = emb.rank() == 1;
  const std::size_t width = vec ? emb.dim(0) : emb.dim(1);
  if (width != bank.projection.dim(1))
    throw DimensionError("prompt_logits: embedding " + shape_str(emb.shape()) +
                         " does not match projection " + shape_str(bank.projection.shape()));
  Tensor<T> x = vec ? reshape(emb, {1, width}) : emb;
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < width; ++j) n2 += double(x.at(r, j)) * x.at(r, j);
    if (!(n2 > 0.0)) throw std::domain_error("prompt_logits: zero-norm image embedding");
  }
  Tensor<T> img = l2_normalize_rows(linear(x, bank.projection));
  Tensor<T> txt = l2_normalize_rows(bank.text_embs);
  Tensor<T> y = scale(linear(img, txt), T(1) / temperature);
  return vec ? reshape(y, {bank.classes()}) : y;
}

// Exactly k indices per class, drawn with the seeded RNG; result ascending.
inline std::vector<std::size_t> sample_few_shot(const std::vector<int>& labels, std::size_t classes,
                                                std::size_t k, std::uint64_t seed,
                                                const std::vector<std::string>& class_names = {}) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw std::out_of_range("sample_few_shot: label " + std::to_string(labels[i]) + " out of range");
    by_class[labels[i]].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes; ++c) {
    if (by_class[c].size() < k) {
      const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
      throw std::invalid_argument("sample_few_shot: class '" + name + "' has " +
                                  std::to_string(by_class[c].size()) + " examples, need " +
                                  std::to_string(k));
    }
    for (std::size_t idx : rng.sample_without_replacement(by_class[c].size(), k))
      out.push_back(by_class[c][idx]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace pathadapt
