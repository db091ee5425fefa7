#pragma once

// Slide-level learning: gated-attention pooling over a bag of patch features,
// and the hybrid extraction path where a random subset of patches runs
// through the adapted backbone with gradients while the rest reuse cached
// frozen features.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pathadapt/heads.hpp"
#include "pathadapt/random.hpp"
#include "pathadapt/tensor.hpp"
#include "pathadapt/vit.hpp"

namespace pathadapt {

struct GridPos {
  int row = 0;
  int col = 0;
  bool operator==(const GridPos&) const = default;
};

template <class T>
struct Bag {
  std::vector<Tensor<T>> patches;  // [C x H x W] images
  std::vector<GridPos> coords;
  int label = 0;
  std::string slide_id;

  std::size_t size() const { return patches.size(); }

  void validate() const {
    if (patches.empty()) throw std::invalid_argument("bag '" + slide_id + "' is empty");
    if (patches.size() != coords.size())
      throw std::invalid_argument("bag '" + slide_id + "': " + std::to_string(patches.size()) +
                                  " patches but " + std::to_string(coords.size()) + " coords");
  }
};

template <class T>
struct GatedAttention {
  Tensor<T> V;  // [h x C]
  Tensor<T> U;  // [h x C]
  Tensor<T> w;  // [1 x h]
  LinearHead<T> classifier;

  GatedAttention() = default;
  GatedAttention(std::size_t dim, std::size_t classes, std::uint64_t seed)
      : V({hidden_width(dim), dim}), U({hidden_width(dim), dim}), w({1, hidden_width(dim)}),
        classifier(dim, classes, derive_seed(seed, 1)) {
    Rng rng(seed);
    const double sc = 1.0 / std::sqrt(double(dim));
    const double sh = 1.0 / std::sqrt(double(hidden_width(dim)));
    for (auto& v : V.values()) v = static_cast<T>(rng.normal(0.0, sc));
    for (auto& v : U.values()) v = static_cast<T>(rng.normal(0.0, sc));
    for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, sh));
    for (auto* t : {&V, &U, &w}) t->set_requires_grad(true);
  }

  static std::size_t hidden_width(std::size_t dim) { return (dim + 3) / 4; }
  std::size_t dim() const { return V.dim(1); }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    return {{"mil.V", V}, {"mil.U", U}, {"mil.w", w},
            {"head.weight", classifier.weight}, {"head.bias", classifier.bias}};
  }
};

template <class T>
struct Aggregated {
  Tensor<T> slide_emb;  // [C]
  Tensor<T> weights;    // [N]
};

template <class T>
Aggregated<T> aggregate(const GatedAttention<T>& att, const Tensor<T>& feats) {
  if (feats.rank() != 2 || feats.dim(0) == 0)
    throw std::invalid_argument("aggregate: need a non-empty [N x C] feature matrix, got " +
                                shape_str(feats.shape()));
  if (feats.dim(1) != att.dim())
    throw DimensionError("aggregate: features " + shape_str(feats.shape()) +
                         " do not match attention width " + std::to_string(att.dim()));
  const std::size_t n = feats.dim(0);
  Tensor<T> gate = mul(tanh(linear(feats, att.V)), sigmoid(linear(feats, att.U)));
  Tensor<T> scores = reshape(linear(gate, att.w), {n});
  Tensor<T> weights = softmax(scores, 0);
  Tensor<T> emb = reshape(matmul(reshape(weights, {1, n}), feats), {feats.dim(1)});
  return {emb, weights};
}

// Frozen-path features keyed by (slide, patch index, backbone hash).
template <class T>
class FeatureCache {
 public:
  using Key = std::tuple<std::string, std::size_t, std::uint64_t>;

  const std::vector<T>* find(const Key& k) const {
    auto it = rows_.find(k);
    return it == rows_.end() ? nullptr : &it->second;
  }
  void put(const Key& k, std::vector<T> row) { rows_[k] = std::move(row); }
  std::size_t size() const { return rows_.size(); }
  void clear() { rows_.clear(); }

 private:
  std::map<Key, std::vector<T>> rows_;
};

template <class T>
struct HybridResult {
  Tensor<T> feats;                   // [N x C], bag order
  std::vector<std::size_t> sampled;  // ascending indices that took the adapter path
};

// Frozen class embeddings for the given patches, adapters bypassed.
template <class T>
Tensor<T> frozen_features(const ViT<T>& vit, const Bag<T>& bag, const std::vector<std::size_t>& idx,
                          FeatureCache<T>* cache = nullptr, std::uint64_t hash = 0) {
  const std::size_t d = vit.config().dim;
  std::vector<T> out(idx.size() * d);
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::vector<T>* hit = cache ? cache->find({bag.slide_id, idx[i], hash}) : nullptr;
    if (hit)
      std::copy(hit->begin(), hit->end(), out.begin() + i * d);
    else
      todo.push_back(i);
  }
  if (!todo.empty()) {
    NoGradGuard ng;
    std::vector<Tensor<T>> ims;
    for (std::size_t i : todo) ims.push_back(bag.patches[idx[i]]);
    Tensor<T> f = vit.encode(ims, false);
    for (std::size_t j = 0; j < todo.size(); ++j) {
      auto first = f.data().begin() + j * d;
      std::copy(first, first + d, out.begin() + todo[j] * d);
      if (cache) cache->put({bag.slide_id, idx[todo[j]], hash}, std::vector<T>(first, first + d));
    }
  }
  return Tensor<T>({idx.size(), d}, std::move(out));
}

// min(k, N) patches drawn without replacement go through the adapted
// backbone with gradients; the remainder are detached frozen features.
template <class T>
HybridResult<T> hybrid_forward(const ViT<T>& vit, const Bag<T>& bag, std::size_t k,
                               std::uint64_t seed, FeatureCache<T>* cache = nullptr,
                               std::uint64_t hash = 0) {
  bag.validate();
  const std::size_t n = bag.size();
  Rng rng(seed);
  HybridResult<T> r;
  r.sampled = rng.sample_without_replacement(n, std::min(k, n));
  std::vector<std::size_t> rest;
  for (std::size_t i = 0, j = 0; i < n; ++i) {
    if (j < r.sampled.size() && r.sampled[j] == i)
      ++j;
    else
      rest.push_back(i);
  }
  Tensor<T> live, frozen;
  if (!r.sampled.empty()) {
    std::vector<Tensor<T>> ims;
    for (std::size_t i : r.sampled) ims.push_back(bag.patches[i]);
    live = vit.encode(ims, true);
  }
  if (!rest.empty()) frozen = frozen_features(vit, bag, rest, cache, hash);
  r.feats = assemble_rows(live, r.sampled, frozen, rest);
  return r;
}

struct Heatmap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> raw;    // averaged score per cell, 0 where nothing landed
  std::vector<double> norm;   // min-max over covered cells, all-equal -> 0
  std::vector<int> coverage;  // patches landing on each cell
};

// Places per-patch scores at grid coordinates. A patch covers span x span
// cells starting at its coordinate; overlapping contributions average.
inline Heatmap build_heatmap(const std::vector<GridPos>& coords, const std::vector<double>& scores,
                             std::size_t rows, std::size_t cols, std::size_t span = 1) {
  if (coords.size() != scores.size())
    throw std::invalid_argument("heatmap: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(coords.size()) + " coordinates");
  Heatmap h;
  h.rows = rows;
  h.cols = cols;
  h.raw.assign(rows * cols, 0.0);
  h.coverage.assign(rows * cols, 0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto [r, c] = coords[i];
    if (r < 0 || c < 0 || std::size_t(r) + span > rows || std::size_t(c) + span > cols)
      throw std::out_of_range("heatmap: patch at (" + std::to_string(r) + "," + std::to_string(c) +
                              ") outside " + std::to_string(rows) + "x" + std::to_string(cols) +
                              " grid");
    for (std::size_t dr = 0; dr < span; ++dr)
      for (std::size_t dc = 0; dc < span; ++dc) {
        const std::size_t cell = (r + dr) * cols + c + dc;
        h.raw[cell] += scores[i];
        ++h.coverage[cell];
      }
  }
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < h.raw.size(); ++i)
    if (h.coverage[i]) {
      h.raw[i] /= h.coverage[i];
      lo = std::min(lo, h.raw[i]);
      hi = std::max(hi, h.raw[i]);
    }
  h.norm.assign(h.raw.size(), 0.0);
  if (hi > lo)
    for (std::size_t i = 0; i < h.raw.size(); ++i)
      if (h.coverage[i]) h.norm[i] = (h.raw[i] - lo) / (hi - lo);
  return h;
}

template <class T>
Heatmap export_heatmap(const Bag<T>& bag, const Tensor<T>& weights, std::size_t rows,
                       std::size_t cols) {
  if (weights.size() != bag.coords.size())
    throw std::invalid_argument("export_heatmap: " + std::to_string(weights.size()) +
                                " weights for a bag of " + std::to_string(bag.coords.size()));
  return build_heatmap(bag.coords, std::vector<double>(weights.data().begin(), weights.data().end()),
                       rows, cols);
}

// 8-bit gray levels, round(255 * norm).
inline std::vector<std::uint8_t> heatmap_gray(const Heatmap& h) {
  std::vector<std::uint8_t> g(h.norm.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<std::uint8_t>(std::lround(255.0 * h.norm[i]));
  return g;
}

}  // namespace pathadapt
