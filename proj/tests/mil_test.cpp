#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "pathadapt/mil.hpp"
#include "pathadapt/pathfit.hpp"

using namespace pathadapt;

namespace {

Tensor<double> random_feats(std::size_t n, std::size_t c, Rng& rng) {
  Tensor<double> f({n, c});
  for (auto& v : f.values()) v = rng.normal();
  return f;
}

ViTConfig small_vit() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.dim = 8;
  c.depth = 1;
  c.heads = 2;
  return c;
}

Bag<float> random_bag(std::size_t n, std::uint64_t seed, const ViTConfig& cfg) {
  Rng rng(seed);
  Bag<float> b;
  b.slide_id = "slide-" + std::to_string(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> im({cfg.channels, cfg.image_size, cfg.image_size});
    for (auto& v : im.values()) v = float(rng.uniform());
    b.patches.push_back(im);
    b.coords.push_back({int(i / 4), int(i % 4)});
  }
  return b;
}

}  // namespace

TEST(Aggregate, SingleFeature) {
  GatedAttention<double> att(6, 2, 1);
  Rng rng(2);
  auto f = random_feats(1, 6, rng);
  auto a = aggregate(att, f);
  EXPECT_NEAR(a.weights[0], 1.0, 1e-12);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(a.slide_emb[j], f[j], 1e-12);
}

TEST(Aggregate, EmptyBagThrows) {
  GatedAttention<double> att(6, 2, 1);
  EXPECT_THROW(aggregate(att, Tensor<double>({0, 6})), std::invalid_argument);
}

TEST(Aggregate, DuplicatingPatchesHalvesWeights) {
  GatedAttention<double> att(6, 2, 1);
  Rng rng(3);
  auto f = random_feats(4, 6, rng);
  auto ff = concat_rows(std::vector<Tensor<double>>{f, f});
  auto a = aggregate(att, f), b = aggregate(att, ff);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(a.slide_emb[j], b.slide_emb[j], 1e-12);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(b.weights[i], a.weights[i] / 2, 1e-12);
    EXPECT_NEAR(b.weights[4 + i], a.weights[i] / 2, 1e-12);
  }
}

TEST(Aggregate, ThreePatchesByHand) {
  GatedAttention<double> att(5, 2, 4);
  EXPECT_EQ(att.V.dim(0), 2u);  // ceil(5 / 4)
  Rng rng(5);
  auto f = random_feats(3, 5, rng);
  double s[3], mx = -1e300;
  for (std::size_t i = 0; i < 3; ++i) {
    s[i] = 0;
    for (std::size_t h = 0; h < att.V.dim(0); ++h) {
      double v = 0, u = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        v += att.V.at(h, j) * f.at(i, j);
        u += att.U.at(h, j) * f.at(i, j);
      }
      s[i] += att.w[h] * std::tanh(v) / (1 + std::exp(-u));
    }
    mx = std::max(mx, s[i]);
  }
  double z = 0, w[3];
  for (std::size_t i = 0; i < 3; ++i) z += w[i] = std::exp(s[i] - mx);
  auto a = aggregate(att, f);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.weights[i], w[i] / z, 1e-12);
  for (std::size_t j = 0; j < 5; ++j) {
    double e = 0;
    for (std::size_t i = 0; i < 3; ++i) e += w[i] / z * f.at(i, j);
    EXPECT_NEAR(a.slide_emb[j], e, 1e-12);
  }
}

TEST(Aggregate, PermutationInvarianceAndNormalisation) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(40), c = 4 + rng.below(12);
    GatedAttention<float> att(c, 3, t);
    Tensor<float> f({n, c});
    for (auto& v : f.values()) v = float(rng.normal());
    auto perm = rng.permutation(n);
    auto a = aggregate(att, f), b = aggregate(att, gather_rows(f, perm));
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(a.weights[i], 0.0f);
      total += a.weights[i];
      EXPECT_NEAR(b.weights[i], a.weights[perm[i]], 1e-6);
    }
    EXPECT_NEAR(total, 1.0, 1e-5);
    for (std::size_t j = 0; j < c; ++j) EXPECT_NEAR(a.slide_emb[j], b.slide_emb[j], 1e-6);
  }
}

TEST(Hybrid, FreshAdaptersMatchFrozenExtraction) {
  const auto cfg = small_vit();
  for (std::uint64_t s = 0; s < 5; ++s) {
    ViT<float> vit(cfg, s);
    auto bag = random_bag(7, s, cfg);
    std::vector<std::size_t> all(7);
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto frozen = frozen_features(vit, bag, all);
    AdapterConfig ac;
    ac.rank = 4;
    ac.seed = s;
    attach(vit, ac);
    auto h = hybrid_forward(vit, bag, 3, 11 + s);
    ASSERT_EQ(h.feats.shape(), frozen.shape());
    for (std::size_t i = 0; i < frozen.size(); ++i) EXPECT_NEAR(h.feats[i], frozen[i], 1e-6);
  }
}

TEST(Hybrid, SubsetReproducibleAndSized) {
  const auto cfg = small_vit();
  ViT<float> vit(cfg, 1);
  auto bag = random_bag(5, 2, cfg);
  auto a = hybrid_forward(vit, bag, 2, 42), b = hybrid_forward(vit, bag, 2, 42);
  EXPECT_EQ(a.sampled.size(), 2u);
  EXPECT_EQ(a.sampled, b.sampled);
  Rng oracle(42);
  EXPECT_EQ(a.sampled, oracle.sample_without_replacement(5, 2));
  EXPECT_EQ(std::memcmp(a.feats.data().data(), b.feats.data().data(), a.feats.size() * sizeof(float)), 0);
}

TEST(Hybrid, GradientOnlyThroughSampledRows) {
  const auto cfg = small_vit();
  for (std::size_t k : {0u, 2u, 5u, 9u}) {
    ViT<float> vit(cfg, 3);
    vit.set_trainable(false);
    AdapterConfig ac;
    ac.rank = 2;
    attach(vit, ac);
    for (auto& a : vit.adapter_layers())
      for (auto& v : a->B.values()) v = 0.1f;
    auto bag = random_bag(5, 4, cfg);
    auto h = hybrid_forward(vit, bag, k, 7);
    EXPECT_EQ(h.sampled.size(), std::min<std::size_t>(k, 5));
    if (k == 0) {
      EXPECT_FALSE(h.feats.requires_grad());
      continue;
    }
    // Probe each row separately: d(sum row_i)/dA is nonzero iff row i is live.
    std::vector<bool> live(5, false);
    for (auto i : h.sampled) live[i] = true;
    for (std::size_t i = 0; i < 5; ++i) {
      auto hh = hybrid_forward(vit, bag, k, 7);
      for (auto& [n, t] : vit.adapter_parameters()) {
        Tensor<float> x = t;
        x.clear_grad();
      }
      sum(gather_rows(hh.feats, {i})).backward();
      double g = 0;
      for (auto& [n, t] : vit.adapter_parameters())
        if (t.has_grad())
          for (float v : t.grad()) g += std::abs(v);
      EXPECT_EQ(g > 0, bool(live[i])) << "k=" << k << " row " << i;
    }
  }
}

TEST(Hybrid, CacheServesFrozenRows) {
  const auto cfg = small_vit();
  ViT<float> vit(cfg, 5);
  auto bag = random_bag(6, 6, cfg);
  FeatureCache<float> cache;
  const auto hash = backbone_hash(vit);
  auto a = hybrid_forward(vit, bag, 2, 1, &cache, hash);
  EXPECT_EQ(cache.size(), 4u);
  auto b = hybrid_forward(vit, bag, 2, 1, &cache, hash);
  EXPECT_EQ(std::memcmp(a.feats.data().data(), b.feats.data().data(), a.feats.size() * sizeof(float)), 0);
  hybrid_forward(vit, bag, 2, 2, &cache, hash);
  EXPECT_LE(cache.size(), 6u);
}

TEST(Heatmap, UniformWeightsNormaliseToZero) {
  Bag<float> bag;
  bag.coords = {{0, 0}, {0, 1}, {1, 0}};
  Tensor<float> w({3}, {1.0f / 3, 1.0f / 3, 1.0f / 3});
  auto h = export_heatmap(bag, w, 2, 2);
  for (double v : h.norm) EXPECT_EQ(v, 0.0);
}

TEST(Heatmap, SingleHotPatch) {
  Bag<float> bag;
  bag.coords = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  Tensor<float> w({4}, {0.0f, 0.0f, 1.0f, 0.0f});
  auto h = export_heatmap(bag, w, 2, 2);
  EXPECT_EQ(h.norm, (std::vector<double>{0, 0, 1, 0}));
  EXPECT_EQ(heatmap_gray(h), (std::vector<std::uint8_t>{0, 0, 255, 0}));
}

TEST(Heatmap, OverlapAverages) {
  // Two 2x2-span patches overlapping in one column.
  auto h = build_heatmap({{0, 0}, {0, 1}}, {0.2, 0.8}, 2, 3, 2);
  EXPECT_NEAR(h.raw[1], 0.5, 1e-12);
  EXPECT_NEAR(h.raw[0], 0.2, 1e-12);
  EXPECT_NEAR(h.raw[2], 0.8, 1e-12);
  EXPECT_EQ(h.coverage[1], 2);
}

TEST(Heatmap, OutOfGridThrows) {
  EXPECT_THROW(build_heatmap({{2, 0}}, {1.0}, 2, 2), std::out_of_range);
  EXPECT_THROW(build_heatmap({{-1, 0}}, {1.0}, 2, 2), std::out_of_range);
}
