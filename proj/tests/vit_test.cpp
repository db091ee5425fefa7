#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "pathadapt/vit.hpp"

using namespace pathadapt;
using pathadapt::testing::grad_check;

namespace {

Tensor<float> random_image(const ViTConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> im({cfg.channels, cfg.image_size, cfg.image_size});
  for (auto& v : im.values()) v = float(rng.uniform());
  return im;
}

std::vector<double> layernorm_ref(const std::vector<double>& x) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= double(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= double(x.size());
  std::vector<double> y;
  for (double v : x) y.push_back((v - mu) / std::sqrt(var + 1e-5));
  return y;
}

}  // namespace

TEST(ViTConfig, RejectsIndivisibleGeometry) {
  ViTConfig c;
  c.image_size = 30;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ViTConfig{};
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(EmbedPatches, TokenCount) {
  ViTConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  ViT<float> vit(cfg, 1);
  auto tok = vit.embed_patches(random_image(cfg, 2));
  EXPECT_EQ(tok.shape(), (Shape{17, cfg.dim}));
}

TEST(EmbedPatches, SizeMismatchThrows) {
  ViTConfig cfg;
  ViT<float> vit(cfg, 1);
  Tensor<float> wrong({3, 16, 16});
  EXPECT_THROW(vit.embed_patches(wrong), DimensionError);
}

TEST(EmbedPatches, ZeroImageAndWeightsGivePositions) {
  ViTConfig cfg;
  ViT<float> vit(cfg, 3);
  std::fill(vit.patch_embed().weight.values().begin(), vit.patch_embed().weight.values().end(), 0.0f);
  std::fill(vit.cls_token().values().begin(), vit.cls_token().values().end(), 0.0f);
  Tensor<float> zero({3, 32, 32});
  auto tok = vit.embed_patches(zero);
  EXPECT_EQ(tok.values(), vit.pos_embed().values());
}

TEST(EmbedPatches, SwappingPatchesSwapsTokens) {
  ViTConfig cfg;
  ViT<float> vit(cfg, 4);
  auto im = random_image(cfg, 5);
  // swap grid cells (0,0) and (2,3)
  auto swapped = im.detach();
  const std::size_t p = cfg.patch_size, s = cfg.image_size;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx)
        std::swap(swapped[(c * s + dy) * s + dx], swapped[(c * s + 2 * p + dy) * s + 3 * p + dx]);
  auto a = vit.embed_patches(im), b = vit.embed_patches(swapped);
  const auto& pos = vit.pos_embed();
  const std::size_t d = cfg.dim, t0 = 1, t1 = 1 + 2 * cfg.grid() + 3;
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_NEAR(a.at(t0, j) - pos.at(t0, j), b.at(t1, j) - pos.at(t1, j), 1e-6);
    EXPECT_NEAR(a.at(t1, j) - pos.at(t1, j), b.at(t0, j) - pos.at(t0, j), 1e-6);
  }
}

TEST(Forward, EmptyStackIsNormalizedClassToken) {
  ViTConfig cfg;
  cfg.depth = 0;
  ViT<double> vit(cfg, 6);
  Tensor<double> im({3, 32, 32}, 0.5);
  auto out = vit.forward(vit.embed_patches(im));
  std::vector<double> x(cfg.dim);
  for (std::size_t j = 0; j < cfg.dim; ++j) x[j] = vit.cls_token()[j] + vit.pos_embed().at(0, j);
  auto ref = layernorm_ref(x);
  for (std::size_t j = 0; j < cfg.dim; ++j) EXPECT_NEAR(out.class_emb[j], ref[j], 1e-12);
}

TEST(Forward, AttentionMapsAreProbabilityVectors) {
  ViTConfig cfg;
  cfg.depth = 3;
  ViT<float> vit(cfg, 7);
  auto out = vit.forward(vit.embed_batch({random_image(cfg, 8), random_image(cfg, 9)}));
  ASSERT_EQ(out.attn_maps.size(), 2u);
  EXPECT_EQ(out.class_emb.shape(), (Shape{2, cfg.dim}));
  EXPECT_EQ(out.patch_embs.shape(), (Shape{2 * 16, cfg.dim}));
  for (const auto& m : out.attn_maps) {
    ASSERT_EQ(m.shape(), (Shape{3, 16}));
    for (std::size_t b = 0; b < 3; ++b) {
      double s = 0;
      for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_GE(m.at(b, j), 0.0f);
        s += m.at(b, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Forward, BatchMatchesSingleImage) {
  ViTConfig cfg;
  ViT<float> vit(cfg, 10);
  auto a = random_image(cfg, 11), b = random_image(cfg, 12);
  auto batch = vit.forward(vit.embed_batch({a, b}));
  auto single = vit.forward(vit.embed_patches(b));
  for (std::size_t j = 0; j < cfg.dim; ++j)
    EXPECT_NEAR(batch.class_emb.at(1, j), single.class_emb.at(0, j), 1e-6);
}

// One head, dim 4, one block, a single patch -> two tokens. The reference
// below evaluates the block with plain loops.
TEST(Forward, HandSetSingleHeadBlock) {
  ViTConfig cfg;
  cfg.image_size = 2;
  cfg.patch_size = 2;
  cfg.channels = 1;
  cfg.dim = 4;
  cfg.heads = 1;
  cfg.depth = 1;
  ViT<double> vit(cfg, 13);
  auto& blk = vit.blocks()[0];
  auto set = [](Tensor<double>& t, std::vector<double> v) { t.values() = std::move(v); };
  set(blk.q().weight, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  set(blk.k().weight, {0, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0});
  set(blk.v().weight, {2, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0.5});
  set(blk.o().weight, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  for (auto* l : {&blk.q(), &blk.k(), &blk.v(), &blk.o()}) set(l->bias, {0, 0, 0, 0});
  std::fill(blk.fc2.weight.values().begin(), blk.fc2.weight.values().end(), 0.0);
  std::fill(blk.fc2.bias.values().begin(), blk.fc2.bias.values().end(), 0.0);

  Tensor<double> tokens({2, 4}, {0.5, -1.0, 2.0, 0.0, 1.5, 0.25, -0.5, 1.0});
  auto out = vit.forward(tokens);

  std::vector<std::vector<double>> x{{0.5, -1.0, 2.0, 0.0}, {1.5, 0.25, -0.5, 1.0}};
  std::vector<std::vector<double>> h{layernorm_ref(x[0]), layernorm_ref(x[1])};
  auto apply = [](const std::vector<double>& w, const std::vector<double>& v) {
    std::vector<double> y(4, 0.0);
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 4; ++i) y[o] += w[o * 4 + i] * v[i];
    return y;
  };
  std::vector<std::vector<double>> q, k, v;
  for (int t = 0; t < 2; ++t) {
    q.push_back(apply(blk.q().weight.values(), h[t]));
    k.push_back(apply(blk.k().weight.values(), h[t]));
    v.push_back(apply(blk.v().weight.values(), h[t]));
  }
  std::vector<std::vector<double>> y(2, std::vector<double>(4));
  double cls_attn_to_patch = 0;
  for (int i = 0; i < 2; ++i) {
    double s[2];
    for (int j = 0; j < 2; ++j) {
      s[j] = 0;
      for (int c = 0; c < 4; ++c) s[j] += q[i][c] * k[j][c];
      s[j] /= 2.0;  // sqrt(dh) = sqrt(4)
    }
    const double m = std::max(s[0], s[1]);
    const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    if (i == 0) cls_attn_to_patch = p1;
    for (int c = 0; c < 4; ++c) y[i][c] = x[i][c] + p0 * v[0][c] + p1 * v[1][c];
  }
  auto ref = layernorm_ref(y[0]);
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.class_emb[c], ref[c], 1e-12);
  auto ref_patch = layernorm_ref(y[1]);
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.patch_embs[c], ref_patch[c], 1e-12);
  // Renormalized over the single patch token.
  EXPECT_NEAR(out.attn_maps[0][0], 1.0, 1e-12);
  EXPECT_GT(cls_attn_to_patch, 0.0);
}

TEST(Forward, DeterministicBytes) {
  ViTConfig cfg;
  ViT<float> a(cfg, 14), b(cfg, 14);
  auto im = random_image(cfg, 15);
  auto ya = a.forward(a.embed_patches(im)).class_emb;
  auto yb = b.forward(b.embed_patches(im)).class_emb;
  EXPECT_EQ(0, std::memcmp(ya.data().data(), yb.data().data(), ya.size() * sizeof(float)));
}

TEST(Forward, EveryBackboneWeightPassesGradCheck) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.depth = 1;
  ViT<double> vit(cfg, 16);
  // Larger weights than the 0.02 init so every path carries signal.
  Rng rng(17);
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : vit.named_parameters()) {
    Tensor<double> h = t;
    for (auto& v : h.values()) v += rng.normal(0.0, 0.3);
    params.push_back(h);
  }
  Tensor<double> im({3, 8, 8});
  for (auto& v : im.values()) v = rng.uniform();
  auto loss = [&] {
    auto out = vit.forward(vit.embed_patches(im));
    Tensor<double> w({1, 8});
    Rng r2(99);
    for (auto& v : w.values()) v = r2.normal();
    return add(sum(mul(out.class_emb, w)), mean(mul(out.patch_embs, out.patch_embs)));
  };
  EXPECT_LE(grad_check(loss, params).rel_error, 1e-4);
}
