#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cstring>

#include "gradcheck.hpp"
#include "pathadapt/pathfit.hpp"

using namespace pathadapt;
using pathadapt::testing::grad_check;
using pathadapt::testing::random_tensor;

namespace {

Tensor<float> random_image(const ViTConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> im({cfg.channels, cfg.image_size, cfg.image_size});
  for (auto& v : im.values()) v = float(rng.uniform());
  return im;
}

// Numerical rank from singular values, independent of the merge code path.
int numerical_rank(const Tensor<double>& m, double tol = 1e-9) {
  Eigen::MatrixXd e(m.dim(0), m.dim(1));
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) e(i, j) = m.at(i, j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(e);
  const auto& s = svd.singularValues();
  int r = 0;
  for (int i = 0; i < s.size(); ++i)
    if (s(i) > tol * std::max(1.0, s(0))) ++r;
  return r;
}

bool same_bytes(const Tensor<float>& a, const Tensor<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data().data(), b.data().data(), a.size() * 4) == 0;
}

}  // namespace

TEST(AdapterForward, FreshAdapterEqualsFrozenPath) {
  Rng rng(1);
  Tensor<float> w({3, 4}), b({3});
  for (auto& v : w.values()) v = float(rng.normal());
  for (auto& v : b.values()) v = float(rng.normal());
  auto layer = make_adapter(w, b, 2, 1.0f, rng);
  for (float v : layer.B.data()) EXPECT_EQ(v, 0.0f);
  Tensor<float> x({4}, {0.3f, -1.2f, 2.0f, 0.7f});
  auto y = adapter_forward(layer, x);
  auto ref = linear(reshape(x, {1, 4}), w, b);
  EXPECT_EQ(y.values(), ref.values());
}

TEST(AdapterForward, HandArithmetic) {
  AdapterLayer<float> l;
  l.W0 = Tensor<float>({2, 2}, {1, 0, 0, 1});
  l.bias = Tensor<float>({2}, {0, 0});
  l.A = Tensor<float>({1, 2}, {1, 0});
  l.B = Tensor<float>({2, 1}, {0, 2});
  l.alpha = 1.0f;
  auto y = adapter_forward(l, Tensor<float>({2}, {3, 5}));
  EXPECT_FLOAT_EQ(y[0], 3.0f);
  EXPECT_FLOAT_EQ(y[1], 11.0f);
}

TEST(AdapterForward, ZeroAlphaIsFrozenPath) {
  Rng rng(2);
  Tensor<float> w({3, 3}), b({3});
  for (auto& v : w.values()) v = float(rng.normal());
  auto l = make_adapter(w, b, 2, 0.0f, rng);
  for (auto& v : l.B.values()) v = float(rng.normal());
  Tensor<float> x({2, 3}, {1, 2, 3, -1, 0.5f, 4});
  EXPECT_EQ(adapter_forward(l, x).values(), linear(x, w, b).values());
}

TEST(AdapterForward, WidthMismatchThrows) {
  Rng rng(3);
  auto l = make_adapter(Tensor<float>({3, 4}), Tensor<float>({3}), 2, 1.0f, rng);
  EXPECT_THROW(adapter_forward(l, Tensor<float>({5})), DimensionError);
}

TEST(AdapterForward, GradientsReachOnlyAandB) {
  Rng rng(4);
  Tensor<float> w({3, 4}), b({3});
  auto l = make_adapter(w, b, 2, 1.0f, rng);
  for (auto& v : l.B.values()) v = float(rng.normal());
  Tensor<float> x({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  sum(adapter_forward(l, x)).backward();
  EXPECT_TRUE(l.A.has_grad());
  EXPECT_TRUE(l.B.has_grad());
  EXPECT_FALSE(w.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(AdapterForward, DisabledAdapterContributesNothing) {
  Rng rng(5);
  Tensor<float> w({3, 4}), b({3});
  for (auto& v : w.values()) v = float(rng.normal());
  auto l = make_adapter(w, b, 2, 1.0f, rng);
  for (auto& v : l.B.values()) v = float(rng.normal());
  l.enabled = false;
  Tensor<float> x({1, 4}, {1, 2, 3, 4});
  auto y = adapter_forward(l, x);
  EXPECT_EQ(y.values(), linear(x, w, b).values());
  sum(y).backward();
  EXPECT_FALSE(l.A.has_grad());
  EXPECT_FALSE(l.B.has_grad());
}

TEST(AdapterForward, GradCheckOnAandB) {
  for (int s = 0; s < 20; ++s) {
    Rng rng(100 + s);
    auto w = random_tensor({5, 4}, rng, -1, 1, false), b = random_tensor({5}, rng, -1, 1, false);
    auto l = make_adapter(w, b, 3, 0.7, rng, 0.5);
    for (auto& v : l.B.values()) v = rng.normal();
    auto x = random_tensor({2, 4}, rng, -1, 1, false);
    auto r = grad_check([&] { return sum(mul(adapter_forward(l, x), adapter_forward(l, x))); }, {l.A, l.B});
    EXPECT_LE(r.rel_error, 1e-4);
  }
}

TEST(Merge, ZeroBReturnsW0) {
  Rng rng(6);
  Tensor<float> w({3, 4});
  for (auto& v : w.values()) v = float(rng.normal());
  auto l = make_adapter(w, Tensor<float>({3}), 2, 1.0f, rng);
  EXPECT_EQ(merge(l).values(), w.values());
}

TEST(Merge, MergedForwardMatchesAndRankIsBounded) {
  for (int s = 0; s < 10; ++s) {
    Rng rng(200 + s);
    const std::size_t d1 = 6 + s % 3, d2 = 5 + s % 4, r = 1 + s % 3;
    Tensor<float> w({d2, d1}), b({d2});
    for (auto& v : w.values()) v = float(rng.normal());
    for (auto& v : b.values()) v = float(rng.normal());
    auto l = make_adapter(w, b, r, 1.0f, rng, 0.5);
    for (auto& v : l.B.values()) v = float(rng.normal());
    Tensor<float> x({3, d1});
    for (auto& v : x.values()) v = float(rng.normal());
    auto merged = linear(x, merge(l), b);
    auto parallel = adapter_forward(l, x);
    for (std::size_t i = 0; i < merged.size(); ++i) EXPECT_NEAR(merged[i], parallel[i], 1e-5);
    auto delta = cast<float, double>(merge(l));
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= w[i];
    EXPECT_LE(numerical_rank(delta, 1e-5), int(r));
  }
}

TEST(Attach, CreatesOneAdapterPerTargetPerBlock) {
  ViTConfig cfg;
  cfg.depth = 3;
  ViT<float> vit(cfg, 1);
  AdapterConfig acfg;
  acfg.rank = 4;
  EXPECT_EQ(attach(vit, acfg), 12u);
  EXPECT_EQ(vit.adapter_layers().size(), 12u);
  EXPECT_THROW(attach(vit, acfg), std::logic_error);
}

TEST(Attach, OnlySelectedTargets) {
  ViTConfig cfg;
  ViT<float> vit(cfg, 1);
  AdapterConfig acfg;
  acfg.rank = 2;
  acfg.targets = AdapterConfig::parse_targets("qv");
  EXPECT_EQ(attach(vit, acfg), 4u);
  EXPECT_TRUE(vit.blocks()[0].q().adapter);
  EXPECT_FALSE(vit.blocks()[0].k().adapter);
  EXPECT_FALSE(vit.blocks()[0].fc1.adapter);
  EXPECT_THROW(AdapterConfig::parse_targets("qx"), std::invalid_argument);
}

TEST(Attach, FreezesBackboneAndDetachRestores) {
  ViTConfig cfg;
  ViT<float> vit(cfg, 2);
  auto im = random_image(cfg, 3);
  auto before = vit.encode({im});
  AdapterConfig acfg;
  acfg.rank = 4;
  attach(vit, acfg);
  for (const auto& [n, t] : vit.named_parameters()) EXPECT_FALSE(t.requires_grad()) << n;
  auto fresh = vit.encode({im});
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(fresh[i], before[i], 1e-6);
  for (auto& a : vit.adapter_layers())
    for (auto& v : a->B.values()) v = 0.5f;
  detach(vit);
  for (const auto& [n, t] : vit.named_parameters()) EXPECT_TRUE(t.requires_grad()) << n;
  EXPECT_TRUE(same_bytes(vit.encode({im}), before));
  EXPECT_THROW(detach(vit), std::logic_error);
}

TEST(Attach, ZeroInitEquivalenceOnRandomBackbones) {
  for (int s = 0; s < 10; ++s) {
    ViTConfig cfg;
    cfg.depth = 1 + s % 3;
    cfg.heads = (s % 2) ? 4 : 2;
    ViT<float> vit(cfg, 50 + s);
    std::vector<Tensor<float>> ims{random_image(cfg, 60 + s), random_image(cfg, 70 + s)};
    auto ref = vit.forward(vit.embed_batch(ims));
    AdapterConfig acfg;
    acfg.rank = 1 + s;
    acfg.seed = s;
    attach(vit, acfg);
    auto got = vit.forward(vit.embed_batch(ims));
    for (std::size_t i = 0; i < ref.class_emb.size(); ++i)
      EXPECT_LE(std::abs(ref.class_emb[i] - got.class_emb[i]), 1e-6f);
    for (std::size_t i = 0; i < ref.patch_embs.size(); ++i)
      EXPECT_LE(std::abs(ref.patch_embs[i] - got.patch_embs[i]), 1e-6f);
  }
}

TEST(Attach, AdapterGradientThroughAttentionPassesGradCheck) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.depth = 1;
  for (int s = 0; s < 20; ++s) {
    ViT<double> vit(cfg, 300 + s);
    AdapterConfig acfg;
    acfg.rank = 2;
    acfg.alpha = 1.0f;
    acfg.init_std = 0.2f;
    acfg.seed = s;
    attach(vit, acfg);
    Rng rng(400 + s);
    std::vector<Tensor<double>> trainable;
    for (auto& a : vit.adapter_layers()) {
      for (auto& v : a->B.values()) v = rng.normal(0.0, 0.2);
      trainable.push_back(a->A);
      trainable.push_back(a->B);
    }
    Tensor<double> im({3, 8, 8});
    for (auto& v : im.values()) v = rng.uniform();
    Tensor<double> head({3, 8});
    for (auto& v : head.values()) v = rng.normal();
    auto loss = [&] {
      auto emb = vit.forward(vit.embed_patches(im)).class_emb;
      return cross_entropy(linear(emb, head), std::vector<int>{1});
    };
    EXPECT_LE(grad_check(loss, trainable).rel_error, 1e-4) << "instance " << s;
  }
}

TEST(CountParams, SingleLayerClosedForm) {
  EXPECT_EQ(adapter_params_per_layer(64, 768, 768), 98304u);
}

TEST(CountParams, ToyViT) {
  ViTConfig cfg;
  cfg.depth = 2;
  cfg.dim = 32;
  AdapterConfig acfg;
  acfg.rank = 4;
  EXPECT_EQ(count_params(cfg, acfg).adapter, 2048u);
  ViT<float> vit(cfg, 1);
  attach(vit, acfg);
  EXPECT_EQ(count_params(vit).adapter, 2048u);
}

TEST(CountParams, ViTBShapedConfig) {
  ViTConfig cfg;
  cfg.image_size = 224;
  cfg.patch_size = 16;
  cfg.dim = 768;
  cfg.depth = 12;
  cfg.heads = 12;
  cfg.mlp_ratio = 4;
  AdapterConfig acfg;  // r = 64 by default
  EXPECT_EQ(acfg.rank, 64u);
  EXPECT_EQ(count_params(cfg, acfg).adapter, 4718592u);
}

TEST(CountParams, DisabledAdaptersLeaveOnlyHeadTrainable) {
  ViTConfig cfg;
  ViT<float> vit(cfg, 1);
  AdapterConfig acfg;
  acfg.rank = 4;
  acfg.enabled = false;
  attach(vit, acfg);
  Tensor<float> hw({5, cfg.dim}), hb({5});
  auto pc = count_params(vit, {hw, hb});
  EXPECT_EQ(pc.trainable, hw.size() + hb.size());
}

TEST(CountParams, LiveModelMatchesStructuralFormula) {
  Rng rng(9);
  for (int s = 0; s < 10; ++s) {
    ViTConfig cfg;
    cfg.heads = 1 + rng.below(2);
    cfg.dim = 8 * (1 + rng.below(3)) * cfg.heads;
    cfg.depth = 1 + rng.below(3);
    cfg.patch_size = 4 << rng.below(2);
    cfg.image_size = cfg.patch_size * (1 + rng.below(3));
    cfg.mlp_ratio = 1 + rng.below(3);
    AdapterConfig acfg;
    acfg.rank = 1 + rng.below(8);
    acfg.targets = {rng.below(2) == 1, true, rng.below(2) == 1, rng.below(2) == 1};
    ViT<float> vit(cfg, s);
    attach(vit, acfg);
    auto live = count_params(vit), formula = count_params(cfg, acfg);
    EXPECT_EQ(live.adapter, formula.adapter);
    EXPECT_EQ(live.total, formula.total);
    EXPECT_EQ(live.trainable, formula.trainable);
    EXPECT_EQ(live.adapter, cfg.depth * acfg.target_count() * acfg.rank * (2 * cfg.dim));
  }
}
