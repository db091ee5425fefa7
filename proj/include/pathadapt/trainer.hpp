#pragma once

// Optimisation loops: AdamW, experiment configs, and per-task runners with
// seeded shuffling, best-validation selection and test-set reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathadapt/heads.hpp"
#include "pathadapt/io.hpp"
#include "pathadapt/metrics.hpp"
#include "pathadapt/mil.hpp"
#include "pathadapt/pathfit.hpp"
#include "pathadapt/seg.hpp"
#include "pathadapt/synth.hpp"
#include "pathadapt/vit.hpp"

namespace pathadapt {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// One AdamW update over the parameters that require grad. Decay is decoupled
// and applied before the moment step. A parameter without a gradient buffer
// is treated as having a zero gradient.
template <class T>
void adamw_step(const NamedParams<T>& params, AdamState& st, const AdamWConfig& c) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (T g : p.grad())
      if (!std::isfinite(double(g)))
        throw std::runtime_error("adamw: non-finite gradient in parameter '" + name + "'");
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(st.step));
  for (const auto& [name, pc] : params) {
    if (!pc.requires_grad()) continue;
    Tensor<T> p = pc;
    auto& [m, v] = st.moments[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    const bool has = p.has_grad();
    auto& w = p.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? double(p.grad()[i]) : 0.0;
      double x = double(w[i]) * (1.0 - c.lr * c.weight_decay);
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      x -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
      w[i] = static_cast<T>(x);
    }
  }
}

template <class T>
void zero_grads(const NamedParams<T>& params) {
  for (const auto& [name, p] : params) {
    Tensor<T> h = p;
    h.clear_grad();
  }
}

enum class TaskKind { roi, fewshot, seg, mil };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::roi: return "roi";
    case TaskKind::fewshot: return "fewshot";
    case TaskKind::seg: return "seg";
    case TaskKind::mil: return "mil";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "roi") return TaskKind::roi;
  if (s == "fewshot") return TaskKind::fewshot;
  if (s == "seg") return TaskKind::seg;
  if (s == "mil") return TaskKind::mil;
  throw std::invalid_argument("unknown task '" + s + "' (use roi, fewshot, seg or mil)");
}

struct TrainConfig {
  TaskKind task = TaskKind::roi;
  AdamWConfig optim;
  std::size_t batch_size = 16;
  std::size_t epochs = 15;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool pathfit_enabled = true;
  std::size_t mil_sample_k = 64;
  std::size_t shots = 0;  // few-shot k; 0 uses the full training split
  std::string head = "linear";  // or "prompt"
  std::size_t adapter_rank = 64;
  float adapter_alpha = 1.0f;
  std::string adapter_targets = "qkvo";

  static TrainConfig defaults(TaskKind k) {
    TrainConfig c;
    c.task = k;
    if (k == TaskKind::mil) {
      c.optim.lr = 6e-4;
      c.epochs = 10;
      c.seeds = {0, 1, 2};
      c.batch_size = 1;
    }
    return c;
  }

  AdapterConfig adapter_config(std::uint64_t seed) const {
    AdapterConfig a;
    a.rank = adapter_rank;
    a.alpha = adapter_alpha;
    a.targets = AdapterConfig::parse_targets(adapter_targets);
    a.enabled = pathfit_enabled;
    a.seed = seed;
    return a;
  }

  nlohmann::json to_json() const {
    return {{"task", to_string(task)},
            {"lr", optim.lr},
            {"weight_decay", optim.weight_decay},
            {"beta1", optim.beta1},
            {"beta2", optim.beta2},
            {"eps", optim.eps},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seeds", seeds},
            {"pathfit_enabled", pathfit_enabled},
            {"mil_sample_k", mil_sample_k},
            {"shots", shots},
            {"head", head},
            {"adapter_rank", adapter_rank},
            {"adapter_alpha", adapter_alpha},
            {"adapter_targets", adapter_targets}};
  }

  // Missing keys fall back to the task's defaults.
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c = defaults(parse_task(j.value("task", std::string("roi"))));
    c.optim.lr = j.value("lr", c.optim.lr);
    c.optim.weight_decay = j.value("weight_decay", c.optim.weight_decay);
    c.optim.beta1 = j.value("beta1", c.optim.beta1);
    c.optim.beta2 = j.value("beta2", c.optim.beta2);
    c.optim.eps = j.value("eps", c.optim.eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seeds = j.value("seeds", c.seeds);
    c.pathfit_enabled = j.value("pathfit_enabled", c.pathfit_enabled);
    c.mil_sample_k = j.value("mil_sample_k", c.mil_sample_k);
    c.shots = j.value("shots", c.shots);
    c.head = j.value("head", c.head);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.adapter_alpha = j.value("adapter_alpha", c.adapter_alpha);
    c.adapter_targets = j.value("adapter_targets", c.adapter_targets);
    c.validate();
    return c;
  }

  void validate() const {
    if (!(optim.lr > 0)) throw std::invalid_argument("lr must be > 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("at least one seed is required");
    if (head != "linear" && head != "prompt")
      throw std::invalid_argument("head must be 'linear' or 'prompt', got '" + head + "'");
    if (task == TaskKind::fewshot && shots == 0)
      throw std::invalid_argument("few-shot runs need shots >= 1");
    adapter_config(0).validate();
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;  // 1-based; 0 when no training happened
  std::vector<double> val_history;
  std::map<std::string, double> metrics;
  io::Checkpoint trained;   // adapters (when enabled) plus task heads
  io::Checkpoint backbone;  // backbone tensors after training
};

struct ExperimentResult {
  metrics::MetricsReport report;
  std::vector<SeedResult> seeds;
};

// Test metrics from logits. Probabilities feed the AUC.
inline std::map<std::string, double> classification_metrics(const std::vector<double>& probs,
                                                           const std::vector<int>& labels,
                                                           std::size_t classes) {
  std::vector<int> preds(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto first = probs.begin() + long(i * classes);
    preds[i] = int(std::max_element(first, first + long(classes)) - first);
  }
  std::map<std::string, double> m;
  m["balanced_accuracy"] = metrics::balanced_accuracy(preds, labels, classes);
  m["balanced_error"] = 1.0 - m["balanced_accuracy"];
  m["weighted_f1"] = metrics::weighted_f1(preds, labels, classes);
  m["macro_precision"] = metrics::macro_precision(preds, labels, classes);
  m["macro_recall"] = metrics::macro_recall(preds, labels, classes);
  m["macro_auc"] = metrics::macro_auc(probs, labels, classes);
  return m;
}

template <class T>
std::vector<double> softmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> p(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double m = -INFINITY, s = 0.0;
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, double(logits.at(i, j)));
    for (std::size_t j = 0; j < c; ++j) s += p[i * c + j] = std::exp(double(logits.at(i, j)) - m);
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= s;
  }
  return p;
}

template <class T>
void check_finite_loss(const Tensor<T>& loss, std::uint64_t seed, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(double(loss.item())))
    throw std::runtime_error("training diverged: loss " + std::to_string(double(loss.item())) +
                             " at seed " + std::to_string(seed) + ", epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step));
}

template <class T>
std::vector<std::vector<T>> snapshot(const NamedParams<T>& params) {
  std::vector<std::vector<T>> s;
  for (const auto& [n, p] : params) s.push_back(p.values());
  return s;
}

template <class T>
void restore(const NamedParams<T>& params, const std::vector<std::vector<T>>& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> h = params[i].second;
    h.values() = s[i];
  }
}

// Frozen class embeddings of a set of images, adapters bypassed.
template <class T>
Tensor<T> frozen_embeddings(const ViT<T>& vit, const std::vector<Tensor<T>>& images,
                            std::size_t chunk = 64) {
  NoGradGuard ng;
  std::vector<Tensor<T>> parts;
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    std::vector<Tensor<T>> ims(images.begin() + long(i),
                               images.begin() + long(std::min(images.size(), i + chunk)));
    parts.push_back(vit.encode(ims, false));
  }
  return concat_rows(parts);
}

// Adapted backbone plus a linear or prompt head.
template <class T>
struct RoiModel {
  ViT<T> vit;
  bool pathfit = false;
  bool prompt = false;
  LinearHead<T> head;
  PromptBank<T> bank;

  RoiModel(const ViT<T>& base, const TrainConfig& cfg, const std::vector<std::string>& class_names,
           std::uint64_t seed)
      : vit(base.clone()), pathfit(cfg.pathfit_enabled), prompt(cfg.head == "prompt") {
    vit.set_trainable(false);
    if (pathfit) vit.attach_adapters(cfg.adapter_config(derive_seed(seed, 11)));
    const std::size_t d = vit.config().dim;
    if (prompt)
      bank = PromptBank<T>::from_class_names(class_names, d, d, derive_seed(seed, 12));
    else
      head = LinearHead<T>(d, class_names.size(), derive_seed(seed, 12));
  }

  NamedParams<T> head_parameters() const {
    if (prompt) return {{"head.projection", bank.projection}};
    return {{"head.weight", head.weight}, {"head.bias", head.bias}};
  }

  NamedParams<T> trainable() const {
    NamedParams<T> p = pathfit ? vit.adapter_parameters() : NamedParams<T>{};
    for (auto& h : head_parameters()) p.push_back(h);
    return p;
  }

  Tensor<T> logits(const Tensor<T>& emb) const { return prompt ? prompt_logits(bank, emb) : classify(head, emb); }

  Tensor<T> embed(const std::vector<Tensor<T>>& images) const { return vit.encode(images, pathfit); }
};

template <class T>
io::Checkpoint trained_checkpoint(const NamedParams<T>& params, const TrainConfig& cfg,
                                  std::uint64_t seed, std::size_t best_epoch) {
  io::Checkpoint c;
  c.config = {{"train", cfg.to_json()}, {"seed", seed}, {"best_epoch", best_epoch}};
  for (const auto& [n, t] : params) c.add(n, t, false);
  return c;
}

struct RunHooks {
  // Called after each epoch with (seed, epoch, train loss, val score).
  std::function<void(std::uint64_t, std::size_t, double, double)> on_epoch;
};

// ROI classification; with `cfg.shots > 0` each seed trains on a few-shot
// subset of the training split.
template <class T>
ExperimentResult run_roi(const TrainConfig& cfg, const synth::SplitData<T>& data, const ViT<T>& base,
                         const RunHooks& hooks = {}) {
  cfg.validate();
  if (data.train.size() == 0 || data.val.size() == 0 || data.test.size() == 0)
    throw std::invalid_argument("run_roi: every split must be non-empty");
  const std::size_t classes = data.class_names.size();
  ExperimentResult res;
  res.report.task = to_string(cfg.task);

  // Frozen embeddings are shared by every seed of a linear-probe run.
  Tensor<T> f_train, f_val, f_test;
  if (!cfg.pathfit_enabled) {
    f_train = frozen_embeddings(base, data.train.images);
    f_val = frozen_embeddings(base, data.val.images);
    f_test = frozen_embeddings(base, data.test.images);
  }

  for (std::uint64_t seed : cfg.seeds) {
    RoiModel<T> model(base, cfg, data.class_names, seed);
    const auto params = model.trainable();
    std::vector<std::size_t> pool(data.train.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    if (cfg.shots > 0)
      pool = sample_few_shot(data.train.labels, classes, cfg.shots, derive_seed(seed, 13 + cfg.shots),
                             data.class_names);

    auto eval = [&](const std::vector<Tensor<T>>& ims, const Tensor<T>& frozen) {
      NoGradGuard ng;
      if (!cfg.pathfit_enabled) return model.logits(frozen);
      std::vector<Tensor<T>> parts;
      for (std::size_t i = 0; i < ims.size(); i += 64) {
        std::vector<Tensor<T>> chunk(ims.begin() + long(i), ims.begin() + long(std::min(ims.size(), i + 64)));
        parts.push_back(model.logits(model.embed(chunk)));
      }
      return concat_rows(parts);
    };
    auto val_score = [&] {
      Tensor<T> lg = eval(data.val.images, f_val);
      return classification_metrics(softmax_rows(lg), data.val.labels, classes).at("balanced_accuracy");
    };

    AdamState st;
    SeedResult sr;
    sr.seed = seed;
    double best = -1.0;
    std::vector<std::vector<T>> best_state = snapshot(params);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      Rng order_rng(derive_seed(seed, 1000 + epoch));
      std::vector<std::size_t> order = pool;
      order_rng.shuffle(order.begin(), order.end());
      double loss_sum = 0.0;
      std::size_t steps = 0;
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        const std::size_t e = std::min(order.size(), b + cfg.batch_size);
        std::vector<std::size_t> idx(order.begin() + long(b), order.begin() + long(e));
        std::vector<int> y;
        for (auto i : idx) y.push_back(data.train.labels[i]);
        Tensor<T> emb;
        if (cfg.pathfit_enabled) {
          std::vector<Tensor<T>> ims;
          for (auto i : idx) ims.push_back(data.train.images[i]);
          emb = model.embed(ims);
        } else {
          emb = gather_rows(f_train, idx);
        }
        Tensor<T> loss = cross_entropy(model.logits(emb), y);
        check_finite_loss(loss, seed, epoch, steps);
        loss.backward();
        adamw_step(params, st, cfg.optim);
        zero_grads(params);
        loss_sum += double(loss.item());
        ++steps;
      }
      const double v = val_score();
      sr.val_history.push_back(v);
      if (hooks.on_epoch) hooks.on_epoch(seed, epoch, loss_sum / double(std::max<std::size_t>(steps, 1)), v);
      if (v > best) {
        best = v;
        sr.best_epoch = epoch;
        best_state = snapshot(params);
      }
    }
    restore(params, best_state);
    sr.metrics = classification_metrics(softmax_rows(eval(data.test.images, f_test)), data.test.labels, classes);
    sr.trained = trained_checkpoint(params, cfg, seed, sr.best_epoch);
    sr.backbone = io::backbone_checkpoint(model.vit);
    res.report.add_seed(seed, sr.metrics);
    res.seeds.push_back(std::move(sr));
  }
  return res;
}

template <class T>
struct MilData {
  std::vector<std::string> class_names;
  std::vector<Bag<T>> train, val, test;
};

template <class T>
struct MilModel {
  ViT<T> vit;
  bool pathfit = false;
  GatedAttention<T> att;
  std::uint64_t hash = 0;

  MilModel(const ViT<T>& base, const TrainConfig& cfg, std::size_t classes, std::uint64_t seed)
      : vit(base.clone()), pathfit(cfg.pathfit_enabled),
        att(base.config().dim, classes, derive_seed(seed, 21)), hash(backbone_hash(base)) {
    vit.set_trainable(false);
    if (pathfit) vit.attach_adapters(cfg.adapter_config(derive_seed(seed, 11)));
  }

  NamedParams<T> trainable() const {
    NamedParams<T> p = pathfit ? vit.adapter_parameters() : NamedParams<T>{};
    for (auto& h : att.named_parameters()) p.push_back(h);
    return p;
  }

  // Inference: every patch through the adapted backbone when enabled.
  Aggregated<T> infer(const Bag<T>& bag, FeatureCache<T>& cache) const {
    NoGradGuard ng;
    std::vector<std::size_t> all(bag.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    Tensor<T> feats = pathfit ? vit.encode(bag.patches, true) : frozen_features(vit, bag, all, &cache, hash);
    return aggregate(att, feats);
  }

  Tensor<T> logits(const Aggregated<T>& a) const {
    return reshape(classify(att.classifier, a.slide_emb), {1, att.classifier.classes()});
  }
};

// Slide-level ABMIL training, one bag per optimiser step.
template <class T>
ExperimentResult run_mil(const TrainConfig& cfg, const MilData<T>& data, const ViT<T>& base,
                         const RunHooks& hooks = {}) {
  cfg.validate();
  if (data.train.empty() || data.val.empty() || data.test.empty())
    throw std::invalid_argument("run_mil: every split must be non-empty");
  const std::size_t classes = data.class_names.size();
  ExperimentResult res;
  res.report.task = "mil";
  FeatureCache<T> cache;

  for (std::uint64_t seed : cfg.seeds) {
    MilModel<T> model(base, cfg, classes, seed);
    const auto params = model.trainable();
    auto eval = [&](const std::vector<Bag<T>>& bags) {
      std::vector<double> probs;
      std::vector<int> labels;
      for (const auto& b : bags) {
        auto p = softmax_rows(model.logits(model.infer(b, cache)));
        probs.insert(probs.end(), p.begin(), p.end());
        labels.push_back(b.label);
      }
      return classification_metrics(probs, labels, classes);
    };
    AdamState st;
    SeedResult sr;
    sr.seed = seed;
    double best = -1.0;
    auto best_state = snapshot(params);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      Rng order_rng(derive_seed(seed, 1000 + epoch));
      auto order = order_rng.permutation(data.train.size());
      double loss_sum = 0.0;
      for (std::size_t step = 0; step < order.size(); ++step) {
        const auto& bag = data.train[order[step]];
        Tensor<T> feats;
        if (model.pathfit) {
          feats = hybrid_forward(model.vit, bag, cfg.mil_sample_k,
                                 derive_seed(derive_seed(seed, 2000 + epoch), step), &cache, model.hash)
                      .feats;
        } else {
          std::vector<std::size_t> all(bag.size());
          std::iota(all.begin(), all.end(), std::size_t{0});
          feats = frozen_features(model.vit, bag, all, &cache, model.hash);
        }
        Tensor<T> loss = cross_entropy(model.logits(aggregate(model.att, feats)), std::vector<int>{bag.label});
        check_finite_loss(loss, seed, epoch, step);
        loss.backward();
        adamw_step(params, st, cfg.optim);
        zero_grads(params);
        loss_sum += double(loss.item());
      }
      const double v = eval(data.val).at("balanced_accuracy");
      sr.val_history.push_back(v);
      if (hooks.on_epoch) hooks.on_epoch(seed, epoch, loss_sum / double(order.size()), v);
      if (v > best) {
        best = v;
        sr.best_epoch = epoch;
        best_state = snapshot(params);
      }
    }
    restore(params, best_state);
    sr.metrics = eval(data.test);
    sr.trained = trained_checkpoint(params, cfg, seed, sr.best_epoch);
    sr.backbone = io::backbone_checkpoint(model.vit);
    res.report.add_seed(seed, sr.metrics);
    res.seeds.push_back(std::move(sr));
  }
  return res;
}

template <class T>
struct SegData {
  std::size_t classes = 2;
  synth::SegSet<T> train, val, test;
};

template <class T>
struct SegModel {
  ViT<T> vit;
  bool pathfit = false;
  SegNet<T> net;

  SegModel(const ViT<T>& base, const TrainConfig& cfg, std::size_t classes, std::uint64_t seed)
      : vit(base.clone()), pathfit(cfg.pathfit_enabled),
        net(base.config().dim, classes, derive_seed(seed, 31), base.config().channels) {
    vit.set_trainable(false);
    if (pathfit) vit.attach_adapters(cfg.adapter_config(derive_seed(seed, 11)));
  }

  NamedParams<T> trainable() const {
    NamedParams<T> p = pathfit ? vit.adapter_parameters() : NamedParams<T>{};
    for (auto& h : net.named_parameters()) p.push_back(h);
    return p;
  }

  Tensor<T> forward(const Tensor<T>& image) const { return seg_forward(net, vit, image, pathfit); }
};

template <class T>
std::map<std::string, double> seg_metrics(const SegModel<T>& model, const synth::SegSet<T>& set,
                                          std::size_t classes) {
  NoGradGuard ng;
  double dice = 0.0;
  std::vector<int> all_pred, all_true;
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    auto pred = argmax_mask(model.forward(set.images[i]));
    dice += dice_score(pred, set.masks[i], classes);
    all_pred.insert(all_pred.end(), pred.begin(), pred.end());
    all_true.insert(all_true.end(), set.masks[i].begin(), set.masks[i].end());
  }
  std::map<std::string, double> m;
  m["dice"] = dice / double(set.images.size());
  m["balanced_accuracy"] = metrics::balanced_accuracy(all_pred, all_true, classes);
  m["balanced_error"] = 1.0 - m["balanced_accuracy"];
  m["weighted_f1"] = metrics::weighted_f1(all_pred, all_true, classes);
  m["macro_precision"] = metrics::macro_precision(all_pred, all_true, classes);
  m["macro_recall"] = metrics::macro_recall(all_pred, all_true, classes);
  return m;
}

// Segmentation; validation selection by mean per-image dice.
template <class T>
ExperimentResult run_seg(const TrainConfig& cfg, const SegData<T>& data, const ViT<T>& base,
                         const RunHooks& hooks = {}) {
  cfg.validate();
  if (data.train.images.empty() || data.val.images.empty() || data.test.images.empty())
    throw std::invalid_argument("run_seg: every split must be non-empty");
  ExperimentResult res;
  res.report.task = "seg";
  for (std::uint64_t seed : cfg.seeds) {
    SegModel<T> model(base, cfg, data.classes, seed);
    const auto params = model.trainable();
    AdamState st;
    SeedResult sr;
    sr.seed = seed;
    double best = -1.0;
    auto best_state = snapshot(params);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      Rng order_rng(derive_seed(seed, 1000 + epoch));
      auto order = order_rng.permutation(data.train.images.size());
      double loss_sum = 0.0;
      std::size_t steps = 0;
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        const std::size_t e = std::min(order.size(), b + cfg.batch_size);
        Tensor<T> loss;
        for (std::size_t i = b; i < e; ++i) {
          Tensor<T> l = seg_loss(model.forward(data.train.images[order[i]]), data.train.masks[order[i]]);
          loss = loss.defined() ? add(loss, l) : l;
        }
        loss = scale(loss, T(1) / T(e - b));
        check_finite_loss(loss, seed, epoch, steps);
        loss.backward();
        adamw_step(params, st, cfg.optim);
        zero_grads(params);
        loss_sum += double(loss.item());
        ++steps;
      }
      const double v = seg_metrics(model, data.val, data.classes).at("dice");
      sr.val_history.push_back(v);
      if (hooks.on_epoch) hooks.on_epoch(seed, epoch, loss_sum / double(std::max<std::size_t>(steps, 1)), v);
      if (v > best) {
        best = v;
        sr.best_epoch = epoch;
        best_state = snapshot(params);
      }
    }
    restore(params, best_state);
    sr.metrics = seg_metrics(model, data.test, data.classes);
    sr.trained = trained_checkpoint(params, cfg, seed, sr.best_epoch);
    sr.backbone = io::backbone_checkpoint(model.vit);
    res.report.add_seed(seed, sr.metrics);
    res.seeds.push_back(std::move(sr));
  }
  return res;
}

// Paired comparison of a disabled (baseline) and an enabled run.
inline nlohmann::json compare_reports(const metrics::MetricsReport& disabled,
                                      const metrics::MetricsReport& enabled) {
  if (disabled.task != enabled.task)
    throw std::invalid_argument("compare: runs are for different tasks ('" + disabled.task + "' vs '" +
                                enabled.task + "')");
  nlohmann::json j;
  j["task"] = disabled.task;
  for (const auto& [name, vals] : disabled.per_seed) {
    if (!enabled.has(name)) throw std::invalid_argument("compare: metric '" + name + "' missing from one run");
    j["delta"][name] = enabled.mean(name) - disabled.mean(name);
    j["baseline"][name] = disabled.mean(name);
    j["adapted"][name] = enabled.mean(name);
  }
  for (const auto& [name, vals] : enabled.per_seed)
    if (!disabled.has(name)) throw std::invalid_argument("compare: metric '" + name + "' missing from one run");
  if (disabled.has("balanced_error")) {
    const double a = disabled.mean("balanced_error"), b = enabled.mean("balanced_error");
    j["err"]["balanced_error"] = a > 0 ? nlohmann::json(metrics::error_reduction_rate(a, b)) : nlohmann::json();
    // Seed-paired ERRs, averaged.
    const auto& da = disabled.per_seed.at("balanced_error");
    const auto& db = enabled.per_seed.at("balanced_error");
    if (da.size() == db.size()) {
      std::vector<double> errs;
      for (std::size_t i = 0; i < da.size(); ++i)
        if (da[i] > 0) errs.push_back(metrics::error_reduction_rate(da[i], db[i]));
      if (!errs.empty()) j["err"]["paired_mean"] = metrics::mean_of(errs);
    }
  }
  return j;
}

inline ViTConfig toy_vit_config() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 32;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

// The defaults get past the initial plateau (uniform attention averages the
// gratings away) around epoch 7.
struct PretrainConfig {
  ViTConfig vit = toy_vit_config();
  std::size_t images = 2000;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  std::uint64_t seed = 7;

  nlohmann::json to_json() const {
    return {{"vit", io::to_json(vit)}, {"images", images}, {"epochs", epochs},
            {"batch_size", batch_size}, {"lr", lr},        {"seed", seed}};
  }

  static PretrainConfig from_json(const nlohmann::json& j) {
    PretrainConfig c;
    if (j.contains("vit")) c.vit = io::vit_config_from_json(j.at("vit"));
    c.images = j.value("images", c.images);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    if (c.images == 0 || c.batch_size == 0) throw std::invalid_argument("pretrain: images and batch_size must be >= 1");
    return c;
  }
};

// Toy stand-in for a pretrained foundation model: the whole backbone plus a
// throwaway head trained on family-A orientation labels. The returned
// backbone is frozen.
template <class T>
ViT<T> pretrain_toy(const PretrainConfig& pc, const RunHooks& hooks = {}) {
  ViT<T> vit(pc.vit, pc.seed);
  auto set = synth::make_set<T>(synth::Family::A, pc.images, pc.vit.image_size, derive_seed(pc.seed, 1));
  LinearHead<T> head(pc.vit.dim, synth::kClasses, derive_seed(pc.seed, 2));
  NamedParams<T> params = vit.named_parameters();
  params.emplace_back("head.weight", head.weight);
  params.emplace_back("head.bias", head.bias);
  AdamWConfig oc;
  oc.lr = pc.lr;
  AdamState st;
  for (std::size_t epoch = 1; epoch <= pc.epochs; ++epoch) {
    Rng order_rng(derive_seed(pc.seed, 1000 + epoch));
    auto order = order_rng.permutation(set.size());
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < order.size(); b += pc.batch_size) {
      std::vector<Tensor<T>> ims;
      std::vector<int> y;
      for (std::size_t i = b; i < std::min(order.size(), b + pc.batch_size); ++i) {
        ims.push_back(set.images[order[i]]);
        y.push_back(set.labels[order[i]]);
      }
      Tensor<T> loss = cross_entropy(classify(head, vit.encode(ims)), y);
      check_finite_loss(loss, pc.seed, epoch, steps);
      loss.backward();
      adamw_step(params, st, oc);
      zero_grads(params);
      loss_sum += double(loss.item());
      ++steps;
    }
    if (hooks.on_epoch) hooks.on_epoch(pc.seed, epoch, loss_sum / double(steps), 0.0);
  }
  vit.set_trainable(false);
  return vit;
}

}  // namespace pathadapt
