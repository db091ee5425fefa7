#pragma once

// Evaluation protocol: balanced accuracy, one-vs-rest macro AUC, weighted F1,
// precision/recall, error reduction rate and seed-wise normal 95% intervals.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace pathadapt::metrics {

namespace detail {
inline void check_inputs(const std::vector<int>& preds, const std::vector<int>& labels,
                         std::size_t classes, const char* who) {
  if (labels.empty()) throw std::invalid_argument(std::string(who) + ": empty input");
  if (preds.size() != labels.size())
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(preds.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= classes)
      throw std::out_of_range(std::string(who) + ": label " + std::to_string(labels[i]) +
                              " outside [0, " + std::to_string(classes) + ")");
    if (preds[i] < 0 || std::size_t(preds[i]) >= classes)
      throw std::out_of_range(std::string(who) + ": prediction " + std::to_string(preds[i]) +
                              " outside [0, " + std::to_string(classes) + ")");
  }
}
}  // namespace detail

// confusion[true][pred]
inline std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<int>& preds,
                                                              const std::vector<int>& labels,
                                                              std::size_t classes) {
  detail::check_inputs(preds, labels, classes, "confusion_matrix");
  std::vector<std::vector<std::size_t>> m(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) ++m[labels[i]][preds[i]];
  return m;
}

// Mean per-class recall over classes present in `labels`.
inline double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                                std::size_t classes) {
  const auto m = confusion_matrix(preds, labels, classes);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t support = std::accumulate(m[c].begin(), m[c].end(), std::size_t{0});
    if (support == 0) continue;
    sum += double(m[c][c]) / double(support);
    ++present;
  }
  return sum / double(present);
}

struct ClassStats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

// Undefined ratios (no predictions / no support) count as 0.
inline std::vector<ClassStats> per_class_stats(const std::vector<int>& preds,
                                               const std::vector<int>& labels,
                                               std::size_t classes) {
  const auto m = confusion_matrix(preds, labels, classes);
  std::vector<ClassStats> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = m[c][c], fn = 0, fp = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (j == c) continue;
      fn += m[c][j];
      fp += m[j][c];
    }
    auto& s = out[c];
    s.support = tp + fn;
    s.precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    s.recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    s.f1 = 2 * tp + fp + fn ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 0.0;
  }
  return out;
}

// Support-weighted mean of per-class F1.
inline double weighted_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                          std::size_t classes) {
  const auto stats = per_class_stats(preds, labels, classes);
  double acc = 0.0;
  for (const auto& s : stats) acc += s.f1 * double(s.support);
  return acc / double(labels.size());
}

inline double macro_precision(const std::vector<int>& preds, const std::vector<int>& labels,
                              std::size_t classes) {
  const auto stats = per_class_stats(preds, labels, classes);
  double acc = 0.0;
  for (const auto& s : stats) acc += s.precision;
  return acc / double(classes);
}

inline double macro_recall(const std::vector<int>& preds, const std::vector<int>& labels,
                           std::size_t classes) {
  const auto stats = per_class_stats(preds, labels, classes);
  double acc = 0.0;
  for (const auto& s : stats) acc += s.recall;
  return acc / double(classes);
}

// Binary ROC AUC by the Mann-Whitney rank statistic; tied scores get average
// ranks, which counts each tied positive/negative pair as 0.5.
inline double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) {
      pos += 1;
      rank_sum += rank[i];
    }
  const double neg = double(n) - pos;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

// scores: row-major [n x classes]. One-vs-rest AUC per class, averaged over
// the classes that have both positives and negatives.
inline double macro_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                        std::size_t classes) {
  if (labels.empty()) throw std::invalid_argument("macro_auc: empty input");
  if (scores.size() != labels.size() * classes)
    throw std::invalid_argument("macro_auc: score matrix has " + std::to_string(scores.size()) +
                                " entries, expected " + std::to_string(labels.size()) + " x " +
                                std::to_string(classes));
  double acc = 0.0;
  std::size_t used = 0;
  std::vector<double> col(labels.size());
  std::vector<bool> pos(labels.size());
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t npos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores[i * classes + c];
      pos[i] = labels[i] == int(c);
      npos += pos[i];
    }
    if (npos == 0 || npos == labels.size()) continue;
    acc += binary_auc(col, pos);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("macro_auc: no class has both positives and negatives");
  return acc / double(used);
}

inline double error_reduction_rate(double err_disabled, double err_enabled) {
  if (!(err_disabled > 0.0))
    throw std::domain_error("error_reduction_rate: baseline error must be > 0");
  return (err_disabled - err_enabled) / err_disabled;
}

// Unweighted mean of per-task ERRs, each pair {baseline error, adapted error}.
inline double mean_error_reduction(const std::vector<std::pair<double, double>>& tasks) {
  if (tasks.empty()) throw std::invalid_argument("mean_error_reduction: no tasks");
  double acc = 0.0;
  for (const auto& [d, e] : tasks) acc += error_reduction_rate(d, e);
  return acc / double(tasks.size());
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

// mean +/- 1.96 * s / sqrt(n), s the sample standard deviation.
inline Interval ci95(const std::vector<double>& values) {
  if (values.size() < 2) throw std::invalid_argument("ci95: need at least 2 values");
  const double m = mean_of(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / double(values.size() - 1));
  const double half = 1.96 * sd / std::sqrt(double(values.size()));
  return {m - half, m + half};
}

// Metric names in report order.
inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"balanced_accuracy", "macro_auc", "weighted_f1",
                                              "balanced_error", "macro_precision",
                                              "macro_recall", "dice"};
  return names;
}

// Per-seed metric values plus their summaries. Metrics that a task does not
// produce are simply absent.
struct MetricsReport {
  std::string task;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> per_seed;

  void add_seed(std::uint64_t seed, const std::map<std::string, double>& values) {
    seeds.push_back(seed);
    for (const auto& [k, v] : values) per_seed[k].push_back(v);
  }

  bool has(const std::string& metric) const { return per_seed.count(metric) != 0; }

  double mean(const std::string& metric) const { return mean_of(per_seed.at(metric)); }

  // Degenerates to (mean, mean) with a single seed.
  Interval interval(const std::string& metric) const {
    const auto& v = per_seed.at(metric);
    if (v.size() < 2) return {mean_of(v), mean_of(v)};
    return ci95(v);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["task"] = task;
    j["seeds"] = seeds;
    for (const auto& [name, vals] : per_seed) {
      const auto ci = interval(name);
      j["metrics"][name] = {{"per_seed", vals}, {"mean", mean(name)}, {"ci95", {ci.lo, ci.hi}}};
    }
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.task = j.at("task").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& [name, m] : j.at("metrics").items())
      r.per_seed[name] = m.at("per_seed").get<std::vector<double>>();
    return r;
  }

  // Three-column table: balanced accuracy / ROC AUC / weighted F1, each as
  // "mean (lo-hi)" in percent.
  std::string table(const std::string& row_label) const {
    auto cell = [&](const std::string& m) {
      if (!has(m)) return std::string("-");
      std::ostringstream os;
      const auto ci = interval(m);
      os << std::fixed << std::setprecision(2) << 100 * mean(m) << " (" << 100 * ci.lo << "-"
         << 100 * ci.hi << ")";
      return os.str();
    };
    std::ostringstream os;
    os << std::left << std::setw(24) << "" << std::setw(24) << "Balanced accuracy" << std::setw(24)
       << "ROC AUC" << std::setw(24) << "Weighted F1" << '\n';
    os << std::setw(24) << row_label << std::setw(24) << cell("balanced_accuracy") << std::setw(24)
       << cell("macro_auc") << std::setw(24) << cell("weighted_f1") << '\n';
    return os.str();
  }
};

}  // namespace pathadapt::metrics
