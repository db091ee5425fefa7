#pragma once

// Brute-force reference metrics written independently of the library: set
// and pair counting rather than confusion matrices or rank statistics.

#include <cstddef>
#include <set>
#include <vector>

namespace pathadapt::testing {

inline double oracle_balanced_accuracy(const std::vector<int>& p, const std::vector<int>& y, int classes) {
  double sum = 0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    int hit = 0, tot = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == c) {
        ++tot;
        hit += p[i] == c;
      }
    if (tot) {
      sum += double(hit) / tot;
      ++present;
    }
  }
  return sum / present;
}

// Every positive/negative pair: 1 if ordered correctly, 0.5 if tied.
inline double oracle_pair_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        pairs += 1;
        good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return good / pairs;
}

inline double oracle_macro_auc(const std::vector<double>& scores, const std::vector<int>& y, int classes) {
  double sum = 0;
  int used = 0;
  for (int c = 0; c < classes; ++c) {
    std::vector<double> s;
    std::vector<bool> pos;
    for (std::size_t i = 0; i < y.size(); ++i) {
      s.push_back(scores[i * classes + c]);
      pos.push_back(y[i] == c);
    }
    int np = 0;
    for (bool b : pos) np += b;
    if (np == 0 || np == int(y.size())) continue;
    sum += oracle_pair_auc(s, pos);
    ++used;
  }
  return sum / used;
}

inline double oracle_weighted_f1(const std::vector<int>& p, const std::vector<int>& y, int classes) {
  double acc = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> P, Y;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (p[i] == c) P.insert(i);
      if (y[i] == c) Y.insert(i);
    }
    std::size_t inter = 0;
    for (auto i : P) inter += Y.count(i);
    const double prec = P.empty() ? 0.0 : double(inter) / P.size();
    const double rec = Y.empty() ? 0.0 : double(inter) / Y.size();
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    acc += f1 * Y.size();
  }
  return acc / y.size();
}

inline double oracle_dice(const std::vector<int>& a, const std::vector<int>& b, int classes) {
  double sum = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> X, Y;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] == c) X.insert(i);
      if (b[i] == c) Y.insert(i);
    }
    std::size_t inter = 0;
    for (auto i : X) inter += Y.count(i);
    sum += X.empty() && Y.empty() ? 1.0 : 2.0 * inter / double(X.size() + Y.size());
  }
  return sum / classes;
}

}  // namespace pathadapt::testing
