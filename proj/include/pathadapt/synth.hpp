#pragma once

// Synthetic image families for desk-scale experiments.
//
// Family A (pretraining): sinusoidal gratings labelled by orientation, with
// frequency, phase and colour as nuisances.
// Family B (downstream): a shifted family on a stain-like palette whose label
// is the grating frequency band; orientation is a nuisance. A backbone that
// learned orientation from family A has to be re-tuned to read frequency.

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pathadapt/random.hpp"
#include "pathadapt/tensor.hpp"

namespace pathadapt::synth {

template <class T>
struct ImageSet {
  std::vector<Tensor<T>> images;  // [C x H x W], values roughly in [0, 1]
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
};

template <class T>
struct SplitData {
  std::vector<std::string> class_names;
  ImageSet<T> train, val, test;
};

enum class Family { A, B };

struct Grating {
  double theta = 0.0;  // radians
  double freq = 0.1;   // cycles per pixel
  double phase = 0.0;
  std::array<double, 3> lo{0, 0, 0};
  std::array<double, 3> hi{1, 1, 1};
};

template <class T>
Tensor<T> render(const Grating& g, std::size_t size, Rng& rng, double noise) {
  Tensor<T> im({3, size, size});
  const double c = std::cos(g.theta), s = std::sin(g.theta);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * g.freq * (x * c + y * s) + g.phase);
      for (std::size_t ch = 0; ch < 3; ++ch)
        im[(ch * size + y) * size + x] =
            static_cast<T>(g.lo[ch] + (g.hi[ch] - g.lo[ch]) * u + rng.normal(0.0, noise));
    }
  return im;
}

inline constexpr std::size_t kClasses = 4;

inline const std::vector<std::string>& class_names(Family f) {
  static const std::vector<std::string> a{"horizontal", "diagonal", "vertical", "antidiagonal"};
  static const std::vector<std::string> b{"coarse", "medium", "fine", "very fine"};
  return f == Family::A ? a : b;
}

inline Grating sample_grating(Family f, int label, Rng& rng) {
  Grating g;
  g.phase = rng.uniform(0.0, 2 * std::numbers::pi);
  if (f == Family::A) {
    g.theta = label * std::numbers::pi / 4 + rng.uniform(-0.15, 0.15);
    g.freq = rng.uniform(0.08, 0.3);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      g.lo[ch] = rng.uniform(0.0, 0.4);
      g.hi[ch] = rng.uniform(0.6, 1.0);
    }
  } else {
    static constexpr std::array<double, 4> bands{0.07, 0.12, 0.18, 0.25};
    g.theta = rng.uniform(0.0, std::numbers::pi);
    g.freq = bands[label] * rng.uniform(0.93, 1.07);
    // Eosin-like light pink to haematoxylin-like purple.
    const std::array<double, 3> pink{0.93, 0.62, 0.78}, purple{0.45, 0.25, 0.62};
    const double shade = rng.uniform(-0.08, 0.08);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      g.lo[ch] = purple[ch] + shade;
      g.hi[ch] = pink[ch] + shade;
    }
  }
  return g;
}

// Balanced sets: sample i has label i % 4, then the order is shuffled.
template <class T>
ImageSet<T> make_set(Family f, std::size_t n, std::size_t size, std::uint64_t seed, double noise = 0.05) {
  Rng rng(seed);
  ImageSet<T> s;
  for (std::size_t i = 0; i < n; ++i) s.labels.push_back(int(i % kClasses));
  rng.shuffle(s.labels.begin(), s.labels.end());
  for (int y : s.labels) s.images.push_back(render<T>(sample_grating(f, y, rng), size, rng, noise));
  return s;
}

template <class T>
SplitData<T> make_splits(Family f, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                         std::size_t size, std::uint64_t seed) {
  SplitData<T> d;
  d.class_names = class_names(f);
  d.train = make_set<T>(f, n_train, size, derive_seed(seed, 1));
  d.val = make_set<T>(f, n_val, size, derive_seed(seed, 2));
  d.test = make_set<T>(f, n_test, size, derive_seed(seed, 3));
  return d;
}

template <class T>
struct SegSet {
  std::vector<Tensor<T>> images;
  std::vector<std::vector<int>> masks;  // per pixel, 1 inside the lesion
};

// Fine family-B grating lesion (an ellipse) on a coarse family-B background.
template <class T>
SegSet<T> make_seg_set(std::size_t n, std::size_t size, std::uint64_t seed, double noise = 0.05) {
  Rng rng(seed);
  SegSet<T> s;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<T> bg = render<T>(sample_grating(Family::B, 0, rng), size, rng, noise);
    const Tensor<T> fg = render<T>(sample_grating(Family::B, 3, rng), size, rng, noise);
    const double sz = double(size);
    const double a = rng.uniform(sz / 6, sz / 3), b = rng.uniform(sz / 6, sz / 3);
    const double cx = rng.uniform(a, sz - a), cy = rng.uniform(b, sz - b);
    Tensor<T> im = bg.detach();
    std::vector<int> mask(size * size, 0);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double u = (x + 0.5 - cx) / a, v = (y + 0.5 - cy) / b;
        if (u * u + v * v > 1.0) continue;
        mask[y * size + x] = 1;
        for (std::size_t ch = 0; ch < 3; ++ch) im[(ch * size + y) * size + x] = fg[(ch * size + y) * size + x];
      }
    s.images.push_back(im);
    s.masks.push_back(std::move(mask));
  }
  return s;
}

}  // namespace pathadapt::synth
