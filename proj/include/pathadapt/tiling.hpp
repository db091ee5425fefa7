#pragma once

// Whole-slide tiling: a coarse saturation-based tissue mask, grid-aligned
// non-overlapping patch selection, and a synthetic slide generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathadapt/random.hpp"

namespace pathadapt {

inline constexpr std::size_t kMaskScale = 32;

// Out-of-core access: fills `out` with the RGB bytes of the requested region.
using TileReader = std::function<void(std::size_t x, std::size_t y, std::size_t w, std::size_t h,
                                      std::uint8_t* out)>;

struct SlideRaster {
  std::string slide_id;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // RGB, row-major; empty when `reader` is set
  double mpp = 0.5;
  TileReader reader;

  bool in_core() const { return !reader; }

  void validate() const {
    if (in_core() && pixels.size() != width * height * 3)
      throw std::invalid_argument("slide '" + slide_id + "': buffer holds " +
                                  std::to_string(pixels.size()) + " bytes, expected " +
                                  std::to_string(width * height * 3));
  }

  // RGB bytes of a region clipped to the slide.
  std::vector<std::uint8_t> read(std::size_t x, std::size_t y, std::size_t w, std::size_t h) const {
    if (x + w > width || y + h > height)
      throw std::out_of_range("slide '" + slide_id + "': region outside the slide");
    std::vector<std::uint8_t> out(w * h * 3);
    if (reader) {
      reader(x, y, w, h, out.data());
      return out;
    }
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(pixels.data() + ((y + r) * width + x) * 3, w * 3, out.data() + r * w * 3);
    return out;
  }
};

struct PatchRecord {
  std::string slide_id;
  int grid_row = 0;
  int grid_col = 0;
  std::size_t x = 0;
  std::size_t y = 0;
  float tissue_fraction = 0.0f;

  bool operator==(const PatchRecord&) const = default;
};

inline nlohmann::json to_json(const PatchRecord& r) {
  return {{"slide_id", r.slide_id}, {"grid_row", r.grid_row}, {"grid_col", r.grid_col},
          {"x", r.x},               {"y", r.y},               {"tissue_fraction", r.tissue_fraction}};
}

inline PatchRecord patch_record_from_json(const nlohmann::json& j) {
  PatchRecord r;
  r.slide_id = j.at("slide_id").get<std::string>();
  r.grid_row = j.at("grid_row").get<int>();
  r.grid_col = j.at("grid_col").get<int>();
  r.x = j.at("x").get<std::size_t>();
  r.y = j.at("y").get<std::size_t>();
  r.tissue_fraction = j.at("tissue_fraction").get<float>();
  return r;
}

// HSV saturation on the 0..255 scale, integer arithmetic.
inline int saturation(int r, int g, int b) {
  const int mx = std::max({r, g, b}), mn = std::min({r, g, b});
  return mx == 0 ? 0 : (mx - mn) * 255 / mx;
}

struct TissueMask {
  std::size_t width = 0;   // cells
  std::size_t height = 0;  // cells
  std::vector<std::uint8_t> fg;

  bool at(std::size_t r, std::size_t c) const { return fg[r * width + c] != 0; }
  std::size_t count() const { return std::size_t(std::count(fg.begin(), fg.end(), 1)); }
};

// One cell per 32x32 block (partial blocks at the border included). A cell's
// colour is the integer mean of its block; it is foreground iff the 3x3
// median (edge-replicated) of cell saturations exceeds the threshold.
inline TissueMask foreground_mask(const SlideRaster& slide, int sat_threshold = 15) {
  slide.validate();
  TissueMask m;
  m.width = (slide.width + kMaskScale - 1) / kMaskScale;
  m.height = (slide.height + kMaskScale - 1) / kMaskScale;
  std::vector<int> sat(m.width * m.height, 0);
  for (std::size_t cy = 0; cy < m.height; ++cy) {
    const std::size_t y0 = cy * kMaskScale, h = std::min(kMaskScale, slide.height - y0);
    // One strip read per cell row keeps out-of-core readers efficient.
    const auto strip = slide.read(0, y0, slide.width, h);
    for (std::size_t cx = 0; cx < m.width; ++cx) {
      const std::size_t x0 = cx * kMaskScale, w = std::min(kMaskScale, slide.width - x0);
      std::array<std::uint64_t, 3> acc{0, 0, 0};
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
          for (std::size_t k = 0; k < 3; ++k) acc[k] += strip[(r * slide.width + x0 + c) * 3 + k];
      const std::uint64_t n = w * h;
      sat[cy * m.width + cx] = saturation(int(acc[0] / n), int(acc[1] / n), int(acc[2] / n));
    }
  }
  m.fg.assign(sat.size(), 0);
  for (std::size_t cy = 0; cy < m.height; ++cy)
    for (std::size_t cx = 0; cx < m.width; ++cx) {
      std::array<int, 9> win;
      std::size_t i = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = std::size_t(std::clamp<long>(long(cy) + dy, 0, long(m.height) - 1));
          const auto xx = std::size_t(std::clamp<long>(long(cx) + dx, 0, long(m.width) - 1));
          win[i++] = sat[yy * m.width + xx];
        }
      std::nth_element(win.begin(), win.begin() + 4, win.end());
      m.fg[cy * m.width + cx] = win[4] > sat_threshold;
    }
  return m;
}

struct TileOptions {
  std::size_t patch_px = 256;
  float min_tissue = 0.25f;
  int sat_threshold = 15;

  void validate() const {
    if (patch_px < 32) throw std::invalid_argument("tile: patch size " + std::to_string(patch_px) + " < 32");
    if (!(min_tissue >= 0.0f && min_tissue <= 1.0f))
      throw std::invalid_argument("tile: min_tissue must lie in [0, 1]");
  }
};

// Fraction of patch pixels whose mask cell is foreground, from integer
// cell-overlap areas so it matches per-pixel counting exactly.
inline float tissue_fraction(const TissueMask& m, std::size_t x, std::size_t y, std::size_t patch) {
  if (patch == 0) return 0.0f;
  std::uint64_t fg = 0;
  const std::size_t r1 = std::min((y + patch - 1) / kMaskScale + 1, m.height);
  const std::size_t c1 = std::min((x + patch - 1) / kMaskScale + 1, m.width);
  for (std::size_t r = y / kMaskScale; r < r1; ++r) {
    const std::size_t h = std::min((r + 1) * kMaskScale, y + patch) - std::max(r * kMaskScale, y);
    for (std::size_t c = x / kMaskScale; c < c1; ++c)
      if (m.at(r, c)) fg += h * (std::min((c + 1) * kMaskScale, x + patch) - std::max(c * kMaskScale, x));
  }
  return float(double(fg) / double(std::uint64_t(patch) * patch));
}

// Grid-aligned patches with tissue_fraction >= min_tissue, row-major.
inline std::vector<PatchRecord> tile(const SlideRaster& slide, const TileOptions& opt = {},
                                     const TissueMask* precomputed = nullptr) {
  opt.validate();
  const TissueMask mask = precomputed ? *precomputed : foreground_mask(slide, opt.sat_threshold);
  const std::size_t rows = slide.height / opt.patch_px, cols = slide.width / opt.patch_px;
  std::vector<PatchRecord> out;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t x = c * opt.patch_px, y = r * opt.patch_px;
      const float f = tissue_fraction(mask, x, y, opt.patch_px);
      if (f >= opt.min_tissue) out.push_back({slide.slide_id, int(r), int(c), x, y, f});
    }
  return out;
}

struct SynthStyle {
  // 0 draws flat blobs; otherwise blobs carry dark stripes with this period.
  std::size_t stripe_period = 0;
  bool purple = false;  // palette of every blob; random per blob when false
  bool random_palette = true;
};

struct SynthSlide {
  SlideRaster slide;
  std::vector<std::uint8_t> mask;  // per pixel, 1 inside a blob

  struct Ellipse {
    double cx, cy, a, b, theta;
  };
  std::vector<Ellipse> blobs;
};

inline bool inside_ellipse(const SynthSlide::Ellipse& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double u = dx * std::cos(e.theta) + dy * std::sin(e.theta);
  const double v = -dx * std::sin(e.theta) + dy * std::cos(e.theta);
  return (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0;
}

// Pink or purple elliptical blobs fully inside a white square slide.
inline SynthSlide synth_slide(std::uint64_t seed, std::size_t n_blobs, std::size_t size,
                              const SynthStyle& style = {}) {
  if (size < 256) throw std::invalid_argument("synth_slide: size must be >= 256");
  Rng rng(seed);
  SynthSlide s;
  s.slide.slide_id = "synth-" + std::to_string(seed);
  s.slide.width = s.slide.height = size;
  s.slide.pixels.assign(size * size * 3, 255);
  s.mask.assign(size * size, 0);
  const double sz = double(size);
  for (std::size_t i = 0; i < n_blobs; ++i) {
    SynthSlide::Ellipse e;
    e.a = rng.uniform(sz / 16, sz / 5);
    e.b = rng.uniform(sz / 16, sz / 5);
    e.theta = rng.uniform(0.0, std::numbers::pi);
    const double r = std::max(e.a, e.b) + 1;
    e.cx = rng.uniform(r, sz - r);
    e.cy = rng.uniform(r, sz - r);
    const bool purple = style.random_palette ? rng.uniform() < 0.5 : style.purple;
    const std::array<int, 3> base = purple ? std::array<int, 3>{125, 70, 165}
                                           : std::array<int, 3>{235, 150, 200};
    const std::uint64_t tex_seed = rng.next_u64();
    Rng tex(tex_seed);
    s.blobs.push_back(e);
    const auto y0 = std::size_t(std::max(0.0, std::floor(e.cy - r)));
    const auto y1 = std::size_t(std::min(sz, std::ceil(e.cy + r)));
    const auto x0 = std::size_t(std::max(0.0, std::floor(e.cx - r)));
    const auto x1 = std::size_t(std::min(sz, std::ceil(e.cx + r)));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) {
        if (!inside_ellipse(e, double(x) + 0.5, double(y) + 0.5)) continue;
        s.mask[y * size + x] = 1;
        const int jitter = int(tex.below(21)) - 10;
        const bool stripe = style.stripe_period && ((x + y) / style.stripe_period) % 2 == 0;
        for (std::size_t k = 0; k < 3; ++k) {
          int v = base[k] + jitter - (stripe ? 60 : 0);
          s.slide.pixels[(y * size + x) * 3 + k] = std::uint8_t(std::clamp(v, 0, 255));
        }
      }
  }
  return s;
}

// Slide for bag-level labels: flat blobs everywhere, plus one striped blob
// painted over them on positive slides. `mask` marks the striped blob.
inline SynthSlide synth_mil_slide(std::uint64_t seed, bool positive, std::size_t size = 256,
                                  std::size_t n_blobs = 3, std::size_t stripe_period = 4) {
  SynthSlide s = synth_slide(derive_seed(seed, 1), n_blobs, size);
  s.slide.slide_id = (positive ? "pos-" : "neg-") + std::to_string(seed);
  std::fill(s.mask.begin(), s.mask.end(), 0);
  if (!positive) return s;
  SynthStyle st;
  st.stripe_period = stripe_period;
  const SynthSlide lesion = synth_slide(derive_seed(seed, 2), 1, size, st);
  for (std::size_t i = 0; i < lesion.mask.size(); ++i)
    if (lesion.mask[i]) {
      s.mask[i] = 1;
      std::copy_n(lesion.slide.pixels.data() + i * 3, 3, s.slide.pixels.data() + i * 3);
    }
  s.blobs.push_back(lesion.blobs[0]);
  return s;
}

}  // namespace pathadapt
