#pragma once

// Per-pixel reference for tiling: every pixel looks up its own 32x32 block,
// recomputes that block's mean colour and the median over neighbouring
// blocks, and each patch counts its foreground pixels one at a time.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "pathadapt/tiling.hpp"

namespace pathadapt::testing {

inline int oracle_block_saturation(const SlideRaster& s, long bx, long by) {
  const long nbx = long((s.width + 31) / 32), nby = long((s.height + 31) / 32);
  bx = std::clamp(bx, 0L, nbx - 1);
  by = std::clamp(by, 0L, nby - 1);
  std::uint64_t sum[3] = {0, 0, 0}, n = 0;
  for (std::size_t y = std::size_t(by) * 32; y < std::min<std::size_t>(s.height, std::size_t(by) * 32 + 32); ++y)
    for (std::size_t x = std::size_t(bx) * 32; x < std::min<std::size_t>(s.width, std::size_t(bx) * 32 + 32); ++x) {
      for (int k = 0; k < 3; ++k) sum[k] += s.pixels[(y * s.width + x) * 3 + k];
      ++n;
    }
  const int r = int(sum[0] / n), g = int(sum[1] / n), b = int(sum[2] / n);
  const int mx = std::max({r, g, b}), mn = std::min({r, g, b});
  return mx ? (mx - mn) * 255 / mx : 0;
}

inline std::vector<std::uint8_t> oracle_block_mask(const SlideRaster& s, int thr) {
  const long nbx = long((s.width + 31) / 32), nby = long((s.height + 31) / 32);
  std::vector<std::uint8_t> m(std::size_t(nbx * nby));
  for (long by = 0; by < nby; ++by)
    for (long bx = 0; bx < nbx; ++bx) {
      std::vector<int> w;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) w.push_back(oracle_block_saturation(s, bx + dx, by + dy));
      std::sort(w.begin(), w.end());
      m[std::size_t(by * nbx + bx)] = w[4] > thr;
    }
  return m;
}

struct OraclePatch {
  std::size_t row, col;
  double fraction;
};

inline std::vector<OraclePatch> oracle_tile(const SlideRaster& s, std::size_t patch, double min_tissue, int thr) {
  const auto m = oracle_block_mask(s, thr);
  const std::size_t nbx = (s.width + 31) / 32;
  std::vector<OraclePatch> kept;
  for (std::size_t r = 0; (r + 1) * patch <= s.height; ++r)
    for (std::size_t c = 0; (c + 1) * patch <= s.width; ++c) {
      std::uint64_t fg = 0;
      for (std::size_t y = r * patch; y < (r + 1) * patch; ++y)
        for (std::size_t x = c * patch; x < (c + 1) * patch; ++x) fg += m[(y / 32) * nbx + x / 32];
      const double f = double(fg) / double(patch * patch);
      if (float(f) >= float(min_tissue)) kept.push_back({r, c, f});
    }
  return kept;
}

}  // namespace pathadapt::testing
