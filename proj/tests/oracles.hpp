// Independent reference implementations used as test oracles. These
// deliberately share no code with the library paths they check.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kdmri/tensor.hpp"

namespace oracles {

// SSIM by direct per-window double loops with explicit Gaussian weights
// (no separable filtering).
inline double ssim_reference(const kdmri::Grid2D<double>& x, const kdmri::Grid2D<double>& y,
                             int win, double sigma, double k1, double k2, double range) {
  const double c1 = (k1 * range) * (k1 * range);
  const double c2 = (k2 * range) * (k2 * range);
  const double c = (win - 1) / 2.0;
  std::vector<double> wgt(static_cast<size_t>(win) * win);
  double wsum = 0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double g = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * sigma * sigma));
      wgt[static_cast<size_t>(i) * win + j] = g;
      wsum += g;
    }
  for (auto& g : wgt) g /= wsum;

  double acc = 0;
  int count = 0;
  for (int y0 = 0; y0 + win <= x.h; ++y0)
    for (int x0 = 0; x0 + win <= x.w; ++x0) {
      double mx = 0, my = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double g = wgt[static_cast<size_t>(i) * win + j];
          mx += g * x(y0 + i, x0 + j);
          my += g * y(y0 + i, x0 + j);
        }
      double vx = 0, vy = 0, cov = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double g = wgt[static_cast<size_t>(i) * win + j];
          const double dx = x(y0 + i, x0 + j) - mx;
          const double dy = y(y0 + i, x0 + j) - my;
          vx += g * dx * dx;
          vy += g * dy * dy;
          cov += g * dx * dy;
        }
      acc += ((2 * mx * my + c1) * (2 * cov + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return acc / count;
}

// Exact two-sided Wilcoxon signed-rank p by brute-force enumeration of all
// 2^n sign assignments of the observed midranks.
inline double wilcoxon_enumeration_p(const std::vector<double>& a,
                                     const std::vector<double>& b) {
  std::vector<double> d;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  const int n = static_cast<int>(d.size());
  std::vector<double> abs_d(d.size());
  for (size_t i = 0; i < d.size(); ++i) abs_d[i] = std::abs(d[i]);
  std::vector<double> rank(d.size());
  for (size_t i = 0; i < d.size(); ++i) {
    int less = 0, equal = 0;
    for (size_t j = 0; j < d.size(); ++j) {
      if (abs_d[j] < abs_d[i]) ++less;
      if (abs_d[j] == abs_d[i]) ++equal;
    }
    rank[i] = less + (equal + 1) / 2.0;
  }
  double w_obs = 0;
  for (size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0) w_obs += rank[i];

  uint64_t le = 0, ge = 0;
  const uint64_t total = 1ull << n;
  for (uint64_t s = 0; s < total; ++s) {
    double w = 0;
    for (int i = 0; i < n; ++i)
      if (s & (1ull << i)) w += rank[static_cast<size_t>(i)];
    if (w <= w_obs + 1e-12) ++le;
    if (w >= w_obs - 1e-12) ++ge;
  }
  return std::min(1.0, 2.0 * std::min(le, ge) / static_cast<double>(total));
}

}  // namespace oracles
