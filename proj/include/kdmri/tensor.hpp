#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "kdmri/errors.hpp"

namespace kdmri {

// Dense row-major H x W grid. With a complex element type this is the
// "column stacked vector of complex valued MR image" viewed as a 2-D array;
// with a real element type it holds targets, network activations, attention
// maps and residues.
template <class T>
struct Grid2D {
  int h = 0, w = 0;
  std::vector<T> v;

  Grid2D() = default;
  Grid2D(int h_, int w_, T fill = T()) : h(h_), w(w_) {
    if (h_ < 1 || w_ < 1) throw InvalidInputError("Grid2D: dimensions must be >= 1");
    v.assign(static_cast<size_t>(h_) * w_, fill);
  }

  T& operator()(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
  const T& operator()(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }

  size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
  bool same_shape(const Grid2D& o) const { return h == o.h && w == o.w; }
};

template <class T>
using ComplexGrid = Grid2D<std::complex<T>>;

// C x H x W activation block, channel-major.
template <class T>
struct FeatureMap {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;

  FeatureMap() = default;
  FeatureMap(int c_, int h_, int w_, T fill = T()) : c(c_), h(h_), w(w_) {
    if (c_ < 1 || h_ < 1 || w_ < 1)
      throw InvalidInputError("FeatureMap: dimensions must be >= 1");
    v.assign(static_cast<size_t>(c_) * h_ * w_, fill);
  }

  size_t plane() const { return static_cast<size_t>(h) * w; }
  size_t size() const { return v.size(); }
  T* channel(int i) { return v.data() + static_cast<size_t>(i) * plane(); }
  const T* channel(int i) const { return v.data() + static_cast<size_t>(i) * plane(); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
  bool same_shape(const FeatureMap& o) const { return c == o.c && h == o.h && w == o.w; }
  bool same_plane(const FeatureMap& o) const { return h == o.h && w == o.w; }
};

namespace num {

template <class T>
inline bool finite(T x) {
  return std::isfinite(static_cast<double>(x));
}
template <class T>
inline bool finite(std::complex<T> x) {
  return std::isfinite(static_cast<double>(x.real())) &&
         std::isfinite(static_cast<double>(x.imag()));
}

template <class C>
inline bool all_finite(const C& c) {
  for (const auto& x : c.v)
    if (!finite(x)) return false;
  return true;
}

template <class T>
inline double abs2(T x) {
  return static_cast<double>(x) * static_cast<double>(x);
}
template <class T>
inline double abs2(std::complex<T> x) {
  return abs2(x.real()) + abs2(x.imag());
}

template <class C>
inline double l2_norm(const C& c) {
  double s = 0;
  for (const auto& x : c.v) s += abs2(x);
  return std::sqrt(s);
}

template <class C>
inline double max_abs_diff(const C& a, const C& b) {
  double m = 0;
  for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::sqrt(abs2(a.v[i] - b.v[i])));
  return m;
}

// Mean of squared elementwise differences, accumulated in double.
template <class C>
inline double mse(const C& a, const C& b) {
  double s = 0;
  for (size_t i = 0; i < a.v.size(); ++i) s += abs2(a.v[i] - b.v[i]);
  return s / static_cast<double>(a.v.size());
}

}  // namespace num

template <class T>
inline Grid2D<T> real_part(const ComplexGrid<T>& g) {
  Grid2D<T> r(g.h, g.w);
  for (size_t i = 0; i < g.size(); ++i) r.v[i] = g.v[i].real();
  return r;
}

template <class T>
inline ComplexGrid<T> to_complex(const Grid2D<T>& g) {
  ComplexGrid<T> r(g.h, g.w);
  for (size_t i = 0; i < g.size(); ++i) r.v[i] = std::complex<T>(g.v[i], T(0));
  return r;
}

template <class From, class To>
inline Grid2D<To> cast_grid(const Grid2D<From>& g) {
  Grid2D<To> r(g.h, g.w);
  for (size_t i = 0; i < g.size(); ++i) r.v[i] = static_cast<To>(g.v[i]);
  return r;
}

// FNV-1a over raw bytes; used for config and parameter fingerprints.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace kdmri
