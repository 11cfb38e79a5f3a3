#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kdmri/errors.hpp"
#include "kdmri/tensor.hpp"

namespace kdmri {

namespace detail {

inline void push_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

inline void write_chunk(std::ofstream& f, const char type[4],
                        const std::vector<uint8_t>& data) {
  std::vector<uint8_t> head;
  push_be32(head, static_cast<uint32_t>(data.size()));
  f.write(reinterpret_cast<const char*>(head.data()), 4);
  f.write(type, 4);
  if (!data.empty()) f.write(reinterpret_cast<const char*>(data.data()),
                             static_cast<std::streamsize>(data.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  std::vector<uint8_t> tail;
  push_be32(tail, static_cast<uint32_t>(crc));
  f.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace detail

// Minimal 8-bit grayscale PNG writer (zlib deflate, filter 0 per scanline).
inline void write_png_gray8(const std::string& path, const Grid2D<uint8_t>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("png: cannot write " + path);
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<uint8_t> ihdr;
  detail::push_be32(ihdr, static_cast<uint32_t>(img.w));
  detail::push_be32(ihdr, static_cast<uint32_t>(img.h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // no interlace
  detail::write_chunk(f, "IHDR", ihdr);

  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(img.h) * (img.w + 1));
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);  // filter type 0
    for (int x = 0; x < img.w; ++x) raw.push_back(img(y, x));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> idat(bound);
  if (compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw DataError("png: zlib compression failed");
  idat.resize(bound);
  detail::write_chunk(f, "IDAT", idat);
  detail::write_chunk(f, "IEND", {});
  if (!f) throw DataError("png: write failed for " + path);
}

// Normalize to [0, 255] over the given range (lo == hi falls back to black).
template <class T>
Grid2D<uint8_t> to_gray8(const Grid2D<T>& g, double lo, double hi) {
  Grid2D<uint8_t> out(g.h, g.w);
  const double span = hi - lo;
  for (size_t i = 0; i < g.size(); ++i) {
    double x = span > 0 ? (static_cast<double>(g.v[i]) - lo) / span : 0.0;
    out.v[i] = static_cast<uint8_t>(std::clamp(x, 0.0, 1.0) * 255.0 + 0.5);
  }
  return out;
}

template <class T>
Grid2D<uint8_t> to_gray8(const Grid2D<T>& g) {
  double lo = static_cast<double>(g.v[0]), hi = lo;
  for (auto x : g.v) {
    lo = std::min(lo, static_cast<double>(x));
    hi = std::max(hi, static_cast<double>(x));
  }
  return to_gray8(g, lo, hi);
}

// Horizontal montage with a 2-pixel separator, for qualitative dumps.
inline Grid2D<uint8_t> montage_row(const std::vector<Grid2D<uint8_t>>& tiles, uint8_t gap = 255) {
  if (tiles.empty()) throw InvalidInputError("montage: no tiles");
  const int h = tiles[0].h;
  int w = -2;
  for (const auto& t : tiles) {
    if (t.h != h) throw InvalidInputError("montage: tile heights differ");
    w += t.w + 2;
  }
  Grid2D<uint8_t> out(h, w, gap);
  int x0 = 0;
  for (const auto& t : tiles) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < t.w; ++x) out(y, x0 + x) = t(y, x);
    x0 += t.w + 2;
  }
  return out;
}

}  // namespace kdmri
