#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdmri/errors.hpp"
#include "kdmri/kspace.hpp"
#include "kdmri/rng.hpp"
#include "kdmri/tensor.hpp"

namespace kdmri {

enum class Split { Train, Val };

inline std::string split_name(Split s) { return s == Split::Train ? "train" : "val"; }

// One ground-truth slice, intensities in [0, 1].
struct SliceRecord {
  std::string id;
  Grid2D<float> target;
  Split split = Split::Train;
};

struct DatasetManifest {
  std::string name;
  int height = 0, width = 0;
  int train_count = 0, val_count = 0;
  uint64_t seed = 0;
  std::string note;
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return {{"name", m.name},           {"height", m.height},
          {"width", m.width},         {"train_count", m.train_count},
          {"val_count", m.val_count}, {"seed", m.seed},
          {"note", m.note}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.train_count = j.at("train_count").get<int>();
  m.val_count = j.at("val_count").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.note = j.value("note", "");
  if (m.train_count < 1 || m.val_count < 1)
    throw DataError("manifest: each split needs at least one slice");
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic phantoms

// Deterministic composition of 3-8 random ellipses with piecewise-constant
// intensities over a mild smooth background, normalized per slice to [0, 1].
inline Grid2D<float> generate_phantom(int size, uint64_t seed) {
  if (size < 16) throw ConfigError("generate_phantom: size must be >= 16");
  Rng rng(seed);
  Grid2D<double> img(size, size, 0.0);

  // smooth background: two broad Gaussian bumps
  for (int bump = 0; bump < 2; ++bump) {
    const double cx = rng.uniform(0.2, 0.8) * size;
    const double cy = rng.uniform(0.2, 0.8) * size;
    const double s = rng.uniform(0.5, 1.0) * size;
    const double amp = rng.uniform(0.05, 0.15);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        img(y, x) += amp * std::exp(-d2 / (2 * s * s));
      }
  }

  const int n_ellipses = rng.uniform_int(3, 8);
  for (int e = 0; e < n_ellipses; ++e) {
    const double cx = rng.uniform(0.2, 0.8) * size;
    const double cy = rng.uniform(0.2, 0.8) * size;
    const double ax = rng.uniform(0.06, 0.35) * size;
    const double ay = rng.uniform(0.06, 0.35) * size;
    const double theta = rng.uniform(0.0, M_PI);
    const double value = rng.uniform(-0.8, 0.8);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * ct + dy * st) / ax;
        const double v = (-dx * st + dy * ct) / ay;
        if (u * u + v * v <= 1.0) img(y, x) += value;
      }
  }

  double lo = img.v[0], hi = img.v[0];
  for (double x : img.v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  Grid2D<float> out(size, size);
  const double range = hi - lo;
  for (size_t i = 0; i < img.size(); ++i)
    out.v[i] = range > 0 ? static_cast<float>((img.v[i] - lo) / range) : 0.0f;
  return out;
}

// count phantoms split 80/20 into train/val (at least one each).
inline std::vector<SliceRecord> generate_phantoms(int count, int size, uint64_t seed,
                                                  DatasetManifest* manifest = nullptr) {
  if (count < 1) throw ConfigError("generate_phantoms: count must be >= 1");
  const int train = std::max(1, count - std::max(1, count / 5));
  const int val = std::max(1, count - train);
  std::vector<SliceRecord> records;
  records.reserve(static_cast<size_t>(train + val));
  char buf[32];
  for (int i = 0; i < train + val; ++i) {
    SliceRecord r;
    r.split = i < train ? Split::Train : Split::Val;
    const int k = i < train ? i : i - train;
    std::snprintf(buf, sizeof buf, "%s_%04d", split_name(r.split).c_str(), k);
    r.id = buf;
    r.target = generate_phantom(size, mix_seed(seed, static_cast<uint64_t>(i)));
    records.push_back(std::move(r));
  }
  if (manifest) {
    manifest->name = "phantoms";
    manifest->height = size;
    manifest->width = size;
    manifest->train_count = train;
    manifest->val_count = val;
    manifest->seed = seed;
    manifest->note = "synthetic ellipse phantoms";
  }
  return records;
}

// ---------------------------------------------------------------------------
// Slice file format
//
// 16-byte header: magic "KDMR", u16 height, u16 width, u32 reserved, u32
// padding (zero), all little-endian, followed by height*width float32 values,
// row-major.

inline void save_slice(const std::string& path, const Grid2D<float>& g) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("slice: cannot write " + path);
  f.write("KDMR", 4);
  const uint16_t h = static_cast<uint16_t>(g.h), w = static_cast<uint16_t>(g.w);
  const uint32_t zero = 0;
  f.write(reinterpret_cast<const char*>(&h), 2);
  f.write(reinterpret_cast<const char*>(&w), 2);
  f.write(reinterpret_cast<const char*>(&zero), 4);  // reserved
  f.write(reinterpret_cast<const char*>(&zero), 4);  // pad to 16 bytes
  f.write(reinterpret_cast<const char*>(g.data()),
          static_cast<std::streamsize>(g.size() * sizeof(float)));
  if (!f) throw DataError("slice: write failed for " + path);
}

inline Grid2D<float> load_slice(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("slice: cannot read " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "KDMR", 4) != 0) throw DataError("slice: bad magic in " + path);
  uint16_t h = 0, w = 0;
  f.read(reinterpret_cast<char*>(&h), 2);
  f.read(reinterpret_cast<char*>(&w), 2);
  f.seekg(16);
  if (h == 0 || w == 0) throw DataError("slice: empty grid in " + path);
  Grid2D<float> g(h, w);
  f.read(reinterpret_cast<char*>(g.data()),
         static_cast<std::streamsize>(g.size() * sizeof(float)));
  if (!f) throw DataError("slice: truncated pixel data in " + path);
  return g;
}

inline void save_dataset(const std::string& dir, const DatasetManifest& manifest,
                         const std::vector<SliceRecord>& records) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw DataError("dataset: cannot write manifest in " + dir);
  mf << manifest_to_json(manifest).dump(2) << "\n";
  for (const auto& r : records) save_slice((fs::path(dir) / (r.id + ".kdmr")).string(), r.target);
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<SliceRecord> records;

  std::vector<const SliceRecord*> split(Split s) const {
    std::vector<const SliceRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
};

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw DataError("dataset: missing manifest.json in " + dir);
  nlohmann::json j;
  mf >> j;
  Dataset d;
  d.manifest = manifest_from_json(j);
  char buf[32];
  auto load_split = [&](Split s, int count) {
    for (int i = 0; i < count; ++i) {
      std::snprintf(buf, sizeof buf, "%s_%04d", split_name(s).c_str(), i);
      SliceRecord r;
      r.id = buf;
      r.split = s;
      r.target = load_slice((fs::path(dir) / (r.id + std::string(".kdmr"))).string());
      if (r.target.h != d.manifest.height || r.target.w != d.manifest.width)
        throw DataError("dataset: slice " + r.id + " does not match manifest shape");
      d.records.push_back(std::move(r));
    }
  };
  load_split(Split::Train, d.manifest.train_count);
  load_split(Split::Val, d.manifest.val_count);
  return d;
}

// ---------------------------------------------------------------------------
// Pair pipelines

template <class T>
struct ReconSample {
  std::string id;
  ComplexGrid<T> zero_filled;
  ComplexGrid<T> measured;
  Grid2D<T> target;
};

// Retrospective undersampling of every slice with one fixed mask.
template <class T>
std::vector<ReconSample<T>> make_recon_pairs(const std::vector<const SliceRecord*>& records,
                                             const SamplingMask& mask) {
  std::vector<ReconSample<T>> out;
  out.reserve(records.size());
  for (const auto* r : records) {
    if (r->target.w != mask.width)
      throw InvalidInputError("make_recon_pairs: mask width does not match slices");
    ReconSample<T> s;
    s.id = r->id;
    s.target = cast_grid<float, T>(r->target);
    auto u = undersample(s.target, mask);
    s.zero_filled = std::move(u.zero_filled);
    s.measured = std::move(u.measured);
    out.push_back(std::move(s));
  }
  return out;
}

template <class T>
struct SrSample {
  std::string id;
  ComplexGrid<T> interpolated_lr;
  Grid2D<T> target;
};

// Fourier-truncation degradation: keep the central (H/f x W/f) block of
// k-space, zero-pad back, inverse transform. The result is already at HR
// size (sinc interpolation).
template <class T>
std::vector<SrSample<T>> make_sr_pairs(const std::vector<const SliceRecord*>& records,
                                       int factor) {
  if (factor < 1) throw ConfigError("make_sr_pairs: factor must be >= 1");
  std::vector<SrSample<T>> out;
  out.reserve(records.size());
  for (const auto* r : records) {
    const int H = r->target.h, W = r->target.w;
    if (H % factor != 0 || W % factor != 0)
      throw ConfigError("make_sr_pairs: factor must divide both dimensions");
    SrSample<T> s;
    s.id = r->id;
    s.target = cast_grid<float, T>(r->target);
    auto k = fft2c(s.target);
    const int bh = H / factor, bw = W / factor;
    const int r0 = (H - bh) / 2, c0 = (W - bw) / 2;
    ComplexGrid<T> cropped(H, W, std::complex<T>(0, 0));
    for (int y = r0; y < r0 + bh; ++y)
      for (int x = c0; x < c0 + bw; ++x) cropped(y, x) = k(y, x);
    s.interpolated_lr = ifft2c(cropped);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace kdmri
