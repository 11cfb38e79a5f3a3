#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdmri/errors.hpp"
#include "kdmri/rng.hpp"
#include "kdmri/tensor.hpp"

namespace kdmri {

namespace detail {

// Process-wide FFTW plan cache keyed by (h, w, sign). Plan creation is not
// thread safe, execution via the new-array interface is. Plans are created
// with FFTW_ESTIMATE | FFTW_UNALIGNED so they run on arbitrary caller buffers
// and are reproducible run to run.
class FftwPlans {
 public:
  static FftwPlans& instance() {
    static FftwPlans p;
    return p;
  }

  void exec(int h, int w, int sign, const std::complex<double>* in, std::complex<double>* out) {
    fftw_plan plan;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto key = std::make_tuple(h, w, sign);
      auto it = dplans_.find(key);
      if (it == dplans_.end()) {
        std::vector<std::complex<double>> a(static_cast<size_t>(h) * w), b(a.size());
        plan = fftw_plan_dft_2d(h, w, reinterpret_cast<fftw_complex*>(a.data()),
                                reinterpret_cast<fftw_complex*>(b.data()), sign,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
        dplans_.emplace(key, plan);
      } else {
        plan = it->second;
      }
    }
    fftw_execute_dft(plan,
                     reinterpret_cast<fftw_complex*>(const_cast<std::complex<double>*>(in)),
                     reinterpret_cast<fftw_complex*>(out));
  }

  void exec(int h, int w, int sign, const std::complex<float>* in, std::complex<float>* out) {
    fftwf_plan plan;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto key = std::make_tuple(h, w, sign);
      auto it = fplans_.find(key);
      if (it == fplans_.end()) {
        std::vector<std::complex<float>> a(static_cast<size_t>(h) * w), b(a.size());
        plan = fftwf_plan_dft_2d(h, w, reinterpret_cast<fftwf_complex*>(a.data()),
                                 reinterpret_cast<fftwf_complex*>(b.data()), sign,
                                 FFTW_ESTIMATE | FFTW_UNALIGNED);
        fplans_.emplace(key, plan);
      } else {
        plan = it->second;
      }
    }
    fftwf_execute_dft(plan,
                      reinterpret_cast<fftwf_complex*>(const_cast<std::complex<float>*>(in)),
                      reinterpret_cast<fftwf_complex*>(out));
  }

 private:
  std::mutex mu_;
  std::map<std::tuple<int, int, int>, fftw_plan> dplans_;
  std::map<std::tuple<int, int, int>, fftwf_plan> fplans_;
};

// Centered transform = fftshift o DFT o ifftshift, orthonormal scaling.
// The shifts are folded into the copies around the FFTW call.
template <class T>
void centered_dft(const ComplexGrid<T>& src, ComplexGrid<T>& dst, int sign) {
  const int h = src.h, w = src.w;
  const int rh = h / 2, rw = w / 2;            // ifftshift offsets
  const int sh = h - rh, sw = w - rw;          // fftshift offsets
  std::vector<std::complex<T>> in(src.size()), out(src.size());
  for (int r = 0; r < h; ++r) {
    const int rs = (r + rh) % h;
    for (int c = 0; c < w; ++c) in[static_cast<size_t>(r) * w + c] = src(rs, (c + rw) % w);
  }
  FftwPlans::instance().exec(h, w, sign, in.data(), out.data());
  const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(src.size())));
  dst = ComplexGrid<T>(h, w);
  for (int r = 0; r < h; ++r) {
    const int rs = (r + sh) % h;
    for (int c = 0; c < w; ++c)
      dst(r, c) = out[static_cast<size_t>(rs) * w + (c + sw) % w] * scale;
  }
}

}  // namespace detail

// Centered, orthonormally scaled 2-D DFT: zero frequency lands at
// (h/2, w/2). ifft2c is its exact inverse and Parseval holds exactly.
template <class T>
ComplexGrid<T> fft2c(const ComplexGrid<T>& img) {
  if (img.empty()) throw InvalidInputError("fft2c: empty input");
  if (!num::all_finite(img)) throw InvalidInputError("fft2c: non-finite input");
  ComplexGrid<T> out;
  detail::centered_dft(img, out, FFTW_FORWARD);
  return out;
}

template <class T>
ComplexGrid<T> ifft2c(const ComplexGrid<T>& ksp) {
  if (ksp.empty()) throw InvalidInputError("ifft2c: empty input");
  if (!num::all_finite(ksp)) throw InvalidInputError("ifft2c: non-finite input");
  ComplexGrid<T> out;
  detail::centered_dft(ksp, out, FFTW_BACKWARD);
  return out;
}

template <class T>
ComplexGrid<T> fft2c(const Grid2D<T>& real_img) {
  return fft2c(to_complex(real_img));
}

// Cartesian line mask over the width axis; a sampled line j means every
// k-space row at column j is measured. The sampled index set is Omega.
struct SamplingMask {
  int width = 0;
  double acceleration = 1.0;
  int center_lines = 0;
  double sigma_fraction = 0.15;
  uint64_t seed = 0;
  std::vector<uint8_t> lines;  // length width, 1 = sampled

  bool sampled(int col) const { return lines[static_cast<size_t>(col)] != 0; }
  int num_sampled() const {
    int n = 0;
    for (auto b : lines) n += (b != 0);
    return n;
  }
  uint64_t hash() const {
    uint64_t h = fnv1a(lines.data(), lines.size());
    h = fnv1a(&width, sizeof width, h);
    h = fnv1a(&acceleration, sizeof acceleration, h);
    return h;
  }
  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }
};

// Variable-density Cartesian mask: the center_lines lines nearest the zero
// frequency are always kept; the remaining budget is drawn without
// replacement with probability proportional to a zero-mean Gaussian density
// over the frequency offset (sigma = sigma_fraction * width).
inline SamplingMask generate_cartesian_mask(int width, double acceleration, int center_lines,
                                            double sigma_fraction, uint64_t seed) {
  if (width < 1) throw ConfigError("mask: width must be >= 1");
  if (acceleration < 1.0) throw ConfigError("mask: acceleration must be >= 1");
  if (center_lines < 1) throw ConfigError("mask: center_lines must be >= 1");
  if (sigma_fraction <= 0.0) throw ConfigError("mask: sigma_fraction must be > 0");
  const int budget = static_cast<int>(std::llround(width / acceleration));
  if (budget < center_lines)
    throw ConfigError("mask: line budget " + std::to_string(budget) +
                      " smaller than center_lines " + std::to_string(center_lines));
  if (budget > width) throw ConfigError("mask: line budget exceeds width");

  SamplingMask m;
  m.width = width;
  m.acceleration = acceleration;
  m.center_lines = center_lines;
  m.sigma_fraction = sigma_fraction;
  m.seed = seed;
  m.lines.assign(static_cast<size_t>(width), 0);

  // Center block: offsets -floor(c/2) .. ceil(c/2)-1 around the zero line.
  const int center = width / 2;
  for (int off = -(center_lines / 2); off < center_lines - center_lines / 2; ++off)
    m.lines[static_cast<size_t>(center + off)] = 1;

  int remaining = budget - center_lines;
  if (remaining > 0) {
    const double sigma = sigma_fraction * width;
    std::vector<double> weight(static_cast<size_t>(width), 0.0);
    for (int j = 0; j < width; ++j) {
      if (m.lines[static_cast<size_t>(j)]) continue;
      const double off = j - center;
      weight[static_cast<size_t>(j)] = std::exp(-0.5 * off * off / (sigma * sigma));
    }
    Rng rng(seed);
    for (int k = 0; k < remaining; ++k) {
      double total = 0;
      for (double wgt : weight) total += wgt;
      double u = rng.uniform() * total;
      int pick = -1;
      double acc = 0;
      for (int j = 0; j < width; ++j) {
        if (weight[static_cast<size_t>(j)] <= 0) continue;
        acc += weight[static_cast<size_t>(j)];
        if (u < acc) {
          pick = j;
          break;
        }
      }
      if (pick < 0) {  // numerical tail: take the last weighted line
        for (int j = width - 1; j >= 0; --j)
          if (weight[static_cast<size_t>(j)] > 0) {
            pick = j;
            break;
          }
      }
      m.lines[static_cast<size_t>(pick)] = 1;
      weight[static_cast<size_t>(pick)] = 0;
    }
  }
  return m;
}

inline nlohmann::json mask_to_json(const SamplingMask& m) {
  std::string bits(m.lines.size(), '0');
  for (size_t i = 0; i < m.lines.size(); ++i)
    if (m.lines[i]) bits[i] = '1';
  return nlohmann::json{{"width", m.width},
                        {"acceleration", m.acceleration},
                        {"center_lines", m.center_lines},
                        {"sigma_fraction", m.sigma_fraction},
                        {"seed", m.seed},
                        {"lines", bits}};
}

inline SamplingMask mask_from_json(const nlohmann::json& j) {
  SamplingMask m;
  m.width = j.at("width").get<int>();
  m.acceleration = j.at("acceleration").get<double>();
  m.center_lines = j.at("center_lines").get<int>();
  m.sigma_fraction = j.at("sigma_fraction").get<double>();
  m.seed = j.at("seed").get<uint64_t>();
  const auto bits = j.at("lines").get<std::string>();
  if (static_cast<int>(bits.size()) != m.width)
    throw DataError("mask: lines bit-string length does not match width");
  m.lines.resize(bits.size());
  for (size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != '0' && bits[i] != '1') throw DataError("mask: invalid bit-string");
    m.lines[i] = bits[i] == '1';
  }
  return m;
}

inline void save_mask(const std::string& path, const SamplingMask& m) {
  std::ofstream f(path);
  if (!f) throw DataError("mask: cannot write " + path);
  f << mask_to_json(m).dump(2) << "\n";
}

inline SamplingMask load_mask(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("mask: cannot read " + path);
  nlohmann::json j;
  f >> j;
  return mask_from_json(j);
}

// Retrospective undersampling: measured = mask . F(img), zero_filled is the
// naive linear inversion F^H(measured).
template <class T>
struct Undersampled {
  ComplexGrid<T> measured;
  ComplexGrid<T> zero_filled;
};

template <class T>
Undersampled<T> undersample(const ComplexGrid<T>& img, const SamplingMask& mask) {
  if (img.w != mask.width)
    throw InvalidInputError("undersample: image width does not match mask");
  Undersampled<T> u;
  u.measured = fft2c(img);
  for (int r = 0; r < u.measured.h; ++r)
    for (int c = 0; c < u.measured.w; ++c)
      if (!mask.sampled(c)) u.measured(r, c) = std::complex<T>(0, 0);
  u.zero_filled = ifft2c(u.measured);
  return u;
}

template <class T>
Undersampled<T> undersample(const Grid2D<T>& img, const SamplingMask& mask) {
  return undersample(to_complex(img), mask);
}

constexpr double kHardDc = std::numeric_limits<double>::infinity();

// k-space data fidelity: off Omega the prediction is kept; on Omega it is
// blended (pred + lambda*measured) / (1 + lambda). lambda = inf replaces the
// predicted entries with the measured ones exactly.
template <class T>
ComplexGrid<T> data_consistency(const ComplexGrid<T>& pred, const ComplexGrid<T>& measured,
                                const SamplingMask& mask, double lambda) {
  if (!pred.same_shape(measured))
    throw InvalidInputError("data_consistency: pred/measured shape mismatch");
  if (pred.w != mask.width)
    throw InvalidInputError("data_consistency: mask width mismatch");
  if (std::isnan(lambda) || lambda <= 0)
    throw ConfigError("data_consistency: lambda must be positive (or inf)");

  ComplexGrid<T> out = pred;
  if (std::isinf(lambda)) {
    for (int r = 0; r < out.h; ++r)
      for (int c = 0; c < out.w; ++c)
        if (mask.sampled(c)) out(r, c) = measured(r, c);
  } else {
    const T a = static_cast<T>(1.0 / (1.0 + lambda));
    const T b = static_cast<T>(lambda / (1.0 + lambda));
    for (int r = 0; r < out.h; ++r)
      for (int c = 0; c < out.w; ++c)
        if (mask.sampled(c)) out(r, c) = a * pred(r, c) + b * measured(r, c);
  }
  return out;
}

}  // namespace kdmri
