#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdmri/errors.hpp"
#include "kdmri/models.hpp"
#include "kdmri/rng.hpp"
#include "kdmri/tensor.hpp"

namespace kdmri {

constexpr double kPsnrCap = 100.0;  // dB ceiling for identical images

// 10 log10(range^2 / MSE). data_range <= 0 selects max(target).
template <class T>
double psnr(const Grid2D<T>& pred, const Grid2D<T>& target, double data_range = 0.0) {
  if (!pred.same_shape(target)) throw InvalidInputError("psnr: shape mismatch");
  if (data_range <= 0.0) {
    double m = 0;
    for (auto x : target.v) m = std::max(m, static_cast<double>(x));
    data_range = m;
  }
  if (data_range <= 0.0)
    throw DegenerateInputError("psnr: data range is zero (all-zero target?)");
  const double m = num::mse(pred, target);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / m));
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 0.0;  // <= 0 selects max(target)
};

namespace detail {

// separable Gaussian filter, valid region only
inline std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(static_cast<size_t>(window));
  const double c = (window - 1) / 2.0;
  double sum = 0;
  for (int i = 0; i < window; ++i) {
    k[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    sum += k[static_cast<size_t>(i)];
  }
  for (auto& x : k) x /= sum;
  return k;
}

inline Grid2D<double> filter_valid(const Grid2D<double>& g, const std::vector<double>& k) {
  const int win = static_cast<int>(k.size());
  Grid2D<double> tmp(g.h, g.w - win + 1);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < tmp.w; ++x) {
      double s = 0;
      for (int i = 0; i < win; ++i) s += k[static_cast<size_t>(i)] * g(y, x + i);
      tmp(y, x) = s;
    }
  Grid2D<double> out(g.h - win + 1, tmp.w);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double s = 0;
      for (int i = 0; i < win; ++i) s += k[static_cast<size_t>(i)] * tmp(y + i, x);
      out(y, x) = s;
    }
  return out;
}

}  // namespace detail

// Mean of the local SSIM map over Gaussian-weighted windows fully inside the
// image (population-weighted moments, no sample correction).
template <class T>
double ssim(const Grid2D<T>& pred, const Grid2D<T>& target, SsimParams params = {}) {
  if (!pred.same_shape(target)) throw InvalidInputError("ssim: shape mismatch");
  if (pred.h < params.window || pred.w < params.window)
    throw InvalidInputError("ssim: image smaller than the filter window");
  double range = params.data_range;
  if (range <= 0.0) {
    range = 0;
    for (auto x : target.v) range = std::max(range, static_cast<double>(x));
  }
  if (range <= 0.0) throw DegenerateInputError("ssim: data range is zero");

  auto x = cast_grid<T, double>(pred);
  auto y = cast_grid<T, double>(target);
  Grid2D<double> xx(x.h, x.w), yy(x.h, x.w), xy(x.h, x.w);
  for (size_t i = 0; i < x.size(); ++i) {
    xx.v[i] = x.v[i] * x.v[i];
    yy.v[i] = y.v[i] * y.v[i];
    xy.v[i] = x.v[i] * y.v[i];
  }
  const auto k = detail::gaussian_kernel(params.window, params.sigma);
  auto mx = detail::filter_valid(x, k);
  auto my = detail::filter_valid(y, k);
  auto mxx = detail::filter_valid(xx, k);
  auto myy = detail::filter_valid(yy, k);
  auto mxy = detail::filter_valid(xy, k);

  const double c1 = (params.k1 * range) * (params.k1 * range);
  const double c2 = (params.k2 * range) * (params.k2 * range);
  double acc = 0;
  for (size_t i = 0; i < mx.size(); ++i) {
    const double mu1 = mx.v[i], mu2 = my.v[i];
    const double var1 = mxx.v[i] - mu1 * mu1;
    const double var2 = myy.v[i] - mu2 * mu2;
    const double cov = mxy.v[i] - mu1 * mu2;
    acc += ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) /
           ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2));
  }
  return acc / static_cast<double>(mx.size());
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

struct SignificanceResult {
  double statistic = 0;  // min(W+, W-)
  double p_value = 1;
  int n_effective = 0;
  double alpha = 0.05;
  bool significant = false;
  bool exact = false;
};

// Two-sided paired test. Zero differences are dropped; ties get midranks.
// n <= 20 uses the exact sign-assignment distribution of the observed
// midranks, larger n the normal approximation with tie correction (no
// continuity correction).
inline SignificanceResult wilcoxon_signed_rank(const std::vector<double>& a,
                                               const std::vector<double>& b,
                                               double alpha = 0.05) {
  if (a.size() != b.size()) throw InvalidInputError("wilcoxon: unequal sample lengths");
  std::vector<double> d;
  for (size_t i = 0; i < a.size(); ++i) {
    const double di = a[i] - b[i];
    if (di != 0.0) d.push_back(di);
  }
  if (d.empty()) throw DegenerateInputError("wilcoxon: all paired differences are zero");
  const int n = static_cast<int>(d.size());
  if (n < 5)
    throw DegenerateInputError("wilcoxon: need at least 5 nonzero differences, have " +
                               std::to_string(n));

  // midranks of |d|
  std::vector<int> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int i, int j) { return std::abs(d[static_cast<size_t>(i)]) <
                                       std::abs(d[static_cast<size_t>(j)]); });
  std::vector<double> rank(d.size(), 0.0);
  std::vector<int> tie_sizes;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() &&
           std::abs(d[static_cast<size_t>(order[j])]) ==
               std::abs(d[static_cast<size_t>(order[i])]))
      ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t q = i; q < j; ++q) rank[static_cast<size_t>(order[q])] = mid;
    tie_sizes.push_back(static_cast<int>(j - i));
    i = j;
  }

  double w_plus = 0, w_minus = 0;
  for (size_t i = 0; i < d.size(); ++i)
    (d[i] > 0 ? w_plus : w_minus) += rank[i];

  SignificanceResult res;
  res.statistic = std::min(w_plus, w_minus);
  res.n_effective = n;
  res.alpha = alpha;

  if (n <= 20) {
    // doubled midranks are integers; count subsets by their doubled sum
    res.exact = true;
    std::vector<int64_t> r2(d.size());
    int64_t total2 = 0;
    for (size_t i = 0; i < d.size(); ++i) {
      r2[i] = static_cast<int64_t>(std::llround(2.0 * rank[i]));
      total2 += r2[i];
    }
    std::vector<uint64_t> count(static_cast<size_t>(total2) + 1, 0);
    count[0] = 1;
    for (size_t i = 0; i < r2.size(); ++i)
      for (int64_t s = total2; s >= r2[i]; --s)
        count[static_cast<size_t>(s)] += count[static_cast<size_t>(s - r2[i])];
    const int64_t w2 = static_cast<int64_t>(std::llround(2.0 * w_plus));
    uint64_t le = 0, ge = 0;
    for (int64_t s = 0; s <= total2; ++s) {
      if (s <= w2) le += count[static_cast<size_t>(s)];
      if (s >= w2) ge += count[static_cast<size_t>(s)];
    }
    const double denom = std::pow(2.0, n);
    res.p_value = std::min(1.0, 2.0 * std::min(static_cast<double>(le), static_cast<double>(ge)) /
                                    denom);
  } else {
    const double mu = n * (n + 1) / 4.0;
    double tie_corr = 0;
    for (int t : tie_sizes) tie_corr += static_cast<double>(t) * t * t - t;
    const double var = n * (n + 1) * (2.0 * n + 1) / 24.0 - tie_corr / 48.0;
    const double z = (w_plus - mu) / std::sqrt(var);
    res.p_value = std::erfc(std::abs(z) / std::sqrt(2.0));
  }
  res.significant = res.p_value < alpha;
  return res;
}

// ---------------------------------------------------------------------------
// Residues and reports

template <class T>
Grid2D<T> residue_map(const Grid2D<T>& pred, const Grid2D<T>& target) {
  if (!pred.same_shape(target)) throw InvalidInputError("residue_map: shape mismatch");
  Grid2D<T> r(pred.h, pred.w);
  for (size_t i = 0; i < r.size(); ++i) r.v[i] = std::abs(pred.v[i] - target.v[i]);
  return r;
}

struct MetricsReport {
  std::string model_tag;
  double acceleration = 0;
  std::string mask_hash;
  std::vector<std::string> slice_ids;
  std::vector<double> psnr_db;
  std::vector<double> ssim_val;
  double psnr_mean = 0, psnr_std = 0, ssim_mean = 0, ssim_std = 0;

  void compute_aggregates() {
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
      mean = 0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      sd = 0;
      if (v.size() > 1) {
        for (double x : v) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
      }
    };
    if (!psnr_db.empty()) stats(psnr_db, psnr_mean, psnr_std);
    if (!ssim_val.empty()) stats(ssim_val, ssim_mean, ssim_std);
  }

  void write_per_slice_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("metrics: cannot write " + path);
    f << "slice_id,psnr_db,ssim\n";
    char buf[128];
    for (size_t i = 0; i < slice_ids.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.8f\n", slice_ids[i].c_str(), psnr_db[i],
                    ssim_val[i]);
      f << buf;
    }
  }

  nlohmann::json aggregate_json() const {
    return {{"model_tag", model_tag},   {"acceleration", acceleration},
            {"mask_hash", mask_hash},   {"n_slices", slice_ids.size()},
            {"psnr_mean", psnr_mean},   {"psnr_std", psnr_std},
            {"ssim_mean", ssim_mean},   {"ssim_std", ssim_std}};
  }
};

// ---------------------------------------------------------------------------
// Forward-time benchmark

struct BenchmarkReport {
  size_t param_count = 0;
  double median_forward_seconds = 0;
  std::vector<double> times;
  int height = 0, width = 0;
};

// Median wall-clock single-image forward time, single-threaded, two warm-up
// runs excluded.
template <class T>
BenchmarkReport benchmark_forward(const NetworkParameters<T>& params, int h, int w, int repeats,
                                  uint64_t seed = 0) {
  if (repeats < 5) throw ConfigError("benchmark: repeats must be >= 5");
  BenchmarkReport rep;
  rep.param_count = count_parameters(params);
  rep.height = h;
  rep.width = w;

  Rng rng(mix_seed(seed, 0xbe7cu));
  Grid2D<T> img(h, w);
  for (auto& x : img.v) x = static_cast<T>(rng.uniform());

  // input prep (mask + undersampling) stays outside the timed region
  SamplingMask mask;
  Undersampled<T> u;
  if (params.is_dccnn()) {
    mask = generate_cartesian_mask(w, 4.0, std::max(1, w / 16), 0.15, 7);
    u = undersample(img, mask);
  }

  using clock = std::chrono::steady_clock;
  ForwardContext<T> ctx;
  auto run_once = [&]() {
    if (params.is_dccnn()) {
      auto out = forward_dccnn(params, u.zero_filled, u.measured, mask, {}, &ctx);
      return out.reconstruction.v[0].real();
    }
    auto out = forward_vdsr(params, img, {}, &ctx);
    return out.hr.v[0];
  };

  volatile T sink{};
  for (int i = 0; i < 2; ++i) sink = run_once();
  rep.times.reserve(static_cast<size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = clock::now();
    sink = run_once();
    rep.times.push_back(std::chrono::duration<double>(clock::now() - t0).count());
  }
  (void)sink;
  auto sorted = rep.times;
  std::sort(sorted.begin(), sorted.end());
  const size_t mid = sorted.size() / 2;
  rep.median_forward_seconds =
      sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return rep;
}

}  // namespace kdmri
