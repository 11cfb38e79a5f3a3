#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdmri/conv.hpp"
#include "kdmri/errors.hpp"
#include "kdmri/kspace.hpp"
#include "kdmri/rng.hpp"
#include "kdmri/tensor.hpp"

namespace kdmri {

// Cascaded reconstruction network: n_cascades blocks, each a stack of
// n_convs convolutions (1 -> C -> ... -> C -> 1, ReLU between convolutions),
// a residual connection from the block input, and a k-space data-consistency
// layer against the measured lines.
struct CascadeConfig {
  int n_cascades = 5;
  int n_convs = 5;
  int channels = 32;
  int kernel = 3;
  double dc_lambda = kHardDc;

  void validate() const {
    if (n_cascades < 1) throw ConfigError("CascadeConfig: n_cascades must be >= 1");
    if (n_convs < 2) throw ConfigError("CascadeConfig: n_convs must be >= 2");
    if (channels < 1) throw ConfigError("CascadeConfig: channels must be >= 1");
    if (kernel < 1 || kernel % 2 == 0)
      throw ConfigError("CascadeConfig: kernel must be odd and positive");
    if (std::isnan(dc_lambda) || dc_lambda <= 0)
      throw ConfigError("CascadeConfig: dc_lambda must be positive (or inf)");
  }
};

// Residual super-resolution network: n_layers convolutions
// (1 -> C -> ... -> C -> 1, ReLU between), output added to the input.
struct VdsrConfig {
  int n_layers = 11;
  int channels = 64;
  int kernel = 3;

  void validate() const {
    if (n_layers < 2) throw ConfigError("VdsrConfig: n_layers must be >= 2");
    if (channels < 1) throw ConfigError("VdsrConfig: channels must be >= 1");
    if (kernel < 1 || kernel % 2 == 0)
      throw ConfigError("VdsrConfig: kernel must be odd and positive");
  }
};

inline nlohmann::json config_to_json(const CascadeConfig& c) {
  nlohmann::json j{{"type", "dccnn"},  {"n_cascades", c.n_cascades}, {"n_convs", c.n_convs},
                   {"channels", c.channels}, {"kernel", c.kernel}};
  if (std::isinf(c.dc_lambda))
    j["dc_lambda"] = "inf";
  else
    j["dc_lambda"] = c.dc_lambda;
  return j;
}

inline nlohmann::json config_to_json(const VdsrConfig& c) {
  return {{"type", "vdsr"}, {"n_layers", c.n_layers}, {"channels", c.channels},
          {"kernel", c.kernel}};
}

inline CascadeConfig cascade_config_from_json(const nlohmann::json& j) {
  CascadeConfig c;
  c.n_cascades = j.at("n_cascades").get<int>();
  c.n_convs = j.at("n_convs").get<int>();
  c.channels = j.value("channels", 32);
  c.kernel = j.value("kernel", 3);
  if (j.contains("dc_lambda")) {
    if (j["dc_lambda"].is_string())
      c.dc_lambda = kHardDc;
    else
      c.dc_lambda = j["dc_lambda"].get<double>();
  }
  c.validate();
  return c;
}

inline VdsrConfig vdsr_config_from_json(const nlohmann::json& j) {
  VdsrConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.channels = j.value("channels", 64);
  c.kernel = j.value("kernel", 3);
  c.validate();
  return c;
}

// Tap (cascade, conv), both 1-based; VDSR taps use cascade == 1.
struct TapRef {
  int cascade = 1;
  int conv = 1;
  bool operator==(const TapRef&) const = default;
};
using FeatureTapSet = std::vector<TapRef>;

// Index of the center convolution of a stack (1-based); the default
// distillation position.
inline int center_conv_index(int n_convs) { return (n_convs + 1) / 2; }

// Trainable state: all convolution weights and biases in one flat vector,
// cascade-major, each layer's weights followed by its bias. This flat order
// is also the checkpoint blob order.
template <class T>
struct NetworkParameters {
  std::variant<CascadeConfig, VdsrConfig> config;
  std::vector<ConvSpec> layers;
  std::vector<T> values;

  bool is_dccnn() const { return std::holds_alternative<CascadeConfig>(config); }
  const CascadeConfig& dccnn() const { return std::get<CascadeConfig>(config); }
  const VdsrConfig& vdsr() const { return std::get<VdsrConfig>(config); }

  nlohmann::json config_json() const {
    return is_dccnn() ? config_to_json(dccnn()) : config_to_json(vdsr());
  }
  uint64_t config_hash() const {
    const std::string s = config_json().dump();
    return fnv1a(s.data(), s.size());
  }
  uint64_t values_hash() const { return fnv1a(values.data(), values.size() * sizeof(T)); }
};

template <class T>
size_t count_parameters(const NetworkParameters<T>& p) {
  return p.values.size();
}

namespace detail {

template <class T>
void append_conv_spec(NetworkParameters<T>& p, int in_ch, int out_ch, int kernel) {
  ConvSpec s;
  s.in_ch = in_ch;
  s.out_ch = out_ch;
  s.kernel = kernel;
  s.w_off = p.values.size();
  p.values.insert(p.values.end(), s.weight_count(), T(0));
  s.b_off = p.values.size();
  p.values.insert(p.values.end(), s.bias_count(), T(0));
  p.layers.push_back(s);
}

template <class T>
void append_stack_spec(NetworkParameters<T>& p, int n_convs, int channels, int kernel) {
  for (int l = 0; l < n_convs; ++l) {
    const int in_ch = (l == 0) ? 1 : channels;
    const int out_ch = (l == n_convs - 1) ? 1 : channels;
    append_conv_spec(p, in_ch, out_ch, kernel);
  }
}

// Kaiming fan-in init, drawn in double precision so float and double builds
// share one stream. Biases stay zero.
template <class T>
void init_kaiming(NetworkParameters<T>& p, Rng& rng) {
  for (const auto& s : p.layers) {
    const double std_dev =
        std::sqrt(2.0 / (static_cast<double>(s.in_ch) * s.kernel * s.kernel));
    for (size_t i = 0; i < s.weight_count(); ++i)
      p.values[s.w_off + i] = static_cast<T>(rng.normal() * std_dev);
  }
}

}  // namespace detail

// Zero-valued parameter layout for a config; used when loading checkpoints.
template <class T>
NetworkParameters<T> make_layout(const CascadeConfig& cfg) {
  cfg.validate();
  NetworkParameters<T> p;
  p.config = cfg;
  for (int c = 0; c < cfg.n_cascades; ++c)
    detail::append_stack_spec(p, cfg.n_convs, cfg.channels, cfg.kernel);
  return p;
}

template <class T>
NetworkParameters<T> make_layout(const VdsrConfig& cfg) {
  cfg.validate();
  NetworkParameters<T> p;
  p.config = cfg;
  detail::append_stack_spec(p, cfg.n_layers, cfg.channels, cfg.kernel);
  return p;
}

template <class T>
NetworkParameters<T> build_dccnn(const CascadeConfig& cfg, uint64_t seed) {
  auto p = make_layout<T>(cfg);
  Rng rng(mix_seed(seed, 0x0dccu));
  detail::init_kaiming(p, rng);
  return p;
}

template <class T>
NetworkParameters<T> build_vdsr(const VdsrConfig& cfg, uint64_t seed) {
  auto p = make_layout<T>(cfg);
  Rng rng(mix_seed(seed, 0x7d52u));
  detail::init_kaiming(p, rng);
  return p;
}

// Activations retained by a forward pass for the corresponding backward
// pass. acts[l] is the post-activation output of layer l (the raw conv
// output for the last layer of a stack, which has no ReLU).
template <class T>
struct ForwardContext {
  struct Block {
    Grid2D<T> input;                  // real cascade input
    std::vector<FeatureMap<T>> acts;  // one per conv layer
  };
  std::vector<Block> blocks;
  ComplexGrid<T> reconstruction;
  Workspace<T> ws;
};

namespace detail {

template <class T>
void grid_to_map(const Grid2D<T>& g, FeatureMap<T>& f) {
  if (f.c != 1 || f.h != g.h || f.w != g.w) f = FeatureMap<T>(1, g.h, g.w);
  std::copy(g.v.begin(), g.v.end(), f.v.begin());
}

// Runs layers [first, first+count) of the flat layout on `input`,
// storing post-activations into acts.
template <class T>
void stack_forward(const NetworkParameters<T>& p, int first, int count,
                   const Grid2D<T>& input, std::vector<FeatureMap<T>>& acts,
                   Workspace<T>& ws) {
  acts.resize(count);
  FeatureMap<T> in_map;
  grid_to_map(input, in_map);
  for (int l = 0; l < count; ++l) {
    const FeatureMap<T>& src = (l == 0) ? in_map : acts[l - 1];
    conv_forward(p.layers[first + l], p.values.data(), src, acts[l], ws);
    if (l + 1 < count) relu_inplace(acts[l]);
  }
}

// Backward through one stack. grad_top is the gradient at the stack output
// (already including any tap injection at the last layer); inject[l], when
// non-null, is added at layer l's post-activation. grad_input is assigned
// when requested.
template <class T>
void stack_backward(const NetworkParameters<T>& p, int first, int count,
                    const Grid2D<T>& input, const std::vector<FeatureMap<T>>& acts,
                    FeatureMap<T>& grad_top, const std::vector<const FeatureMap<T>*>& inject,
                    T* grad_params, FeatureMap<T>* grad_input, Workspace<T>& ws) {
  FeatureMap<T> in_map;
  grid_to_map(input, in_map);
  FeatureMap<T> g = std::move(grad_top);
  FeatureMap<T> g_prev;
  for (int l = count - 1; l >= 0; --l) {
    if (l + 1 < count) relu_backward_inplace(acts[l], g);
    const FeatureMap<T>& src = (l == 0) ? in_map : acts[l - 1];
    FeatureMap<T>* gi = (l > 0) ? &g_prev : grad_input;
    conv_backward(p.layers[first + l], p.values.data(), src, g, gi, grad_params, ws);
    if (l > 0) {
      std::swap(g, g_prev);
      if (inject[l - 1]) {
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += inject[l - 1]->v[i];
      }
    }
  }
}

// Adjoint of the data-consistency layer: the same k-space blend applied to
// the gradient with the measured term dropped. The blend F^H D F with real
// diagonal D is self-adjoint over R^2N.
template <class T>
ComplexGrid<T> dc_backward(const ComplexGrid<T>& grad, const SamplingMask& mask,
                           double lambda) {
  auto gk = fft2c(grad);
  const T on_coeff = std::isinf(lambda) ? T(0) : static_cast<T>(1.0 / (1.0 + lambda));
  for (int r = 0; r < gk.h; ++r)
    for (int c = 0; c < gk.w; ++c)
      if (mask.sampled(c)) gk(r, c) *= on_coeff;
  return ifft2c(gk);
}

inline void check_taps(const FeatureTapSet& taps, int n_blocks, int n_convs) {
  for (const auto& t : taps) {
    if (t.cascade < 1 || t.cascade > n_blocks || t.conv < 1 || t.conv > n_convs)
      throw ConfigError("feature tap (" + std::to_string(t.cascade) + "," +
                        std::to_string(t.conv) + ") out of range");
  }
}

}  // namespace detail

template <class T>
struct DcCnnOutput {
  ComplexGrid<T> reconstruction;
  std::vector<FeatureMap<T>> taps;
};

// Each cascade keeps a complex state: the conv stack consumes its real part,
// the stack output (zero imaginary part) is added back onto the complex
// state, and the DC layer blends the state against the measured k-space.
template <class T>
DcCnnOutput<T> forward_dccnn(const NetworkParameters<T>& p, const ComplexGrid<T>& zero_filled,
                             const ComplexGrid<T>& measured, const SamplingMask& mask,
                             const FeatureTapSet& taps = {}, ForwardContext<T>* ctx = nullptr) {
  const auto& cfg = p.dccnn();
  if (!zero_filled.same_shape(measured))
    throw InvalidInputError("forward_dccnn: input/measured shape mismatch");
  if (zero_filled.w != mask.width) throw InvalidInputError("forward_dccnn: mask width mismatch");
  detail::check_taps(taps, cfg.n_cascades, cfg.n_convs);

  ForwardContext<T> local;
  ForwardContext<T>& c = ctx ? *ctx : local;
  c.blocks.resize(cfg.n_cascades);

  DcCnnOutput<T> out;
  out.taps.resize(taps.size());

  ComplexGrid<T> state = zero_filled;
  for (int b = 0; b < cfg.n_cascades; ++b) {
    auto& blk = c.blocks[b];
    blk.input = real_part(state);
    detail::stack_forward(p, b * cfg.n_convs, cfg.n_convs, blk.input, blk.acts, c.ws);
    for (size_t t = 0; t < taps.size(); ++t)
      if (taps[t].cascade == b + 1) out.taps[t] = blk.acts[taps[t].conv - 1];

    const FeatureMap<T>& cnn_out = blk.acts.back();
    ComplexGrid<T> res = state;
    for (size_t i = 0; i < res.v.size(); ++i) res.v[i] += std::complex<T>(cnn_out.v[i], 0);
    auto k_dc = data_consistency(fft2c(res), measured, mask, cfg.dc_lambda);
    state = ifft2c(k_dc);
  }
  c.reconstruction = state;
  out.reconstruction = std::move(state);
  return out;
}

// Backward for a loss with gradient grad_recon w.r.t. the real part of the
// reconstruction plus optional gradients injected at the tapped features.
// grad_params accumulates; it must have the same length as p.values.
template <class T>
void backward_dccnn(const NetworkParameters<T>& p, ForwardContext<T>& ctx,
                    const SamplingMask& mask, const Grid2D<T>& grad_recon,
                    const FeatureTapSet& taps, const std::vector<FeatureMap<T>>& tap_grads,
                    std::vector<T>& grad_params) {
  const auto& cfg = p.dccnn();
  if (grad_params.size() != p.values.size())
    throw InvalidInputError("backward_dccnn: gradient buffer size mismatch");
  if (taps.size() != tap_grads.size())
    throw InvalidInputError("backward_dccnn: tap/grad count mismatch");

  ComplexGrid<T> g = to_complex(grad_recon);
  std::vector<const FeatureMap<T>*> inject(cfg.n_convs, nullptr);
  for (int b = cfg.n_cascades - 1; b >= 0; --b) {
    auto& blk = ctx.blocks[b];
    // gradient w.r.t. this block's residual sum (pre-DC state)
    ComplexGrid<T> gres = detail::dc_backward(g, mask, cfg.dc_lambda);

    std::fill(inject.begin(), inject.end(), nullptr);
    for (size_t t = 0; t < taps.size(); ++t)
      if (taps[t].cascade == b + 1) inject[taps[t].conv - 1] = &tap_grads[t];

    // the conv branch contributed only to the real component
    FeatureMap<T> gtop(1, gres.h, gres.w);
    for (size_t i = 0; i < gres.size(); ++i) gtop.v[i] = gres.v[i].real();
    if (inject[cfg.n_convs - 1]) {
      for (size_t i = 0; i < gtop.v.size(); ++i)
        gtop.v[i] += inject[cfg.n_convs - 1]->v[i];
    }
    FeatureMap<T> ginput;
    const bool want_input = b > 0;
    detail::stack_backward(p, b * cfg.n_convs, cfg.n_convs, blk.input, blk.acts, gtop, inject,
                           grad_params.data(), want_input ? &ginput : nullptr, ctx.ws);
    if (want_input) {
      // residual branch (complex) + stack input branch (real part only)
      g = std::move(gres);
      for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += std::complex<T>(ginput.v[i], 0);
    }
  }
}

template <class T>
struct VdsrOutput {
  Grid2D<T> hr;
  std::vector<FeatureMap<T>> taps;
};

template <class T>
VdsrOutput<T> forward_vdsr(const NetworkParameters<T>& p, const Grid2D<T>& interpolated_lr,
                           const FeatureTapSet& taps = {}, ForwardContext<T>* ctx = nullptr) {
  const auto& cfg = p.vdsr();
  if (interpolated_lr.empty()) throw InvalidInputError("forward_vdsr: empty input");
  detail::check_taps(taps, 1, cfg.n_layers);

  ForwardContext<T> local;
  ForwardContext<T>& c = ctx ? *ctx : local;
  c.blocks.resize(1);
  c.blocks[0].input = interpolated_lr;
  detail::stack_forward(p, 0, cfg.n_layers, interpolated_lr, c.blocks[0].acts, c.ws);

  VdsrOutput<T> out;
  out.taps.resize(taps.size());
  for (size_t t = 0; t < taps.size(); ++t) out.taps[t] = c.blocks[0].acts[taps[t].conv - 1];

  out.hr = interpolated_lr;
  const FeatureMap<T>& last = c.blocks[0].acts.back();
  for (size_t i = 0; i < out.hr.v.size(); ++i) out.hr.v[i] += last.v[i];
  return out;
}

template <class T>
VdsrOutput<T> forward_vdsr(const NetworkParameters<T>& p, const ComplexGrid<T>& interpolated_lr,
                           const FeatureTapSet& taps = {}, ForwardContext<T>* ctx = nullptr) {
  return forward_vdsr(p, real_part(interpolated_lr), taps, ctx);
}

template <class T>
void backward_vdsr(const NetworkParameters<T>& p, ForwardContext<T>& ctx,
                   const Grid2D<T>& grad_hr, const FeatureTapSet& taps,
                   const std::vector<FeatureMap<T>>& tap_grads, std::vector<T>& grad_params) {
  const auto& cfg = p.vdsr();
  if (grad_params.size() != p.values.size())
    throw InvalidInputError("backward_vdsr: gradient buffer size mismatch");

  std::vector<const FeatureMap<T>*> inject(cfg.n_layers, nullptr);
  for (size_t t = 0; t < taps.size(); ++t) inject[taps[t].conv - 1] = &tap_grads[t];

  FeatureMap<T> gtop;
  detail::grid_to_map(grad_hr, gtop);
  if (inject[cfg.n_layers - 1]) {
    for (size_t i = 0; i < gtop.v.size(); ++i) gtop.v[i] += inject[cfg.n_layers - 1]->v[i];
  }
  detail::stack_backward(p, 0, cfg.n_layers, ctx.blocks[0].input, ctx.blocks[0].acts, gtop,
                         inject, grad_params.data(), static_cast<FeatureMap<T>*>(nullptr),
                         ctx.ws);
}

}  // namespace kdmri
