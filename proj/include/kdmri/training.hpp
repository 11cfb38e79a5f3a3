#pragma once

#ifdef _OPENMP
#include <omp.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdmri/checkpoint.hpp"
#include "kdmri/data.hpp"
#include "kdmri/distill.hpp"
#include "kdmri/kspace.hpp"
#include "kdmri/metrics.hpp"
#include "kdmri/models.hpp"

namespace kdmri {

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 1e-3;
  int batch_size = 4;
  double alpha = 0.5;       // Eq-4 blend for the fine-tuning stage
  double at_weight = 1.0;   // weight of L_AT when combined with L_rec (ablations)
  double ah_beta = 1.0;
  RecNorm norm = RecNorm::Mse;
  uint64_t seed = 1;
  std::string out_dir;      // empty: keep everything in memory
  bool save_every_epoch = false;
  bool allow_stage_override = false;
  bool cache_teacher = true;  // teachers are frozen; precompute their activations

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("train: alpha must lie in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(std::vector<T>& theta, const std::vector<T>& grad, AdamState<T>& st) const {
    st.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (size_t i = 0; i < theta.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      const double m = beta1 * static_cast<double>(st.m[i]) + (1 - beta1) * g;
      const double v = beta2 * static_cast<double>(st.v[i]) + (1 - beta2) * g * g;
      st.m[i] = static_cast<T>(m);
      st.v[i] = static_cast<T>(v);
      theta[i] -= static_cast<T>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
    }
  }
};

// ---------------------------------------------------------------------------
// Model views: one forward/backward interface over both architectures

template <class T>
struct DcCnnView {
  using Sample = ReconSample<T>;
  const SamplingMask* mask = nullptr;

  Grid2D<T> forward(const NetworkParameters<T>& p, const Sample& s, const FeatureTapSet& taps,
                    std::vector<FeatureMap<T>>* feats, ForwardContext<T>* ctx) const {
    auto out = forward_dccnn(p, s.zero_filled, s.measured, *mask, taps, ctx);
    if (feats) *feats = std::move(out.taps);
    return real_part(out.reconstruction);
  }
  void backward(const NetworkParameters<T>& p, ForwardContext<T>& ctx, const Grid2D<T>& grad_out,
                const FeatureTapSet& taps, const std::vector<FeatureMap<T>>& tap_grads,
                std::vector<T>& grad) const {
    backward_dccnn(p, ctx, *mask, grad_out, taps, tap_grads, grad);
  }
};

template <class T>
struct VdsrView {
  using Sample = SrSample<T>;

  Grid2D<T> forward(const NetworkParameters<T>& p, const Sample& s, const FeatureTapSet& taps,
                    std::vector<FeatureMap<T>>* feats, ForwardContext<T>* ctx) const {
    auto out = forward_vdsr(p, real_part(s.interpolated_lr), taps, ctx);
    if (feats) *feats = std::move(out.taps);
    return std::move(out.hr);
  }
  void backward(const NetworkParameters<T>& p, ForwardContext<T>& ctx, const Grid2D<T>& grad_out,
                const FeatureTapSet& taps, const std::vector<FeatureMap<T>>& tap_grads,
                std::vector<T>& grad) const {
    backward_vdsr(p, ctx, grad_out, taps, tap_grads, grad);
  }
};

// ---------------------------------------------------------------------------
// Batch objectives

template <class T>
struct BatchTensors {
  std::vector<const Grid2D<T>*> targets;
  std::vector<Grid2D<T>> student_out;
  std::vector<std::vector<FeatureMap<T>>> student_feats;
  std::vector<Grid2D<T>> teacher_out;
  std::vector<std::vector<FeatureMap<T>>> teacher_feats;

  size_t size() const { return targets.size(); }
};

template <class T>
struct BatchGrads {
  std::vector<Grid2D<T>> grad_out;                    // dL/d(student output), per sample
  std::vector<std::vector<FeatureMap<T>>> tap_grads;  // dL/d(student tap), per sample

  void init(const BatchTensors<T>& bt) {
    grad_out.assign(bt.size(), Grid2D<T>());
    tap_grads.assign(bt.size(), {});
    for (size_t i = 0; i < bt.size(); ++i) {
      grad_out[i] = Grid2D<T>(bt.targets[i]->h, bt.targets[i]->w, T(0));
      tap_grads[i].reserve(bt.student_feats[i].size());
      for (const auto& f : bt.student_feats[i])
        tap_grads[i].emplace_back(f.c, f.h, f.w, T(0));
    }
  }
};

// An objective maps one batch onto (loss, gradients). The loss is the batch
// mean of the stage loss; gradients carry the same 1/B scaling.
template <class T>
using Objective = std::function<double(const BatchTensors<T>&, BatchGrads<T>*)>;

namespace objectives {

// plain reconstruction loss (teacher training, unassisted student, alpha=1
// fine-tuning)
template <class T>
Objective<T> reconstruction(RecNorm norm) {
  return [norm](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    const double inv_b = 1.0 / static_cast<double>(bt.size());
    double loss = 0;
    for (size_t i = 0; i < bt.size(); ++i)
      loss += pixel_loss(bt.student_out[i], *bt.targets[i], norm,
                         g ? &g->grad_out[i] : nullptr, inv_b);
    return loss * inv_b;
  };
}

// attention transfer on tapped features only
template <class T>
Objective<T> attention_transfer() {
  return [](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    const double inv_b = 1.0 / static_cast<double>(bt.size());
    double loss = 0;
    for (size_t i = 0; i < bt.size(); ++i) {
      std::vector<FeatureMap<T>> grads;
      loss += at_loss_on_features(bt.student_feats[i], bt.teacher_feats[i],
                                  g ? &grads : nullptr);
      if (g)
        for (size_t t = 0; t < grads.size(); ++t)
          for (size_t k = 0; k < grads[t].v.size(); ++k)
            g->tap_grads[i][t].v[k] += static_cast<T>(grads[t].v[k] * inv_b);
    }
    return loss * inv_b;
  };
}

// Eq-4 blend of reconstruction and imitation loss. alpha = 1 needs no
// teacher output at all.
template <class T>
Objective<T> kd_total(double alpha, RecNorm norm) {
  return [alpha, norm](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    const double inv_b = 1.0 / static_cast<double>(bt.size());
    double loss = 0;
    for (size_t i = 0; i < bt.size(); ++i) {
      const double rec = pixel_loss(bt.student_out[i], *bt.targets[i], norm,
                                    g ? &g->grad_out[i] : nullptr, alpha * inv_b);
      loss += alpha * rec;
      if (alpha < 1.0) {
        const double imit = imitation_loss(bt.student_out[i], bt.teacher_out[i], norm,
                                           g ? &g->grad_out[i] : nullptr, (1 - alpha) * inv_b);
        loss += (1 - alpha) * imit;
      }
    }
    return loss * inv_b;
  };
}

// FitNets hint regression; adapters (when channel counts differ) are trained
// jointly here and discarded afterwards.
template <class T>
struct FitnetState {
  std::vector<ChannelAdapter<T>> adapters;
  std::vector<AdamState<T>> adapter_opt;
  Adam<T> adam;
};

template <class T>
Objective<T> fitnet(std::shared_ptr<FitnetState<T>> st) {
  return [st](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    const double inv_b = 1.0 / static_cast<double>(bt.size());
    const size_t n_pairs = bt.student_feats.empty() ? 0 : bt.student_feats[0].size();
    std::vector<std::vector<T>> adapter_grads(n_pairs);
    for (size_t t = 0; t < n_pairs; ++t)
      if (!st->adapters[t].is_identity())
        adapter_grads[t].assign(st->adapters[t].params.size(), T(0));

    double loss = 0;
    for (size_t i = 0; i < bt.size(); ++i) {
      for (size_t t = 0; t < n_pairs; ++t) {
        FeatureMap<T> gs;
        loss += fitnet_loss(bt.student_feats[i][t], bt.teacher_feats[i][t], st->adapters[t],
                            g ? &gs : nullptr,
                            g && !st->adapters[t].is_identity() ? &adapter_grads[t] : nullptr,
                            inv_b);
        if (g)
          for (size_t k = 0; k < gs.v.size(); ++k) g->tap_grads[i][t].v[k] += gs.v[k];
      }
    }
    if (g) {
      for (size_t t = 0; t < n_pairs; ++t)
        if (!st->adapters[t].is_identity())
          st->adam.step(st->adapters[t].params, adapter_grads[t], st->adapter_opt[t]);
    }
    return loss * inv_b;
  };
}

// FSP: taps arrive interleaved (first, second) per flow pair
template <class T>
Objective<T> fsp() {
  return [](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    const double inv_b = 1.0 / static_cast<double>(bt.size());
    double loss = 0;
    for (size_t i = 0; i < bt.size(); ++i) {
      const size_t n_pairs = bt.student_feats[i].size() / 2;
      std::vector<std::pair<FeatureMap<T>, FeatureMap<T>>> sp, tp;
      for (size_t p = 0; p < n_pairs; ++p) {
        sp.emplace_back(bt.student_feats[i][2 * p], bt.student_feats[i][2 * p + 1]);
        tp.emplace_back(bt.teacher_feats[i][2 * p], bt.teacher_feats[i][2 * p + 1]);
      }
      std::vector<std::pair<FeatureMap<T>, FeatureMap<T>>> grads;
      loss += fsp_loss(sp, tp, g ? &grads : nullptr);
      if (g)
        for (size_t p = 0; p < n_pairs; ++p) {
          for (size_t k = 0; k < grads[p].first.v.size(); ++k)
            g->tap_grads[i][2 * p].v[k] += static_cast<T>(grads[p].first.v[k] * inv_b);
          for (size_t k = 0; k < grads[p].second.v.size(); ++k)
            g->tap_grads[i][2 * p + 1].v[k] += static_cast<T>(grads[p].second.v[k] * inv_b);
        }
    }
    return loss * inv_b;
  };
}

// similarity preserving: batch-level Gram matching per tap position
template <class T>
Objective<T> similarity_preserving() {
  return [](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    const size_t n_taps = bt.student_feats.empty() ? 0 : bt.student_feats[0].size();
    double loss = 0;
    for (size_t t = 0; t < n_taps; ++t) {
      std::vector<FeatureMap<T>> s, tc;
      for (size_t i = 0; i < bt.size(); ++i) {
        s.push_back(bt.student_feats[i][t]);
        tc.push_back(bt.teacher_feats[i][t]);
      }
      std::vector<FeatureMap<T>> grads;
      loss += sp_loss(s, tc, g ? &grads : nullptr);
      if (g)
        for (size_t i = 0; i < bt.size(); ++i)
          for (size_t k = 0; k < grads[i].v.size(); ++k)
            g->tap_grads[i][t].v[k] += grads[i].v[k];
    }
    return loss;
  };
}

// attentive hints: per-sample FitNets hints scaled by teacher quality
template <class T>
Objective<T> attentive_hint(double beta) {
  return [beta](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    std::vector<Grid2D<T>> touts(bt.teacher_out.begin(), bt.teacher_out.end());
    std::vector<Grid2D<T>> targets;
    for (const auto* t : bt.targets) targets.push_back(*t);
    const auto w = attentive_hint_weights(touts, targets, beta);
    const double inv_b = 1.0 / static_cast<double>(bt.size());
    double loss = 0;
    const ChannelAdapter<T> no_adapter;
    for (size_t i = 0; i < bt.size(); ++i) {
      for (size_t t = 0; t < bt.student_feats[i].size(); ++t) {
        FeatureMap<T> gs;
        loss += w[i] * fitnet_loss(bt.student_feats[i][t], bt.teacher_feats[i][t], no_adapter,
                                   g ? &gs : nullptr, static_cast<std::vector<T>*>(nullptr),
                                   w[i] * inv_b);
        if (g)
          for (size_t k = 0; k < gs.v.size(); ++k) g->tap_grads[i][t].v[k] += gs.v[k];
      }
    }
    return loss * inv_b;
  };
}

// single-stage loss combinations for the ablation study
enum class AblationCombo { Rec, RecImit, RecAt, RecImitAt };

inline std::string ablation_name(AblationCombo c) {
  switch (c) {
    case AblationCombo::Rec: return "rec";
    case AblationCombo::RecImit: return "rec_imit";
    case AblationCombo::RecAt: return "rec_at";
    case AblationCombo::RecImitAt: return "rec_imit_at";
  }
  return "?";
}

inline AblationCombo ablation_from_name(const std::string& s) {
  if (s == "rec") return AblationCombo::Rec;
  if (s == "rec_imit") return AblationCombo::RecImit;
  if (s == "rec_at") return AblationCombo::RecAt;
  if (s == "rec_imit_at") return AblationCombo::RecImitAt;
  throw ConfigError("unknown ablation combo '" + s + "'");
}

template <class T>
Objective<T> ablation(AblationCombo combo, double alpha, double at_weight, RecNorm norm) {
  const bool use_imit = combo == AblationCombo::RecImit || combo == AblationCombo::RecImitAt;
  const bool use_at = combo == AblationCombo::RecAt || combo == AblationCombo::RecImitAt;
  return [=](const BatchTensors<T>& bt, BatchGrads<T>* g) {
    const double inv_b = 1.0 / static_cast<double>(bt.size());
    const double rec_w = use_imit ? alpha : 1.0;
    double loss = 0;
    for (size_t i = 0; i < bt.size(); ++i) {
      loss += rec_w * pixel_loss(bt.student_out[i], *bt.targets[i], norm,
                                 g ? &g->grad_out[i] : nullptr, rec_w * inv_b);
      if (use_imit)
        loss += (1 - alpha) * imitation_loss(bt.student_out[i], bt.teacher_out[i], norm,
                                             g ? &g->grad_out[i] : nullptr,
                                             (1 - alpha) * inv_b);
      if (use_at) {
        std::vector<FeatureMap<T>> grads;
        const double at = at_loss_on_features(bt.student_feats[i], bt.teacher_feats[i],
                                              g ? &grads : nullptr);
        loss += at_weight * at;
        if (g)
          for (size_t t = 0; t < grads.size(); ++t)
            for (size_t k = 0; k < grads[t].v.size(); ++k)
              g->tap_grads[i][t].v[k] += static_cast<T>(at_weight * inv_b * grads[t].v[k]);
      }
    }
    return loss * inv_b;
  };
}

}  // namespace objectives

// ---------------------------------------------------------------------------
// Generic training loop

template <class T>
struct TrainResult {
  CheckpointRecord<T> best;
  CheckpointRecord<T> last;
};

template <class T>
struct StageSetup {
  std::string stage;
  NetworkParameters<T> init_params;
  const NetworkParameters<T>* teacher = nullptr;
  FeatureTapSet student_taps, teacher_taps;
  bool need_teacher_out = false;
  // true: validation loss is the plain reconstruction MSE (also the
  // best-checkpoint selection metric); false: the stage objective on the
  // validation set (pre-training stages).
  bool val_recon_mse = true;
  size_t min_batch = 1;  // SP needs >= 2 samples per batch
  nlohmann::json extra = nlohmann::json::object();
  const CheckpointRecord<T>* resume = nullptr;
};

namespace detail {

inline std::vector<size_t> shuffled_indices(size_t n, uint64_t seed, int epoch) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng(mix_seed(mix_seed(seed, 0x5317u), static_cast<uint64_t>(epoch)));
  for (size_t i = n; i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// OpenMP swallows exceptions crossing a parallel region; capture the first
// and rethrow it on the orchestrating thread.
template <class Fn>
void parallel_for(size_t n, Fn&& body) {
  std::exception_ptr eptr = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (!eptr) eptr = std::current_exception();
    }
  }
  if (eptr) std::rethrow_exception(eptr);
}

inline void append_history_csv(const std::string& out_dir, const EpochStats& e, bool first) {
  namespace fs = std::filesystem;
  const auto path = fs::path(out_dir) / "history.csv";
  std::ofstream f(path, first ? std::ios::trunc : std::ios::app);
  if (!f) throw DataError("train: cannot write " + path.string());
  if (first) f << "epoch,train_loss,val_loss,wall_seconds\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.3f\n", e.epoch, e.train_loss, e.val_loss,
                e.wall_seconds);
  f << buf;
}

}  // namespace detail

// Frozen-teacher activations precomputed once per run.
template <class T>
struct TeacherCacheEntry {
  Grid2D<T> out;
  std::vector<FeatureMap<T>> feats;
};

template <class T, class View>
TrainResult<T> run_training(const View& view, const StageSetup<T>& setup, const TrainConfig& cfg,
                            const std::vector<typename View::Sample>& train_set,
                            const std::vector<typename View::Sample>& val_set,
                            const Objective<T>& objective) {
  cfg.validate();
  if (train_set.empty() || val_set.empty())
    throw InvalidInputError("train: empty train or validation split");
  const bool use_teacher =
      setup.teacher && (setup.need_teacher_out || !setup.teacher_taps.empty());

  NetworkParameters<T> params = setup.init_params;
  AdamState<T> opt;
  opt.reset(params.values.size());
  std::vector<EpochStats> history;
  int start_epoch = 0;
  int64_t step = 0;
  if (setup.resume) {
    params = setup.resume->params;
    opt = setup.resume->opt;
    if (opt.empty()) opt.reset(params.values.size());
    history = setup.resume->history;
    start_epoch = setup.resume->epoch;
    step = setup.resume->step;
  }
  Adam<T> adam;
  adam.lr = cfg.learning_rate;

  const uint64_t teacher_hash_before =
      use_teacher ? setup.teacher->values_hash() : 0;

  // teacher activation cache (index: train first, then val)
  std::vector<TeacherCacheEntry<T>> tcache;
  const bool cache_teacher = use_teacher && cfg.cache_teacher;
  auto teacher_forward = [&](const typename View::Sample& s, TeacherCacheEntry<T>& e) {
    std::vector<FeatureMap<T>> feats;
    e.out = view.forward(*setup.teacher, s, setup.teacher_taps,
                         setup.teacher_taps.empty() ? nullptr : &feats, nullptr);
    e.feats = std::move(feats);
  };
  if (cache_teacher) {
    tcache.resize(train_set.size() + val_set.size());
    detail::parallel_for(tcache.size(), [&](size_t i) {
      const auto& s = i < train_set.size() ? train_set[i] : val_set[i - train_set.size()];
      teacher_forward(s, tcache[i]);
    });
  }

  std::vector<ForwardContext<T>> ctxs(static_cast<size_t>(cfg.batch_size));
  std::vector<std::vector<T>> sample_grads(static_cast<size_t>(cfg.batch_size));
  std::vector<T> grad(params.values.size(), T(0));

  // evaluates one batch: forwards (parallel), objective, optional backward +
  // ordered gradient reduction
  auto process_batch = [&](const std::vector<size_t>& idx, size_t lo, size_t hi,
                           const std::vector<typename View::Sample>& data, bool training,
                           size_t cache_off) -> double {
    const size_t bs = hi - lo;
    BatchTensors<T> bt;
    bt.targets.resize(bs);
    bt.student_out.resize(bs);
    bt.student_feats.resize(bs);
    if (use_teacher) {
      bt.teacher_out.resize(bs);
      bt.teacher_feats.resize(bs);
    }
    detail::parallel_for(bs, [&](size_t k) {
      const auto& s = data[idx[lo + k]];
      bt.student_out[k] =
          view.forward(params, s, setup.student_taps,
                       setup.student_taps.empty() ? nullptr : &bt.student_feats[k],
                       training ? &ctxs[k] : nullptr);
      if (use_teacher) {
        if (cache_teacher) {
          const auto& e = tcache[cache_off + idx[lo + k]];
          bt.teacher_out[k] = e.out;
          bt.teacher_feats[k] = e.feats;
        } else {
          TeacherCacheEntry<T> e;
          teacher_forward(s, e);
          bt.teacher_out[k] = std::move(e.out);
          bt.teacher_feats[k] = std::move(e.feats);
        }
      }
    });
    for (size_t k = 0; k < bs; ++k) bt.targets[k] = &data[idx[lo + k]].target;

    if (!training) return objective(bt, nullptr);

    BatchGrads<T> bg;
    bg.init(bt);
    const double loss = objective(bt, &bg);
    detail::parallel_for(bs, [&](size_t k) {
      if (sample_grads[k].size() != params.values.size())
        sample_grads[k].assign(params.values.size(), T(0));
      else
        std::fill(sample_grads[k].begin(), sample_grads[k].end(), T(0));
      view.backward(params, ctxs[k], bg.grad_out[k], setup.student_taps, bg.tap_grads[k],
                    sample_grads[k]);
    });
    // deterministic reduction in sample order
    std::fill(grad.begin(), grad.end(), T(0));
    for (size_t k = 0; k < bs; ++k)
      for (size_t i = 0; i < grad.size(); ++i) grad[i] += sample_grads[k][i];
    adam.step(params.values, grad, opt);
    ++step;
    return loss;
  };

  std::vector<size_t> val_idx(val_set.size());
  std::iota(val_idx.begin(), val_idx.end(), size_t{0});

  auto validation_loss = [&]() -> double {
    if (setup.val_recon_mse) {
      std::vector<double> per_sample(val_set.size(), 0.0);
      detail::parallel_for(val_set.size(), [&](size_t i) {
        auto out = view.forward(params, val_set[i], {}, nullptr, nullptr);
        per_sample[i] = num::mse(out, val_set[i].target);
      });
      double acc = 0;
      for (double x : per_sample) acc += x;
      return acc / static_cast<double>(val_set.size());
    }
    double acc = 0;
    size_t n = 0;
    for (size_t lo = 0; lo < val_set.size(); lo += static_cast<size_t>(cfg.batch_size)) {
      const size_t hi = std::min(val_set.size(), lo + static_cast<size_t>(cfg.batch_size));
      if (hi - lo < setup.min_batch) continue;
      acc += process_batch(val_idx, lo, hi, val_set, false, train_set.size()) *
             static_cast<double>(hi - lo);
      n += hi - lo;
    }
    return n ? acc / static_cast<double>(n) : 0.0;
  };

  namespace fs = std::filesystem;
  if (!cfg.out_dir.empty()) fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");

  auto snapshot = [&](int epoch) {
    CheckpointRecord<T> rec;
    rec.params = params;
    rec.opt = opt;
    rec.stage = setup.stage;
    rec.epoch = epoch;
    rec.step = step;
    rec.seed = cfg.seed;
    rec.history = history;
    rec.extra = setup.extra;
    return rec;
  };
  auto save = [&](const CheckpointRecord<T>& rec, const std::string& name) {
    if (cfg.out_dir.empty()) return;
    save_checkpoint((fs::path(cfg.out_dir) / "checkpoints" / name).string(), rec);
  };

  CheckpointRecord<T> best;
  double best_val = std::numeric_limits<double>::infinity();
  for (const auto& h : history)
    if (h.val_loss < best_val) best_val = h.val_loss;

  TrainResult<T> result;
  for (int epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto perm = detail::shuffled_indices(train_set.size(), cfg.seed, epoch);
    double train_loss = 0;
    size_t n_train = 0;
    for (size_t lo = 0; lo < perm.size(); lo += static_cast<size_t>(cfg.batch_size)) {
      const size_t hi = std::min(perm.size(), lo + static_cast<size_t>(cfg.batch_size));
      if (hi - lo < setup.min_batch) continue;
      double loss;
      try {
        loss = process_batch(perm, lo, hi, train_set, true, 0);
      } catch (const InvalidInputError&) {
        // non-finite activations mid-run: the optimizer has diverged
        throw TrainingFailureError("train: diverged in stage " + setup.stage, epoch);
      }
      if (!std::isfinite(loss))
        throw TrainingFailureError("train: non-finite loss in stage " + setup.stage, epoch);
      for (const T x : params.values)
        if (!num::finite(x))
          throw TrainingFailureError("train: non-finite parameters in stage " + setup.stage,
                                     epoch);
      train_loss += loss * static_cast<double>(hi - lo);
      n_train += hi - lo;
    }
    train_loss /= static_cast<double>(n_train);
    const double val_loss = validation_loss();
    if (!std::isfinite(val_loss))
      throw TrainingFailureError("train: non-finite validation loss in stage " + setup.stage,
                                 epoch);
    EpochStats es{epoch, train_loss, val_loss,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    history.push_back(es);
    if (!cfg.out_dir.empty())
      detail::append_history_csv(cfg.out_dir, es, epoch == start_epoch + 1 && !setup.resume);

    if (val_loss < best_val) {
      best_val = val_loss;
      best = snapshot(epoch);
    }
    if (cfg.save_every_epoch)
      save(snapshot(epoch), setup.stage + "_" + std::to_string(epoch) + ".ckpt");
  }

  if (use_teacher && setup.teacher->values_hash() != teacher_hash_before)
    throw Error("train: frozen teacher was modified");

  result.last = snapshot(cfg.epochs);
  if (best.params.values.empty()) best = result.last;
  result.best = best;
  save(result.last, setup.stage + "_" + std::to_string(cfg.epochs) + ".ckpt");
  save(result.best, setup.stage + "_best.ckpt");
  return result;
}

// ---------------------------------------------------------------------------
// Reconstruction stages (Algorithm-1 steps, baselines, ablations)

template <class T>
struct ReconData {
  SamplingMask mask;
  std::vector<ReconSample<T>> train, val;
};

template <class T>
ReconData<T> prepare_recon_data(const Dataset& ds, const SamplingMask& mask) {
  ReconData<T> d;
  d.mask = mask;
  auto tr = ds.split(Split::Train), va = ds.split(Split::Val);
  d.train = make_recon_pairs<T>(tr, mask);
  d.val = make_recon_pairs<T>(va, mask);
  return d;
}

// Step 1: teacher trained on its own reconstruction loss.
template <class T>
TrainResult<T> train_teacher(const TrainConfig& cfg, const CascadeConfig& teacher_cfg,
                             const ReconData<T>& data,
                             const CheckpointRecord<T>* resume = nullptr) {
  DcCnnView<T> view{&data.mask};
  StageSetup<T> setup;
  setup.stage = "teacher";
  setup.init_params = build_dccnn<T>(teacher_cfg, cfg.seed);
  setup.resume = resume;
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::reconstruction<T>(cfg.norm));
}

// Unassisted student (the S-DC-CNN baseline).
template <class T>
TrainResult<T> train_student_plain(const TrainConfig& cfg, const CascadeConfig& student_cfg,
                                   const ReconData<T>& data,
                                   const CheckpointRecord<T>* resume = nullptr) {
  DcCnnView<T> view{&data.mask};
  StageSetup<T> setup;
  setup.stage = "student_plain";
  setup.init_params = build_dccnn<T>(student_cfg, cfg.seed);
  setup.resume = resume;
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::reconstruction<T>(cfg.norm));
}

// Step 2: student pre-trained on attention transfer alone, teacher frozen.
template <class T>
TrainResult<T> train_student_at(const TrainConfig& cfg, const CascadeConfig& student_cfg,
                                const CheckpointRecord<T>& teacher, const ReconData<T>& data,
                                const DistillationPlan& plan) {
  if (plan.method != FdMethod::AT)
    throw ConfigError("train_student_at: plan method must be AT");
  DcCnnView<T> view{&data.mask};
  StageSetup<T> setup;
  setup.stage = "student_at_pretrain";
  setup.init_params = build_dccnn<T>(student_cfg, cfg.seed);
  setup.teacher = &teacher.params;
  setup.student_taps = plan.student_taps();
  setup.teacher_taps = plan.teacher_taps();
  setup.val_recon_mse = false;  // validation tracks L_AT for this stage
  setup.extra["plan"] = plan_to_json(plan);
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::attention_transfer<T>());
}

// Step 3: load the Step-2 weights and re-train under Eq-4. Also used for the
// alpha=1 fine-tuning of the feature-distillation baselines.
template <class T>
TrainResult<T> finetune_student_kd(const TrainConfig& cfg, const CheckpointRecord<T>& teacher,
                                   const CheckpointRecord<T>& init, const ReconData<T>& data) {
  if (init.stage != "student_at_pretrain" && init.stage != "student_fd_pretrain" &&
      !cfg.allow_stage_override)
    throw ConfigError("finetune_student_kd: init checkpoint comes from stage '" + init.stage +
                      "', expected a pre-training stage (set allow_stage_override to force)");
  DcCnnView<T> view{&data.mask};
  StageSetup<T> setup;
  setup.stage = "student_kd_finetune";
  setup.init_params = init.params;
  setup.teacher = &teacher.params;
  setup.need_teacher_out = cfg.alpha < 1.0;
  setup.extra["init_stage"] = init.stage;
  if (init.extra.contains("method")) setup.extra["init_method"] = init.extra["method"];
  setup.extra["alpha"] = cfg.alpha;
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::kd_total<T>(cfg.alpha, cfg.norm));
}

// Feature-distillation pre-training with one of the baseline methods.
template <class T>
TrainResult<T> pretrain_student_fd(const TrainConfig& cfg, const CascadeConfig& student_cfg,
                                   const CheckpointRecord<T>& teacher, const ReconData<T>& data,
                                   const DistillationPlan& plan) {
  DcCnnView<T> view{&data.mask};
  StageSetup<T> setup;
  setup.stage =
      plan.method == FdMethod::AT ? "student_at_pretrain" : "student_fd_pretrain";
  setup.init_params = build_dccnn<T>(student_cfg, cfg.seed);
  setup.teacher = &teacher.params;
  setup.student_taps = plan.student_taps();
  setup.teacher_taps = plan.teacher_taps();
  setup.val_recon_mse = false;
  setup.extra["method"] = fd_method_name(plan.method);
  setup.extra["plan"] = plan_to_json(plan);

  Objective<T> obj;
  switch (plan.method) {
    case FdMethod::AT:
      obj = objectives::attention_transfer<T>();
      break;
    case FdMethod::FN: {
      auto st = std::make_shared<objectives::FitnetState<T>>();
      st->adam.lr = cfg.learning_rate;
      const auto& tcfg = teacher.params.dccnn();
      for (const auto& pair : plan.pairs) {
        const int s_ch = pair.student.conv == student_cfg.n_convs ? 1 : student_cfg.channels;
        const int t_ch = pair.teacher.conv == tcfg.n_convs ? 1 : tcfg.channels;
        if (s_ch == t_ch) {
          st->adapters.push_back(ChannelAdapter<T>::identity());
        } else {
          st->adapters.push_back(ChannelAdapter<T>::make(s_ch, t_ch, cfg.seed));
        }
        st->adapter_opt.emplace_back();
        if (!st->adapters.back().is_identity())
          st->adapter_opt.back().reset(st->adapters.back().params.size());
      }
      obj = objectives::fitnet<T>(st);
      break;
    }
    case FdMethod::FSP:
      obj = objectives::fsp<T>();
      break;
    case FdMethod::SP:
      setup.min_batch = 2;
      obj = objectives::similarity_preserving<T>();
      break;
    case FdMethod::AH:
      setup.need_teacher_out = true;
      obj = objectives::attentive_hint<T>(cfg.ah_beta);
      break;
  }
  return run_training(view, setup, cfg, data.train, data.val, obj);
}

// Single-stage loss-combination training for the ablation study.
template <class T>
TrainResult<T> train_student_ablation(const TrainConfig& cfg, const CascadeConfig& student_cfg,
                                      const CheckpointRecord<T>& teacher,
                                      const ReconData<T>& data,
                                      objectives::AblationCombo combo,
                                      const DistillationPlan& plan) {
  using objectives::AblationCombo;
  DcCnnView<T> view{&data.mask};
  const bool use_at = combo == AblationCombo::RecAt || combo == AblationCombo::RecImitAt;
  const bool use_imit = combo == AblationCombo::RecImit || combo == AblationCombo::RecImitAt;
  StageSetup<T> setup;
  setup.stage = "ablate_" + objectives::ablation_name(combo);
  setup.init_params = build_dccnn<T>(student_cfg, cfg.seed);
  if (use_at || use_imit) setup.teacher = &teacher.params;
  setup.need_teacher_out = use_imit;
  if (use_at) {
    setup.student_taps = plan.student_taps();
    setup.teacher_taps = plan.teacher_taps();
  }
  setup.extra["combo"] = objectives::ablation_name(combo);
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::ablation<T>(combo, cfg.alpha, cfg.at_weight, cfg.norm));
}

// ---------------------------------------------------------------------------
// Super-resolution stages (same Algorithm-1 shape on the VDSR pair)

template <class T>
struct SrData {
  int factor = 4;
  std::vector<SrSample<T>> train, val;
};

template <class T>
SrData<T> prepare_sr_data(const Dataset& ds, int factor) {
  SrData<T> d;
  d.factor = factor;
  auto tr = ds.split(Split::Train), va = ds.split(Split::Val);
  d.train = make_sr_pairs<T>(tr, factor);
  d.val = make_sr_pairs<T>(va, factor);
  return d;
}

template <class T>
TrainResult<T> train_vdsr(const TrainConfig& cfg, const VdsrConfig& net_cfg, const SrData<T>& data,
                          const std::string& stage_tag,
                          const CheckpointRecord<T>* resume = nullptr) {
  VdsrView<T> view;
  StageSetup<T> setup;
  setup.stage = stage_tag;
  setup.init_params = build_vdsr<T>(net_cfg, cfg.seed);
  setup.resume = resume;
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::reconstruction<T>(cfg.norm));
}

template <class T>
TrainResult<T> train_vdsr_at(const TrainConfig& cfg, const VdsrConfig& student_cfg,
                             const CheckpointRecord<T>& teacher, const SrData<T>& data,
                             const DistillationPlan& plan) {
  VdsrView<T> view;
  StageSetup<T> setup;
  setup.stage = "student_at_pretrain";
  setup.init_params = build_vdsr<T>(student_cfg, cfg.seed);
  setup.teacher = &teacher.params;
  setup.student_taps = plan.student_taps();
  setup.teacher_taps = plan.teacher_taps();
  setup.val_recon_mse = false;
  setup.extra["plan"] = plan_to_json(plan);
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::attention_transfer<T>());
}

template <class T>
TrainResult<T> finetune_vdsr_kd(const TrainConfig& cfg, const CheckpointRecord<T>& teacher,
                                const CheckpointRecord<T>& init, const SrData<T>& data) {
  if (init.stage != "student_at_pretrain" && !cfg.allow_stage_override)
    throw ConfigError("finetune_vdsr_kd: init checkpoint comes from stage '" + init.stage +
                      "', expected student_at_pretrain");
  VdsrView<T> view;
  StageSetup<T> setup;
  setup.stage = "student_kd_finetune";
  setup.init_params = init.params;
  setup.teacher = &teacher.params;
  setup.need_teacher_out = cfg.alpha < 1.0;
  setup.extra["alpha"] = cfg.alpha;
  return run_training(view, setup, cfg, data.train, data.val,
                      objectives::kd_total<T>(cfg.alpha, cfg.norm));
}

}  // namespace kdmri
