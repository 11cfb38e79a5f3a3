#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdmri/conv.hpp"
#include "kdmri/errors.hpp"
#include "kdmri/models.hpp"
#include "kdmri/rng.hpp"
#include "kdmri/tensor.hpp"

namespace kdmri {

// Feature-distillation methods: attention transfer plus the four baselines
// (FitNets regression, flow-of-solution-procedure matrices, batch-similarity
// preservation, attentive hints).
enum class FdMethod { AT, FN, FSP, SP, AH };

inline std::string fd_method_name(FdMethod m) {
  switch (m) {
    case FdMethod::AT: return "AT";
    case FdMethod::FN: return "FN";
    case FdMethod::FSP: return "FSP";
    case FdMethod::SP: return "SP";
    case FdMethod::AH: return "AH";
  }
  return "?";
}

inline FdMethod fd_method_from_name(const std::string& s) {
  if (s == "AT") return FdMethod::AT;
  if (s == "FN") return FdMethod::FN;
  if (s == "FSP") return FdMethod::FSP;
  if (s == "SP") return FdMethod::SP;
  if (s == "AH") return FdMethod::AH;
  throw ConfigError("unknown feature-distillation method '" + s + "'");
}

struct TapPair {
  TapRef teacher, student;
};

// FSP compares the flow matrix between two layers of each network.
struct FspPair {
  TapRef teacher_first, teacher_second;
  TapRef student_first, student_second;
};

struct DistillationPlan {
  FdMethod method = FdMethod::AT;
  std::vector<TapPair> pairs;
  std::vector<FspPair> fsp_pairs;

  FeatureTapSet teacher_taps() const {
    FeatureTapSet t;
    if (method == FdMethod::FSP) {
      for (const auto& p : fsp_pairs) {
        t.push_back(p.teacher_first);
        t.push_back(p.teacher_second);
      }
    } else {
      for (const auto& p : pairs) t.push_back(p.teacher);
    }
    return t;
  }
  FeatureTapSet student_taps() const {
    FeatureTapSet t;
    if (method == FdMethod::FSP) {
      for (const auto& p : fsp_pairs) {
        t.push_back(p.student_first);
        t.push_back(p.student_second);
      }
    } else {
      for (const auto& p : pairs) t.push_back(p.student);
    }
    return t;
  }
};

// Default tap positions: the convolution at the center of every cascade;
// for FSP, the first and penultimate convolutions of every cascade.
inline DistillationPlan default_plan(FdMethod method, const CascadeConfig& teacher,
                                     const CascadeConfig& student) {
  if (teacher.n_cascades != student.n_cascades)
    throw ConfigError("default_plan: cascade counts differ");
  DistillationPlan plan;
  plan.method = method;
  for (int c = 1; c <= teacher.n_cascades; ++c) {
    if (method == FdMethod::FSP) {
      plan.fsp_pairs.push_back({{c, 1},
                                {c, teacher.n_convs - 1},
                                {c, 1},
                                {c, student.n_convs - 1}});
    } else {
      plan.pairs.push_back(
          {{c, center_conv_index(teacher.n_convs)}, {c, center_conv_index(student.n_convs)}});
    }
  }
  return plan;
}

inline DistillationPlan default_vdsr_plan(const VdsrConfig& teacher, const VdsrConfig& student) {
  DistillationPlan plan;
  plan.method = FdMethod::AT;
  plan.pairs.push_back(
      {{1, center_conv_index(teacher.n_layers)}, {1, center_conv_index(student.n_layers)}});
  return plan;
}

inline nlohmann::json plan_to_json(const DistillationPlan& p) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& q : p.pairs)
    pairs.push_back({{"teacher", {q.teacher.cascade, q.teacher.conv}},
                     {"student", {q.student.cascade, q.student.conv}}});
  nlohmann::json fsp = nlohmann::json::array();
  for (const auto& q : p.fsp_pairs)
    fsp.push_back({{"teacher_first", {q.teacher_first.cascade, q.teacher_first.conv}},
                   {"teacher_second", {q.teacher_second.cascade, q.teacher_second.conv}},
                   {"student_first", {q.student_first.cascade, q.student_first.conv}},
                   {"student_second", {q.student_second.cascade, q.student_second.conv}}});
  return {{"method", fd_method_name(p.method)}, {"pairs", pairs}, {"fsp_pairs", fsp}};
}

inline DistillationPlan plan_from_json(const nlohmann::json& j) {
  DistillationPlan p;
  p.method = fd_method_from_name(j.at("method").get<std::string>());
  auto tap = [](const nlohmann::json& a) { return TapRef{a.at(0).get<int>(), a.at(1).get<int>()}; };
  for (const auto& q : j.value("pairs", nlohmann::json::array()))
    p.pairs.push_back({tap(q.at("teacher")), tap(q.at("student"))});
  for (const auto& q : j.value("fsp_pairs", nlohmann::json::array()))
    p.fsp_pairs.push_back({tap(q.at("teacher_first")), tap(q.at("teacher_second")),
                           tap(q.at("student_first")), tap(q.at("student_second"))});
  return p;
}

// ---------------------------------------------------------------------------
// Attention transfer

// F_sum(A): elementwise sum over channels of squared activations.
template <class T>
Grid2D<T> attention_map(const FeatureMap<T>& f) {
  Grid2D<T> q(f.h, f.w, T(0));
  for (int c = 0; c < f.c; ++c) {
    const T* src = f.channel(c);
    for (size_t i = 0; i < q.size(); ++i) q.v[i] += src[i] * src[i];
  }
  return q;
}

// dL/dA given dL/dQ.
template <class T>
FeatureMap<T> attention_map_backward(const FeatureMap<T>& f, const Grid2D<T>& grad_q) {
  FeatureMap<T> g(f.c, f.h, f.w);
  for (int c = 0; c < f.c; ++c) {
    const T* src = f.channel(c);
    T* dst = g.channel(c);
    for (size_t i = 0; i < grad_q.size(); ++i) dst[i] = T(2) * src[i] * grad_q.v[i];
  }
  return g;
}

namespace detail {

// L2 distance of the L2-normalized vectorized maps. grad_s, when non-null,
// receives d loss / d q_s. A zero-norm map is an error: it indicates a dead
// network and must surface instead of silently contributing zero.
template <class T>
double at_pair_distance(const Grid2D<T>& q_s, const Grid2D<T>& q_t, Grid2D<T>* grad_s) {
  if (!q_s.same_shape(q_t)) throw InvalidInputError("at_loss: paired map shapes differ");
  const double ns = num::l2_norm(q_s), nt = num::l2_norm(q_t);
  if (ns == 0.0 || nt == 0.0)
    throw DegenerateInputError("at_loss: attention map has zero norm");
  double dot = 0;
  for (size_t i = 0; i < q_s.size(); ++i)
    dot += static_cast<double>(q_s.v[i]) / ns * static_cast<double>(q_t.v[i]) / nt;
  double d2 = 0;
  for (size_t i = 0; i < q_s.size(); ++i) {
    const double u = q_s.v[i] / ns, v = q_t.v[i] / nt;
    d2 += (u - v) * (u - v);
  }
  const double d = std::sqrt(d2);
  if (grad_s) {
    *grad_s = Grid2D<T>(q_s.h, q_s.w, T(0));
    if (d > 1e-12) {
      // d/dq ||u - v|| with u = q/||q||:  (u (u.v) - v) / (d ||q||)
      for (size_t i = 0; i < q_s.size(); ++i) {
        const double u = q_s.v[i] / ns, v = q_t.v[i] / nt;
        grad_s->v[i] = static_cast<T>((u * dot - v) / (d * ns));
      }
    }
  }
  return d;
}

}  // namespace detail

// Eq-style attention-transfer loss: sum over pairs of the L2 distance
// between L2-normalized vectorized attention maps. Bounded by 2 * |pairs|.
template <class T>
double at_loss(const std::vector<Grid2D<T>>& student_maps,
               const std::vector<Grid2D<T>>& teacher_maps,
               std::vector<Grid2D<T>>* grads = nullptr) {
  if (student_maps.size() != teacher_maps.size() || student_maps.empty())
    throw InvalidInputError("at_loss: need equally many student and teacher maps (>= 1)");
  if (grads) grads->resize(student_maps.size());
  double loss = 0;
  for (size_t j = 0; j < student_maps.size(); ++j)
    loss += detail::at_pair_distance(student_maps[j], teacher_maps[j],
                                     grads ? &(*grads)[j] : nullptr);
  return loss;
}

// Convenience: attention-transfer loss directly on paired feature maps,
// with gradients w.r.t. the student features.
template <class T>
double at_loss_on_features(const std::vector<FeatureMap<T>>& student,
                           const std::vector<FeatureMap<T>>& teacher,
                           std::vector<FeatureMap<T>>* grads = nullptr) {
  if (student.size() != teacher.size() || student.empty())
    throw InvalidInputError("at_loss: need equally many student and teacher features");
  std::vector<Grid2D<T>> qs(student.size()), qt(student.size());
  for (size_t j = 0; j < student.size(); ++j) {
    if (student[j].h != teacher[j].h || student[j].w != teacher[j].w)
      throw InvalidInputError("at_loss: paired features must share spatial size");
    qs[j] = attention_map(student[j]);
    qt[j] = attention_map(teacher[j]);
  }
  std::vector<Grid2D<T>> gq;
  const double loss = at_loss(qs, qt, grads ? &gq : nullptr);
  if (grads) {
    grads->resize(student.size());
    for (size_t j = 0; j < student.size(); ++j)
      (*grads)[j] = attention_map_backward(student[j], gq[j]);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Output-space losses

enum class RecNorm { Mse, L1 };

inline RecNorm rec_norm_from_name(const std::string& s) {
  if (s == "mse") return RecNorm::Mse;
  if (s == "l1") return RecNorm::L1;
  throw ConfigError("unknown reconstruction norm '" + s + "' (expected mse or l1)");
}
inline std::string rec_norm_name(RecNorm n) { return n == RecNorm::Mse ? "mse" : "l1"; }

// Mean reduction over pixels; grad, when non-null, is accumulated with the
// given scale factor.
template <class T>
double pixel_loss(const Grid2D<T>& pred, const Grid2D<T>& target, RecNorm norm,
                  Grid2D<T>* grad = nullptr, double grad_scale = 1.0) {
  if (!pred.same_shape(target)) throw InvalidInputError("pixel loss: shape mismatch");
  const double n = static_cast<double>(pred.size());
  double loss = 0;
  if (grad && !grad->same_shape(pred)) *grad = Grid2D<T>(pred.h, pred.w, T(0));
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.v[i]) - static_cast<double>(target.v[i]);
    if (norm == RecNorm::Mse) {
      loss += d * d;
      if (grad) grad->v[i] += static_cast<T>(grad_scale * 2.0 * d / n);
    } else {
      loss += std::abs(d);
      if (grad) grad->v[i] += static_cast<T>(grad_scale * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n);
    }
  }
  return loss / n;
}

// || x_rec_T - x_rec_S ||, reduced as a pixel mean.
template <class T>
double imitation_loss(const Grid2D<T>& student_out, const Grid2D<T>& teacher_out,
                      RecNorm norm = RecNorm::Mse, Grid2D<T>* grad_student = nullptr,
                      double grad_scale = 1.0) {
  return pixel_loss(student_out, teacher_out, norm, grad_student, grad_scale);
}

struct LossWeights {
  double alpha = 0.5;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  }
};

// alpha * L_rec + (1 - alpha) * L_imit.
template <class T>
double total_student_loss(const Grid2D<T>& student_out, const Grid2D<T>& target,
                          const Grid2D<T>& teacher_out, const LossWeights& w,
                          RecNorm norm = RecNorm::Mse, Grid2D<T>* grad_student = nullptr) {
  w.validate();
  if (grad_student) *grad_student = Grid2D<T>(student_out.h, student_out.w, T(0));
  const double rec = pixel_loss(student_out, target, norm, grad_student, w.alpha);
  const double imit = imitation_loss(student_out, teacher_out, norm, grad_student, 1.0 - w.alpha);
  return w.alpha * rec + (1.0 - w.alpha) * imit;
}

// ---------------------------------------------------------------------------
// FitNets

// 1x1 convolution mapping student channels onto teacher channels for hint
// regression; trained jointly during hint pre-training, then discarded.
template <class T>
struct ChannelAdapter {
  ConvSpec spec;
  std::vector<T> params;

  static ChannelAdapter identity() { return {}; }
  bool is_identity() const { return params.empty(); }

  static ChannelAdapter make(int in_ch, int out_ch, uint64_t seed) {
    ChannelAdapter a;
    a.spec.in_ch = in_ch;
    a.spec.out_ch = out_ch;
    a.spec.kernel = 1;
    a.spec.w_off = 0;
    a.spec.b_off = static_cast<size_t>(in_ch) * out_ch;
    a.params.assign(a.spec.weight_count() + a.spec.bias_count(), T(0));
    Rng rng(mix_seed(seed, 0xada9u));
    const double std_dev = std::sqrt(2.0 / in_ch);
    for (size_t i = 0; i < a.spec.weight_count(); ++i)
      a.params[i] = static_cast<T>(rng.normal() * std_dev);
    return a;
  }
};

// MSE between (adapted) student features and teacher features. grad_student
// is assigned; grad_adapter, when given, is accumulated (same layout as
// adapter.params).
template <class T>
double fitnet_loss(const FeatureMap<T>& student, const FeatureMap<T>& teacher,
                   const ChannelAdapter<T>& adapter = {}, FeatureMap<T>* grad_student = nullptr,
                   std::vector<T>* grad_adapter = nullptr, double grad_scale = 1.0) {
  if (student.h != teacher.h || student.w != teacher.w)
    throw InvalidInputError("fitnet_loss: incompatible spatial sizes");
  Workspace<T> ws;
  FeatureMap<T> adapted;
  const FeatureMap<T>* pred = &student;
  if (!adapter.is_identity()) {
    if (adapter.spec.in_ch != student.c || adapter.spec.out_ch != teacher.c)
      throw InvalidInputError("fitnet_loss: adapter channel mismatch");
    conv_forward(adapter.spec, adapter.params.data(), student, adapted, ws);
    pred = &adapted;
  } else if (student.c != teacher.c) {
    throw InvalidInputError("fitnet_loss: channel counts differ and no adapter given");
  }

  const double n = static_cast<double>(pred->size());
  double loss = 0;
  FeatureMap<T> grad_pred;
  const bool want_grad = grad_student || grad_adapter;
  if (want_grad) grad_pred = FeatureMap<T>(pred->c, pred->h, pred->w);
  for (size_t i = 0; i < pred->size(); ++i) {
    const double d = static_cast<double>(pred->v[i]) - static_cast<double>(teacher.v[i]);
    loss += d * d;
    if (want_grad) grad_pred.v[i] = static_cast<T>(grad_scale * 2.0 * d / n);
  }
  loss /= n;

  if (want_grad) {
    if (!adapter.is_identity()) {
      if (grad_adapter && grad_adapter->size() != adapter.params.size())
        grad_adapter->assign(adapter.params.size(), T(0));
      conv_backward(adapter.spec, adapter.params.data(), student, grad_pred, grad_student,
                    grad_adapter ? grad_adapter->data() : nullptr, ws);
    } else if (grad_student) {
      *grad_student = std::move(grad_pred);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// FSP

// G[i][j] = (1/(H W)) sum_p a_i(p) b_j(p).
template <class T>
Grid2D<T> fsp_matrix(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  if (a.h != b.h || a.w != b.w) throw InvalidInputError("fsp_matrix: spatial size mismatch");
  const size_t plane = a.plane();
  Grid2D<T> g(a.c, b.c, T(0));
  detail::CMapRM<T> A(a.data(), a.c, static_cast<Eigen::Index>(plane));
  detail::CMapRM<T> B(b.data(), b.c, static_cast<Eigen::Index>(plane));
  detail::MapRM<T> G(g.data(), a.c, b.c);
  G.noalias() = A * B.transpose();
  const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
  for (auto& x : g.v) x *= inv;
  return g;
}

// Mean squared difference between student and teacher FSP matrices, summed
// over the pair set. Gradients are w.r.t. the two student feature blocks of
// each pair, appended to *grads in (first, second) order.
template <class T>
double fsp_loss(const std::vector<std::pair<FeatureMap<T>, FeatureMap<T>>>& student_pairs,
                const std::vector<std::pair<FeatureMap<T>, FeatureMap<T>>>& teacher_pairs,
                std::vector<std::pair<FeatureMap<T>, FeatureMap<T>>>* grads = nullptr) {
  if (student_pairs.size() != teacher_pairs.size() || student_pairs.empty())
    throw InvalidInputError("fsp_loss: need equally many student and teacher pairs");
  if (grads) grads->resize(student_pairs.size());
  double loss = 0;
  for (size_t j = 0; j < student_pairs.size(); ++j) {
    const auto& [s1, s2] = student_pairs[j];
    const auto& [t1, t2] = teacher_pairs[j];
    auto gs = fsp_matrix(s1, s2);
    auto gt = fsp_matrix(t1, t2);
    if (!gs.same_shape(gt)) throw InvalidInputError("fsp_loss: matrix shapes differ");
    const double n = static_cast<double>(gs.size());
    Grid2D<T> dg(gs.h, gs.w);
    for (size_t i = 0; i < gs.size(); ++i) {
      const double d = static_cast<double>(gs.v[i]) - static_cast<double>(gt.v[i]);
      loss += d * d / n;
      dg.v[i] = static_cast<T>(2.0 * d / n);
    }
    if (grads) {
      const size_t plane = s1.plane();
      auto& [g1, g2] = (*grads)[j];
      g1 = FeatureMap<T>(s1.c, s1.h, s1.w);
      g2 = FeatureMap<T>(s2.c, s2.h, s2.w);
      detail::CMapRM<T> DG(dg.data(), gs.h, gs.w);
      detail::CMapRM<T> S1(s1.data(), s1.c, static_cast<Eigen::Index>(plane));
      detail::CMapRM<T> S2(s2.data(), s2.c, static_cast<Eigen::Index>(plane));
      detail::MapRM<T> G1(g1.data(), g1.c, static_cast<Eigen::Index>(plane));
      detail::MapRM<T> G2(g2.data(), g2.c, static_cast<Eigen::Index>(plane));
      const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
      G1.noalias() = DG * S2 * inv;
      G2.noalias() = DG.transpose() * S1 * inv;
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Similarity preserving

// Row-normalized batch Gram matrices of flattened activations;
// loss = ||G_S - G_T||_F^2 / B^2.
template <class T>
double sp_loss(const std::vector<FeatureMap<T>>& student_batch,
               const std::vector<FeatureMap<T>>& teacher_batch,
               std::vector<FeatureMap<T>>* grads = nullptr) {
  const size_t B = student_batch.size();
  if (B < 2) throw DegenerateInputError("sp_loss: batch size must be >= 2");
  if (teacher_batch.size() != B)
    throw InvalidInputError("sp_loss: student/teacher batch sizes differ");

  auto gram_normalized = [](const std::vector<FeatureMap<T>>& batch,
                            std::vector<std::vector<double>>& gram,
                            std::vector<double>& row_norm) {
    const size_t B = batch.size();
    gram.assign(B, std::vector<double>(B, 0.0));
    row_norm.assign(B, 0.0);
    for (size_t i = 0; i < B; ++i)
      for (size_t j = 0; j < B; ++j) {
        if (batch[i].size() != batch[j].size())
          throw InvalidInputError("sp_loss: samples must share feature shape");
        double s = 0;
        for (size_t k = 0; k < batch[i].size(); ++k)
          s += static_cast<double>(batch[i].v[k]) * static_cast<double>(batch[j].v[k]);
        gram[i][j] = s;
      }
    for (size_t i = 0; i < B; ++i) {
      double n = 0;
      for (size_t j = 0; j < B; ++j) n += gram[i][j] * gram[i][j];
      row_norm[i] = std::sqrt(n);
      if (row_norm[i] > 0)
        for (size_t j = 0; j < B; ++j) gram[i][j] /= row_norm[i];
    }
  };

  std::vector<std::vector<double>> gs, gt;
  std::vector<double> ns, nt;
  gram_normalized(student_batch, gs, ns);
  gram_normalized(teacher_batch, gt, nt);

  double loss = 0;
  for (size_t i = 0; i < B; ++i)
    for (size_t j = 0; j < B; ++j) {
      const double d = gs[i][j] - gt[i][j];
      loss += d * d;
    }
  loss /= static_cast<double>(B) * static_cast<double>(B);

  if (grads) {
    // dL/dGtilde -> dL/dG (per-row normalization) -> dL/dR = (dG + dG^T) R
    std::vector<std::vector<double>> dgt(B, std::vector<double>(B, 0.0));
    for (size_t i = 0; i < B; ++i)
      for (size_t j = 0; j < B; ++j)
        dgt[i][j] = 2.0 * (gs[i][j] - gt[i][j]) / (static_cast<double>(B) * B);
    std::vector<std::vector<double>> dg(B, std::vector<double>(B, 0.0));
    for (size_t i = 0; i < B; ++i) {
      if (ns[i] == 0) continue;
      double dot = 0;
      for (size_t j = 0; j < B; ++j) dot += gs[i][j] * dgt[i][j];
      for (size_t j = 0; j < B; ++j) dg[i][j] = (dgt[i][j] - gs[i][j] * dot) / ns[i];
    }
    grads->resize(B);
    for (size_t i = 0; i < B; ++i) {
      (*grads)[i] = FeatureMap<T>(student_batch[i].c, student_batch[i].h, student_batch[i].w);
      for (size_t j = 0; j < B; ++j) {
        const double coeff = dg[i][j] + dg[j][i];
        if (coeff == 0) continue;
        const auto& rj = student_batch[j];
        for (size_t k = 0; k < rj.size(); ++k)
          (*grads)[i].v[k] += static_cast<T>(coeff * rj.v[k]);
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Attentive hints

// w_i = exp(-beta * mse_i / mean_mse); an exact teacher gets the maximal
// weight 1, larger teacher errors get strictly smaller weights.
template <class T>
std::vector<double> attentive_hint_weights(const std::vector<Grid2D<T>>& teacher_out,
                                           const std::vector<Grid2D<T>>& target,
                                           double beta = 1.0) {
  if (teacher_out.size() != target.size() || teacher_out.empty())
    throw InvalidInputError("attentive_hint_weights: batch size mismatch");
  std::vector<double> mse(teacher_out.size());
  double mean = 0;
  for (size_t i = 0; i < teacher_out.size(); ++i) {
    mse[i] = num::mse(teacher_out[i], target[i]);
    mean += mse[i];
  }
  mean /= static_cast<double>(mse.size());
  std::vector<double> w(mse.size(), 1.0);
  if (mean > 0)
    for (size_t i = 0; i < mse.size(); ++i) w[i] = std::exp(-beta * mse[i] / mean);
  return w;
}

}  // namespace kdmri
