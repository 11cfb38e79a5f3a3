#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "kdmri/metrics.hpp"
#include "kdmri/png.hpp"
#include "kdmri/training.hpp"

namespace kdmri {

// Shared setup for the desk-scale experiment drivers. The same TrainConfig
// is reused across stages with the per-run seed patched in.
struct ExperimentSetup {
  CascadeConfig teacher_cfg{3, 5, 32, 3, kHardDc};
  CascadeConfig student_cfg{3, 3, 32, 3, kHardDc};
  TrainConfig train;
  std::vector<uint64_t> seeds{1, 2, 3};
  std::string out_dir;
};

// ---------------------------------------------------------------------------
// Evaluation

template <class T>
MetricsReport evaluate_model(const NetworkParameters<T>& params,
                             const std::vector<ReconSample<T>>& samples,
                             const SamplingMask& mask, const std::string& tag) {
  MetricsReport rep;
  rep.model_tag = tag;
  rep.acceleration = mask.acceleration;
  rep.mask_hash = mask.hash_hex();
  rep.slice_ids.resize(samples.size());
  rep.psnr_db.resize(samples.size());
  rep.ssim_val.resize(samples.size());
  detail::parallel_for(samples.size(), [&](size_t i) {
    const auto& s = samples[i];
    auto out = forward_dccnn(params, s.zero_filled, s.measured, mask);
    auto rec = real_part(out.reconstruction);
    rep.slice_ids[i] = s.id;
    rep.psnr_db[i] = psnr(rec, s.target);
    rep.ssim_val[i] = ssim(rec, s.target);
  });
  rep.compute_aggregates();
  return rep;
}

// Zero-filled baseline row.
template <class T>
MetricsReport evaluate_zero_filled(const std::vector<ReconSample<T>>& samples,
                                   const SamplingMask& mask) {
  MetricsReport rep;
  rep.model_tag = "zf";
  rep.acceleration = mask.acceleration;
  rep.mask_hash = mask.hash_hex();
  rep.slice_ids.resize(samples.size());
  rep.psnr_db.resize(samples.size());
  rep.ssim_val.resize(samples.size());
  detail::parallel_for(samples.size(), [&](size_t i) {
    auto zf = real_part(samples[i].zero_filled);
    rep.slice_ids[i] = samples[i].id;
    rep.psnr_db[i] = psnr(zf, samples[i].target);
    rep.ssim_val[i] = ssim(zf, samples[i].target);
  });
  rep.compute_aggregates();
  return rep;
}

template <class T>
MetricsReport evaluate_vdsr_model(const NetworkParameters<T>& params,
                                  const std::vector<SrSample<T>>& samples,
                                  const std::string& tag) {
  MetricsReport rep;
  rep.model_tag = tag;
  rep.slice_ids.resize(samples.size());
  rep.psnr_db.resize(samples.size());
  rep.ssim_val.resize(samples.size());
  detail::parallel_for(samples.size(), [&](size_t i) {
    auto out = forward_vdsr(params, real_part(samples[i].interpolated_lr));
    rep.slice_ids[i] = samples[i].id;
    rep.psnr_db[i] = psnr(out.hr, samples[i].target);
    rep.ssim_val[i] = ssim(out.hr, samples[i].target);
  });
  rep.compute_aggregates();
  return rep;
}

// ---------------------------------------------------------------------------
// Teacher pool: teachers are deterministic in (config, data, seed), so the
// drivers share them.

template <class T>
class TeacherPool {
 public:
  TeacherPool(const ExperimentSetup& setup, const ReconData<T>& data)
      : setup_(setup), data_(data) {}

  const CheckpointRecord<T>& get(uint64_t seed) {
    auto it = cache_.find(seed);
    if (it != cache_.end()) return it->second;
    TrainConfig cfg = setup_.train;
    cfg.seed = seed;
    cfg.out_dir.clear();
    auto res = train_teacher(cfg, setup_.teacher_cfg, data_);
    return cache_.emplace(seed, std::move(res.best)).first->second;
  }

  void put(uint64_t seed, CheckpointRecord<T> rec) { cache_[seed] = std::move(rec); }

 private:
  const ExperimentSetup& setup_;
  const ReconData<T>& data_;
  std::map<uint64_t, CheckpointRecord<T>> cache_;
};

namespace detail {

inline std::ofstream open_csv(const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / name);
  if (!f) throw DataError("experiments: cannot write " + name + " in " + dir);
  return f;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Teacher / plain-student / KD-student comparison (Algorithm-1 pipeline)

template <class T>
struct KdStudyResult {
  struct PerSeed {
    uint64_t seed = 0;
    MetricsReport teacher, plain, kd;
  };
  std::vector<PerSeed> per_seed;
  double mean_teacher_psnr = 0, mean_plain_psnr = 0, mean_kd_psnr = 0;
};

template <class T>
KdStudyResult<T> kd_study(const ExperimentSetup& setup, const ReconData<T>& data,
                          TeacherPool<T>& teachers) {
  KdStudyResult<T> result;
  const auto plan = default_plan(FdMethod::AT, setup.teacher_cfg, setup.student_cfg);
  for (uint64_t seed : setup.seeds) {
    TrainConfig cfg = setup.train;
    cfg.seed = seed;
    cfg.out_dir.clear();
    const auto& teacher = teachers.get(seed);
    auto plain = train_student_plain(cfg, setup.student_cfg, data);
    auto at = train_student_at(cfg, setup.student_cfg, teacher, data, plan);
    auto kd = finetune_student_kd(cfg, teacher, at.last, data);

    typename KdStudyResult<T>::PerSeed row;
    row.seed = seed;
    row.teacher = evaluate_model(teacher.params, data.val, data.mask, "teacher");
    row.plain = evaluate_model(plain.best.params, data.val, data.mask, "student");
    row.kd = evaluate_model(kd.best.params, data.val, data.mask, "kd");
    result.per_seed.push_back(std::move(row));
  }
  for (const auto& r : result.per_seed) {
    result.mean_teacher_psnr += r.teacher.psnr_mean;
    result.mean_plain_psnr += r.plain.psnr_mean;
    result.mean_kd_psnr += r.kd.psnr_mean;
  }
  const double n = static_cast<double>(result.per_seed.size());
  result.mean_teacher_psnr /= n;
  result.mean_plain_psnr /= n;
  result.mean_kd_psnr /= n;

  if (!setup.out_dir.empty()) {
    auto f = detail::open_csv(setup.out_dir, "kd_study.csv");
    f << "seed,model,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
    char buf[192];
    for (const auto& r : result.per_seed) {
      for (const auto* rep : {&r.teacher, &r.plain, &r.kd}) {
        std::snprintf(buf, sizeof buf, "%llu,%s,%.4f,%.4f,%.6f,%.6f\n",
                      static_cast<unsigned long long>(r.seed), rep->model_tag.c_str(),
                      rep->psnr_mean, rep->psnr_std, rep->ssim_mean, rep->ssim_std);
        f << buf;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Feature-distillation method comparison: pre-train with each method, then
// fine-tune on the reconstruction loss alone (alpha = 1).

template <class T>
struct CompareFdResult {
  std::vector<std::string> methods;
  struct PerSeed {
    uint64_t seed = 0;
    std::map<std::string, std::vector<double>> finetune_val;  // per-epoch recon MSE
    std::map<std::string, double> final_val;
    std::map<std::string, MetricsReport> metrics;
    std::vector<double> teacher_val, student_val;  // context curves
  };
  std::vector<PerSeed> per_seed;
};

template <class T>
CompareFdResult<T> compare_fd(const ExperimentSetup& setup, const ReconData<T>& data,
                              TeacherPool<T>& teachers,
                              const std::vector<FdMethod>& methods = {
                                  FdMethod::FN, FdMethod::FSP, FdMethod::SP, FdMethod::AH,
                                  FdMethod::AT}) {
  CompareFdResult<T> result;
  for (auto m : methods) result.methods.push_back(fd_method_name(m));

  for (uint64_t seed : setup.seeds) {
    TrainConfig cfg = setup.train;
    cfg.seed = seed;
    cfg.out_dir.clear();
    const auto& teacher = teachers.get(seed);
    typename CompareFdResult<T>::PerSeed row;
    row.seed = seed;

    auto plain = train_student_plain(cfg, setup.student_cfg, data);
    for (const auto& e : plain.last.history) row.student_val.push_back(e.val_loss);
    for (const auto& e : teacher.history) row.teacher_val.push_back(e.val_loss);

    for (FdMethod m : methods) {
      const auto plan = default_plan(m, setup.teacher_cfg, setup.student_cfg);
      auto pre = pretrain_student_fd(cfg, setup.student_cfg, teacher, data, plan);
      TrainConfig fcfg = cfg;
      fcfg.alpha = 1.0;  // fine-tuning ignores the imitation loss
      auto fine = finetune_student_kd(fcfg, teacher, pre.last, data);
      const std::string name = fd_method_name(m);
      for (const auto& e : fine.last.history) row.finetune_val[name].push_back(e.val_loss);
      row.final_val[name] = fine.last.history.back().val_loss;
      row.metrics[name] = evaluate_model(fine.best.params, data.val, data.mask, name);
    }
    result.per_seed.push_back(std::move(row));
  }

  if (!setup.out_dir.empty()) {
    char buf[256];
    for (const auto& row : result.per_seed) {
      auto f = detail::open_csv(setup.out_dir,
                                "fd_val_loss_seed" + std::to_string(row.seed) + ".csv");
      f << "epoch,teacher,student";
      for (const auto& m : result.methods) f << "," << m;
      f << "\n";
      const size_t epochs = row.student_val.size();
      for (size_t e = 0; e < epochs; ++e) {
        std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g", e + 1,
                      e < row.teacher_val.size() ? row.teacher_val[e] : 0.0,
                      row.student_val[e]);
        f << buf;
        for (const auto& m : result.methods) {
          std::snprintf(buf, sizeof buf, ",%.10g", row.finetune_val.at(m)[e]);
          f << buf;
        }
        f << "\n";
      }
    }
    auto f = detail::open_csv(setup.out_dir, "fd_metrics.csv");
    f << "seed,method,final_val_loss,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
    for (const auto& row : result.per_seed)
      for (const auto& m : result.methods) {
        const auto& rep = row.metrics.at(m);
        std::snprintf(buf, sizeof buf, "%llu,%s,%.10g,%.4f,%.4f,%.6f,%.6f\n",
                      static_cast<unsigned long long>(row.seed), m.c_str(),
                      row.final_val.at(m), rep.psnr_mean, rep.psnr_std, rep.ssim_mean,
                      rep.ssim_std);
        f << buf;
      }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Loss-combination ablation

template <class T>
struct AblationResult {
  struct PerSeed {
    uint64_t seed = 0;
    std::map<std::string, double> final_val;                 // recon MSE
    std::map<std::string, std::vector<double>> val_curves;
  };
  std::vector<PerSeed> per_seed;
};

template <class T>
AblationResult<T> ablation_study(const ExperimentSetup& setup, const ReconData<T>& data,
                                 TeacherPool<T>& teachers) {
  using objectives::AblationCombo;
  AblationResult<T> result;
  const auto plan = default_plan(FdMethod::AT, setup.teacher_cfg, setup.student_cfg);
  for (uint64_t seed : setup.seeds) {
    TrainConfig cfg = setup.train;
    cfg.seed = seed;
    cfg.out_dir.clear();
    const auto& teacher = teachers.get(seed);
    typename AblationResult<T>::PerSeed row;
    row.seed = seed;
    for (AblationCombo combo : {AblationCombo::Rec, AblationCombo::RecImit,
                                AblationCombo::RecAt, AblationCombo::RecImitAt}) {
      auto res = train_student_ablation(cfg, setup.student_cfg, teacher, data, combo, plan);
      const auto name = objectives::ablation_name(combo);
      for (const auto& e : res.last.history) row.val_curves[name].push_back(e.val_loss);
      row.final_val[name] = res.last.history.back().val_loss;
    }
    result.per_seed.push_back(std::move(row));
  }

  if (!setup.out_dir.empty()) {
    char buf[192];
    auto f = detail::open_csv(setup.out_dir, "ablation_final.csv");
    f << "seed,combo,final_val_loss\n";
    for (const auto& row : result.per_seed)
      for (const auto& [name, v] : row.final_val) {
        std::snprintf(buf, sizeof buf, "%llu,%s,%.10g\n",
                      static_cast<unsigned long long>(row.seed), name.c_str(), v);
        f << buf;
      }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Distillation-position sweep (which conv pair to supervise)

struct PositionSweepRow {
  int teacher_conv = 0, student_conv = 0;
  std::string label;
  double psnr_mean = 0, psnr_std = 0, ssim_mean = 0, ssim_std = 0;
};

template <class T>
std::vector<PositionSweepRow> position_sweep(const ExperimentSetup& setup,
                                             const ReconData<T>& data, TeacherPool<T>& teachers,
                                             const std::vector<int>& teacher_layers,
                                             const std::vector<int>& student_layers) {
  std::vector<PositionSweepRow> rows;
  const uint64_t seed = setup.seeds.empty() ? 1 : setup.seeds.front();
  TrainConfig cfg = setup.train;
  cfg.seed = seed;
  cfg.out_dir.clear();
  const auto& teacher = teachers.get(seed);
  {
    auto rep = evaluate_model(teacher.params, data.val, data.mask, "teacher");
    rows.push_back({0, 0, "teacher", rep.psnr_mean, rep.psnr_std, rep.ssim_mean, rep.ssim_std});
  }
  {
    auto plain = train_student_plain(cfg, setup.student_cfg, data);
    auto rep = evaluate_model(plain.best.params, data.val, data.mask, "student");
    rows.push_back({0, 0, "student", rep.psnr_mean, rep.psnr_std, rep.ssim_mean, rep.ssim_std});
  }
  for (int tl : teacher_layers) {
    for (int sl : student_layers) {
      DistillationPlan plan;
      plan.method = FdMethod::AT;
      for (int c = 1; c <= setup.teacher_cfg.n_cascades; ++c)
        plan.pairs.push_back({{c, tl}, {c, sl}});
      auto at = train_student_at(cfg, setup.student_cfg, teacher, data, plan);
      auto kd = finetune_student_kd(cfg, teacher, at.last, data);
      auto rep = evaluate_model(kd.best.params, data.val, data.mask, "kd");
      PositionSweepRow row;
      row.teacher_conv = tl;
      row.student_conv = sl;
      row.label = "AT" + std::to_string(tl) + std::to_string(sl);
      row.psnr_mean = rep.psnr_mean;
      row.psnr_std = rep.psnr_std;
      row.ssim_mean = rep.ssim_mean;
      row.ssim_std = rep.ssim_std;
      rows.push_back(std::move(row));
    }
  }

  if (!setup.out_dir.empty()) {
    auto f = detail::open_csv(setup.out_dir, "position_sweep.csv");
    f << "label,teacher_conv,student_conv,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
    char buf[192];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%d,%d,%.4f,%.4f,%.6f,%.6f\n", r.label.c_str(),
                    r.teacher_conv, r.student_conv, r.psnr_mean, r.psnr_std, r.ssim_mean,
                    r.ssim_std);
      f << buf;
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Attention-residue study: how close each model's attention maps are to the
// teacher's, per cascade, over the validation set.

struct ResidueRow {
  int cascade = 0;
  std::string slice_id;
  std::string model;  // "student" or "kd"
  double residue = 0; // || Q_model/||.|| - Q_teacher/||.|| ||_2
};

struct ResidueSummary {
  int cascade = 0;
  std::string model;
  double median = 0, q1 = 0, q3 = 0, mean = 0;
};

template <class T>
struct ResidueStudyResult {
  std::vector<ResidueRow> rows;
  std::vector<ResidueSummary> summary;
};

template <class T>
ResidueStudyResult<T> attention_residue_study(const CheckpointRecord<T>& teacher,
                                              const CheckpointRecord<T>& student,
                                              const CheckpointRecord<T>& kd,
                                              const std::vector<ReconSample<T>>& samples,
                                              const SamplingMask& mask,
                                              const std::string& out_dir = "") {
  const auto& tcfg = teacher.params.dccnn();
  const auto& scfg = student.params.dccnn();
  if (tcfg.n_cascades != scfg.n_cascades || scfg.n_cascades != kd.params.dccnn().n_cascades)
    throw InvalidInputError("residue study: cascade counts differ");

  FeatureTapSet teacher_taps, student_taps;
  for (int c = 1; c <= tcfg.n_cascades; ++c) {
    teacher_taps.push_back({c, center_conv_index(tcfg.n_convs)});
    student_taps.push_back({c, center_conv_index(scfg.n_convs)});
  }

  ResidueStudyResult<T> result;
  std::vector<std::vector<ResidueRow>> rows_per_sample(samples.size());
  detail::parallel_for(samples.size(), [&](size_t i) {
    const auto& s = samples[i];
    auto t_out = forward_dccnn(teacher.params, s.zero_filled, s.measured, mask, teacher_taps);
    auto s_out = forward_dccnn(student.params, s.zero_filled, s.measured, mask, student_taps);
    auto k_out = forward_dccnn(kd.params, s.zero_filled, s.measured, mask, student_taps);
    for (int c = 0; c < tcfg.n_cascades; ++c) {
      auto qt = attention_map(t_out.taps[static_cast<size_t>(c)]);
      auto qs = attention_map(s_out.taps[static_cast<size_t>(c)]);
      auto qk = attention_map(k_out.taps[static_cast<size_t>(c)]);
      rows_per_sample[i].push_back(
          {c + 1, s.id, "student", detail::at_pair_distance(qs, qt, static_cast<Grid2D<T>*>(nullptr))});
      rows_per_sample[i].push_back(
          {c + 1, s.id, "kd", detail::at_pair_distance(qk, qt, static_cast<Grid2D<T>*>(nullptr))});
    }
  });
  for (auto& rs : rows_per_sample)
    for (auto& r : rs) result.rows.push_back(std::move(r));

  auto quantile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(v.size() - 1, lo + 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  for (int c = 1; c <= tcfg.n_cascades; ++c) {
    for (const std::string model : {"student", "kd"}) {
      std::vector<double> vals;
      for (const auto& r : result.rows)
        if (r.cascade == c && r.model == model) vals.push_back(r.residue);
      ResidueSummary s;
      s.cascade = c;
      s.model = model;
      s.median = quantile(vals, 0.5);
      s.q1 = quantile(vals, 0.25);
      s.q3 = quantile(vals, 0.75);
      for (double v : vals) s.mean += v;
      s.mean /= static_cast<double>(vals.size());
      result.summary.push_back(std::move(s));
    }
  }

  if (!out_dir.empty()) {
    char buf[192];
    {
      auto f = detail::open_csv(out_dir, "residue_per_slice.csv");
      f << "cascade,slice_id,model,residue\n";
      for (const auto& r : result.rows) {
        std::snprintf(buf, sizeof buf, "%d,%s,%s,%.8f\n", r.cascade, r.slice_id.c_str(),
                      r.model.c_str(), r.residue);
        f << buf;
      }
    }
    {
      auto f = detail::open_csv(out_dir, "residue_summary.csv");
      f << "cascade,model,median,q1,q3,mean\n";
      for (const auto& s : result.summary) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.8f,%.8f,%.8f,%.8f\n", s.cascade,
                      s.model.c_str(), s.median, s.q1, s.q3, s.mean);
        f << buf;
      }
    }
    // qualitative dumps for the first validation slice: per cascade the
    // normalized teacher/student/kd attention maps and the two residues
    if (!samples.empty()) {
      const auto& s = samples.front();
      auto t_out = forward_dccnn(teacher.params, s.zero_filled, s.measured, mask, teacher_taps);
      auto s_out = forward_dccnn(student.params, s.zero_filled, s.measured, mask, student_taps);
      auto k_out = forward_dccnn(kd.params, s.zero_filled, s.measured, mask, student_taps);
      for (int c = 0; c < tcfg.n_cascades; ++c) {
        auto qt = attention_map(t_out.taps[static_cast<size_t>(c)]);
        auto qs = attention_map(s_out.taps[static_cast<size_t>(c)]);
        auto qk = attention_map(k_out.taps[static_cast<size_t>(c)]);
        auto norm = [](Grid2D<T> q) {
          const double n = num::l2_norm(q);
          if (n > 0)
            for (auto& x : q.v) x = static_cast<T>(x / n);
          return q;
        };
        qt = norm(qt);
        qs = norm(qs);
        qk = norm(qk);
        auto rs = residue_map(qs, qt);
        auto rk = residue_map(qk, qt);
        auto img = montage_row({to_gray8(qt), to_gray8(qs), to_gray8(qk), to_gray8(rs),
                                to_gray8(rk)});
        write_png_gray8((std::filesystem::path(out_dir) /
                         ("residue_cascade" + std::to_string(c + 1) + ".png")).string(),
                        img);
      }
    }
  }
  return result;
}

// Fig-3 style qualitative dump: input, target, recon per model, residues.
template <class T>
void write_qualitative_png(const std::string& path, const ReconSample<T>& s,
                           const std::vector<const NetworkParameters<T>*>& models,
                           const SamplingMask& mask) {
  std::vector<Grid2D<uint8_t>> tiles;
  auto zf = real_part(s.zero_filled);
  tiles.push_back(to_gray8(zf, 0.0, 1.0));
  tiles.push_back(to_gray8(s.target, 0.0, 1.0));
  std::vector<Grid2D<T>> recons;
  for (const auto* m : models) {
    auto out = forward_dccnn(*m, s.zero_filled, s.measured, mask);
    recons.push_back(real_part(out.reconstruction));
    tiles.push_back(to_gray8(recons.back(), 0.0, 1.0));
  }
  for (const auto& r : recons) tiles.push_back(to_gray8(residue_map(r, s.target)));
  write_png_gray8(path, montage_row(tiles));
}

}  // namespace kdmri
