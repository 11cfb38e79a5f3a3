// kdmri: knowledge-distillation experiments for compressed-sensing MRI
// reconstruction at desk scale. Subcommands cover mask/data generation, the
// three-step knowledge-transfer training procedure with its baselines and
// ablations, evaluation, method comparisons, the residue study, runtime
// benchmarks and the VDSR super-resolution variant.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "kdmri/experiments.hpp"
#include "kdmri/training.hpp"

using namespace kdmri;
namespace fs = std::filesystem;
using json = nlohmann::json;
using R = float;  // pipeline precision

namespace {

// exit codes: 0 success, 2 usage error, 3 training failure, 4 data error
constexpr int kExitUsage = 2;
constexpr int kExitTrainingFailure = 3;
constexpr int kExitData = 4;

std::string resolve_out(const std::string& path) {
  const char* root = std::getenv("KDC_OUT_DIR");
  if (root && *root && !path.empty() && !fs::path(path).is_absolute())
    return (fs::path(root) / path).string();
  return path;
}

json preset_defaults(const std::string& preset) {
  if (preset == "desk") {
    return json{
        {"teacher", {{"n_cascades", 3}, {"n_convs", 5}, {"channels", 32}}},
        {"student", {{"n_cascades", 3}, {"n_convs", 3}, {"channels", 32}}},
        {"vdsr_teacher", {{"n_layers", 5}, {"channels", 16}}},
        {"vdsr_student", {{"n_layers", 3}, {"channels", 16}}},
        {"sr_factor", 4},
        {"mask", {{"width", 48}, {"acceleration", 4.0}, {"center_lines", 4},
                  {"sigma_fraction", 0.15}, {"seed", 99}}},
        {"data", {{"count", 200}, {"size", 48}, {"seed", 1234}}},
        {"train", {{"epochs", 30}, {"learning_rate", 3e-3}, {"batch_size", 4},
                   {"alpha", 0.5}, {"at_weight", 1.0}, {"ah_beta", 1.0}, {"norm", "mse"},
                   {"seed", 1}, {"save_every_epoch", false}}},
        {"seeds", {1, 2, 3}}};
  }
  if (preset == "paper") {
    return json{
        {"teacher", {{"n_cascades", 5}, {"n_convs", 5}, {"channels", 32}}},
        {"student", {{"n_cascades", 5}, {"n_convs", 3}, {"channels", 32}}},
        {"vdsr_teacher", {{"n_layers", 11}, {"channels", 64}}},
        {"vdsr_student", {{"n_layers", 7}, {"channels", 64}}},
        {"sr_factor", 4},
        {"mask", {{"width", 160}, {"acceleration", 4.0}, {"center_lines", 10},
                  {"sigma_fraction", 0.15}, {"seed", 99}}},
        {"data", {{"count", 200}, {"size", 160}, {"seed", 1234}}},
        {"train", {{"epochs", 150}, {"learning_rate", 1e-4}, {"batch_size", 4},
                   {"alpha", 0.5}, {"at_weight", 1.0}, {"ah_beta", 1.0}, {"norm", "mse"},
                   {"seed", 1}, {"save_every_epoch", false}}},
        {"seeds", {1, 2, 3}}};
  }
  throw ConfigError("unknown preset '" + preset + "' (expected desk or paper)");
}

void merge_into(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_into(base[it.key()], *it);
    else
      base[it.key()] = *it;
  }
}

struct CommonOpts {
  std::string config_path;
  std::string preset = "desk";
  std::string out_dir;
  std::string dataset_dir;
  std::string mask_path;
  int epochs = -1;
  double lr = -1;
  int batch = -1;
  double alpha = -1;
  int64_t seed = -1;

  void attach(CLI::App* cmd, bool with_train_flags = true) {
    cmd->add_option("--config", config_path, "JSON run configuration");
    cmd->add_option("--preset", preset, "parameter preset: desk or paper");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--dataset", dataset_dir, "dataset directory (from data-gen)");
    cmd->add_option("--mask", mask_path, "mask JSON (from mask-gen)");
    if (with_train_flags) {
      cmd->add_option("--epochs", epochs, "training epochs");
      cmd->add_option("--lr", lr, "learning rate");
      cmd->add_option("--batch", batch, "batch size");
      cmd->add_option("--alpha", alpha, "Eq-4 blend weight");
      cmd->add_option("--seed", seed, "run seed");
    }
  }

  // preset defaults <- config file <- flags (flags win)
  json merged() const {
    json cfg = preset_defaults(preset);
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw ConfigError("cannot read config file " + config_path);
      json file_cfg;
      try {
        f >> file_cfg;
      } catch (const std::exception& e) {
        throw ConfigError("invalid JSON in " + config_path + ": " + e.what());
      }
      if (file_cfg.contains("preset") && file_cfg["preset"] != preset)
        cfg = preset_defaults(file_cfg["preset"].get<std::string>());
      merge_into(cfg, file_cfg);
    }
    if (!out_dir.empty()) cfg["out_dir"] = out_dir;
    if (!dataset_dir.empty()) cfg["dataset"] = dataset_dir;
    if (!mask_path.empty()) cfg["mask_file"] = mask_path;
    if (epochs > 0) cfg["train"]["epochs"] = epochs;
    if (lr > 0) cfg["train"]["learning_rate"] = lr;
    if (batch > 0) cfg["train"]["batch_size"] = batch;
    if (alpha >= 0) cfg["train"]["alpha"] = alpha;
    if (seed >= 0) cfg["train"]["seed"] = seed;
    return cfg;
  }
};

template <class Key>
const json& require(const json& cfg, const Key& key, const std::string& what) {
  if (!cfg.contains(key))
    throw ConfigError("missing config key '" + std::string(key) + "' (" + what + ")");
  return cfg.at(key);
}

TrainConfig train_config_from(const json& cfg, const std::string& out_dir) {
  const auto& t = require(cfg, "train", "training section");
  TrainConfig tc;
  tc.epochs = t.value("epochs", 30);
  tc.learning_rate = t.value("learning_rate", 3e-3);
  tc.batch_size = t.value("batch_size", 4);
  tc.alpha = t.value("alpha", 0.5);
  tc.at_weight = t.value("at_weight", 1.0);
  tc.ah_beta = t.value("ah_beta", 1.0);
  tc.norm = rec_norm_from_name(t.value("norm", std::string("mse")));
  tc.seed = t.value("seed", uint64_t{1});
  tc.save_every_epoch = t.value("save_every_epoch", false);
  tc.allow_stage_override = t.value("allow_stage_override", false);
  tc.out_dir = out_dir;
  tc.validate();
  return tc;
}

CascadeConfig cascade_from(const json& cfg, const char* key) {
  auto j = require(cfg, key, "network section");
  j["type"] = "dccnn";
  return cascade_config_from_json(j);
}

VdsrConfig vdsr_from(const json& cfg, const char* key) {
  auto j = require(cfg, key, "network section");
  j["type"] = "vdsr";
  return vdsr_config_from_json(j);
}

SamplingMask mask_from_config(const json& cfg) {
  if (cfg.contains("mask_file")) return load_mask(cfg["mask_file"].get<std::string>());
  const auto& m = require(cfg, "mask", "mask parameters or mask_file");
  return generate_cartesian_mask(m.value("width", 48), m.value("acceleration", 4.0),
                                 m.value("center_lines", 4), m.value("sigma_fraction", 0.15),
                                 m.value("seed", uint64_t{99}));
}

Dataset dataset_from_config(const json& cfg) {
  if (cfg.contains("dataset")) return load_dataset(cfg["dataset"].get<std::string>());
  // fall back to generating phantoms in memory from the data section
  const auto& d = require(cfg, "data", "dataset directory or data parameters");
  Dataset ds;
  ds.records = generate_phantoms(d.value("count", 200), d.value("size", 48),
                                 d.value("seed", uint64_t{1234}), &ds.manifest);
  return ds;
}

void persist_run_inputs(const std::string& out_dir, const json& cfg, const SamplingMask* mask) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "config.json");
  f << cfg.dump(2) << "\n";
  if (mask) {
    fs::create_directories(fs::path(out_dir) / "masks");
    save_mask((fs::path(out_dir) / "masks" / "mask.json").string(), *mask);
  }
}

ExperimentSetup experiment_setup_from(const json& cfg, const std::string& out_dir) {
  ExperimentSetup setup;
  setup.teacher_cfg = cascade_from(cfg, "teacher");
  setup.student_cfg = cascade_from(cfg, "student");
  setup.train = train_config_from(cfg, "");
  setup.out_dir = out_dir;
  setup.seeds.clear();
  for (const auto& s : cfg.value("seeds", json::array({1, 2, 3})))
    setup.seeds.push_back(s.get<uint64_t>());
  if (setup.seeds.empty()) throw ConfigError("'seeds' must not be empty");
  return setup;
}

// per-slice CSV reader for eval --compare
std::vector<std::array<double, 2>> read_per_slice_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read per-slice CSV " + path);
  std::vector<std::array<double, 2>> rows;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, p, s;
    if (!std::getline(ss, id, ',') || !std::getline(ss, p, ',') || !std::getline(ss, s, ','))
      throw DataError("malformed per-slice CSV row: " + line);
    rows.push_back({std::stod(p), std::stod(s)});
  }
  return rows;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"knowledge distillation for compressed-sensing MRI reconstruction"};
  app.require_subcommand(1);
  bool error_json = false;
  app.add_flag("--error-json", error_json, "emit machine-parsable error JSON on failure");

  // ---- mask-gen
  auto* mask_gen = app.add_subcommand("mask-gen", "generate a Cartesian undersampling mask");
  int mg_width = 160;
  double mg_acc = 4.0;
  int mg_center = 10;
  double mg_sigma = 0.15;
  uint64_t mg_seed = 0;
  std::string mg_out = "mask.json";
  mask_gen->add_option("--width", mg_width, "number of phase-encode lines");
  mask_gen->add_option("--acc", mg_acc, "acceleration factor");
  mask_gen->add_option("--center", mg_center, "always-sampled center lines");
  mask_gen->add_option("--sigma", mg_sigma, "Gaussian sigma as fraction of width");
  mask_gen->add_option("--seed", mg_seed, "random seed");
  mask_gen->add_option("--out", mg_out, "output mask JSON path");
  mask_gen->callback([&] {
    auto m = generate_cartesian_mask(mg_width, mg_acc, mg_center, mg_sigma, mg_seed);
    const auto out = resolve_out(mg_out);
    if (!fs::path(out).parent_path().empty())
      fs::create_directories(fs::path(out).parent_path());
    save_mask(out, m);
    std::cout << "mask: " << m.num_sampled() << "/" << m.width << " lines sampled -> " << out
              << "\n";
  });

  // ---- data-gen
  auto* data_gen = app.add_subcommand("data-gen", "generate a synthetic phantom dataset");
  int dg_count = 200, dg_size = 48;
  uint64_t dg_seed = 1234;
  std::string dg_out = "dataset";
  data_gen->add_option("--count", dg_count, "total number of slices (80/20 train/val split)");
  data_gen->add_option("--size", dg_size, "slice height and width");
  data_gen->add_option("--seed", dg_seed, "generator seed");
  data_gen->add_option("--out", dg_out, "output dataset directory");
  data_gen->callback([&] {
    DatasetManifest m;
    auto records = generate_phantoms(dg_count, dg_size, dg_seed, &m);
    const auto out = resolve_out(dg_out);
    save_dataset(out, m, records);
    std::cout << "dataset: " << m.train_count << " train + " << m.val_count << " val slices ("
              << dg_size << "x" << dg_size << ") -> " << out << "\n";
  });

  // ---- train
  auto* train = app.add_subcommand("train", "run one training stage");
  CommonOpts train_opts;
  std::string stage = "teacher";
  std::string teacher_ckpt, init_ckpt;
  train->add_option("--stage", stage,
                    "teacher | student | at | kd | fd:<FN|FSP|SP|AH|AT> | "
                    "ablate:<rec|rec_imit|rec_at|rec_imit_at>");
  train_opts.attach(train);
  train->add_option("--teacher-ckpt", teacher_ckpt, "frozen teacher checkpoint");
  train->add_option("--init-ckpt", init_ckpt, "initialization checkpoint (kd stage)");
  train->callback([&] {
    const json cfg = train_opts.merged();
    const std::string out = resolve_out(cfg.value("out_dir", std::string("run")));
    auto mask = mask_from_config(cfg);
    auto ds = dataset_from_config(cfg);
    auto data = prepare_recon_data<R>(ds, mask);
    persist_run_inputs(out, cfg, &mask);
    auto tc = train_config_from(cfg, out);

    auto load_teacher = [&]() {
      if (teacher_ckpt.empty())
        throw ConfigError("stage '" + stage + "' needs --teacher-ckpt");
      return load_checkpoint<R>(teacher_ckpt);
    };
    auto plan_for = [&](FdMethod m) {
      if (cfg.contains("plan")) return plan_from_json(cfg["plan"]);
      return default_plan(m, cascade_from(cfg, "teacher"), cascade_from(cfg, "student"));
    };

    TrainResult<R> res;
    if (stage == "teacher") {
      res = train_teacher(tc, cascade_from(cfg, "teacher"), data);
    } else if (stage == "student") {
      res = train_student_plain(tc, cascade_from(cfg, "student"), data);
    } else if (stage == "at") {
      auto teacher = load_teacher();
      res = train_student_at(tc, cascade_from(cfg, "student"), teacher, data,
                             plan_for(FdMethod::AT));
    } else if (stage == "kd") {
      auto teacher = load_teacher();
      if (init_ckpt.empty()) throw ConfigError("stage 'kd' needs --init-ckpt");
      auto init = load_checkpoint<R>(init_ckpt);
      res = finetune_student_kd(tc, teacher, init, data);
    } else if (stage.rfind("fd:", 0) == 0) {
      auto teacher = load_teacher();
      const auto method = fd_method_from_name(stage.substr(3));
      res = pretrain_student_fd(tc, cascade_from(cfg, "student"), teacher, data,
                                plan_for(method));
    } else if (stage.rfind("ablate:", 0) == 0) {
      auto teacher = load_teacher();
      const auto combo = objectives::ablation_from_name(stage.substr(7));
      res = train_student_ablation(tc, cascade_from(cfg, "student"), teacher, data, combo,
                                   plan_for(FdMethod::AT));
    } else {
      throw ConfigError("unknown training stage '" + stage + "'");
    }
    std::cout << "stage " << res.last.stage << ": " << tc.epochs
              << " epochs, final val loss " << res.last.history.back().val_loss
              << ", best epoch " << res.best.epoch << " -> " << out << "\n";
  });

  // ---- eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (PSNR/SSIM per slice)");
  CommonOpts eval_opts;
  eval_opts.attach(eval, false);
  std::string eval_ckpt, compare_csv;
  bool eval_zf = false;
  int png_count = 0;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate");
  eval->add_flag("--zf", eval_zf, "evaluate the zero-filled baseline instead");
  eval->add_option("--png", png_count, "dump qualitative PNGs for the first N slices");
  eval->add_option("--compare", compare_csv,
                   "per-slice CSV of another model; adds a Wilcoxon significance report");
  eval->callback([&] {
    const json cfg = eval_opts.merged();
    const std::string out = resolve_out(cfg.value("out_dir", std::string("eval")));
    auto mask = mask_from_config(cfg);
    auto ds = dataset_from_config(cfg);
    auto data = prepare_recon_data<R>(ds, mask);

    MetricsReport rep;
    NetworkParameters<R> params;
    if (eval_zf) {
      rep = evaluate_zero_filled(data.val, mask);
    } else {
      if (eval_ckpt.empty()) throw ConfigError("eval needs --ckpt (or --zf)");
      auto ckpt = load_checkpoint<R>(eval_ckpt);
      params = std::move(ckpt.params);
      rep = evaluate_model(params, data.val, mask, ckpt.stage);
    }
    fs::create_directories(out);
    rep.write_per_slice_csv((fs::path(out) / "per_slice.csv").string());
    {
      std::ofstream f(fs::path(out) / "aggregate.json");
      f << rep.aggregate_json().dump(2) << "\n";
      std::ofstream c(fs::path(out) / "aggregate.csv");
      c << "model_tag,acceleration,n_slices,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
      char buf[192];
      std::snprintf(buf, sizeof buf, "%s,%.3g,%zu,%.4f,%.4f,%.6f,%.6f\n",
                    rep.model_tag.c_str(), rep.acceleration, rep.slice_ids.size(),
                    rep.psnr_mean, rep.psnr_std, rep.ssim_mean, rep.ssim_std);
      c << buf;
    }
    if (!compare_csv.empty()) {
      auto other = read_per_slice_csv(compare_csv);
      if (other.size() != rep.psnr_db.size())
        throw DataError("--compare CSV has a different slice count");
      std::vector<double> op(other.size()), os(other.size());
      for (size_t i = 0; i < other.size(); ++i) {
        op[i] = other[i][0];
        os[i] = other[i][1];
      }
      auto wp = wilcoxon_signed_rank(rep.psnr_db, op);
      auto wssim = wilcoxon_signed_rank(rep.ssim_val, os);
      json sig{{"psnr",
                {{"statistic", wp.statistic}, {"p_value", wp.p_value},
                 {"n_effective", wp.n_effective}, {"significant", wp.significant},
                 {"exact", wp.exact}}},
               {"ssim",
                {{"statistic", wssim.statistic}, {"p_value", wssim.p_value},
                 {"n_effective", wssim.n_effective}, {"significant", wssim.significant},
                 {"exact", wssim.exact}}},
               {"alpha", wp.alpha}};
      std::ofstream f(fs::path(out) / "significance.json");
      f << sig.dump(2) << "\n";
    }
    if (png_count > 0 && !eval_zf) {
      for (int i = 0; i < png_count && i < static_cast<int>(data.val.size()); ++i)
        write_qualitative_png((fs::path(out) / ("slice_" + std::to_string(i) + ".png")).string(),
                              data.val[static_cast<size_t>(i)], {&params}, mask);
    }
    std::cout << rep.model_tag << ": PSNR " << rep.psnr_mean << " +/- " << rep.psnr_std
              << " dB, SSIM " << rep.ssim_mean << " +/- " << rep.ssim_std << " -> " << out
              << "\n";
  });

  // ---- compare-fd
  auto* cfd = app.add_subcommand("compare-fd",
                                 "pre-train with each feature-distillation method, fine-tune, "
                                 "compare validation losses and metrics");
  CommonOpts cfd_opts;
  cfd_opts.attach(cfd);
  cfd->callback([&] {
    const json cfg = cfd_opts.merged();
    const std::string out = resolve_out(cfg.value("out_dir", std::string("compare_fd")));
    auto mask = mask_from_config(cfg);
    auto ds = dataset_from_config(cfg);
    auto data = prepare_recon_data<R>(ds, mask);
    persist_run_inputs(out, cfg, &mask);
    auto setup = experiment_setup_from(cfg, out);
    TeacherPool<R> teachers(setup, data);
    auto result = compare_fd(setup, data, teachers);
    for (const auto& row : result.per_seed) {
      std::cout << "seed " << row.seed << " final val loss:";
      for (const auto& m : result.methods) std::cout << " " << m << "=" << row.final_val.at(m);
      std::cout << "\n";
    }
    std::cout << "wrote fd_val_loss_seed*.csv and fd_metrics.csv -> " << out << "\n";
  });

  // ---- position-sweep
  auto* psweep = app.add_subcommand("position-sweep",
                                    "sweep attention-transfer tap positions (conv indices)");
  CommonOpts ps_opts;
  ps_opts.attach(psweep);
  std::vector<int> ps_teacher_layers{1, 2, 3, 4};
  std::vector<int> ps_student_layers{2};
  psweep->add_option("--teacher-layer", ps_teacher_layers, "teacher conv indices")
      ->delimiter(',');
  psweep->add_option("--student-layer", ps_student_layers, "student conv indices")
      ->delimiter(',');
  psweep->callback([&] {
    const json cfg = ps_opts.merged();
    const std::string out = resolve_out(cfg.value("out_dir", std::string("position_sweep")));
    auto mask = mask_from_config(cfg);
    auto ds = dataset_from_config(cfg);
    auto data = prepare_recon_data<R>(ds, mask);
    persist_run_inputs(out, cfg, &mask);
    auto setup = experiment_setup_from(cfg, out);
    TeacherPool<R> teachers(setup, data);
    auto rows = position_sweep(setup, data, teachers, ps_teacher_layers, ps_student_layers);
    for (const auto& r : rows)
      std::cout << r.label << ": PSNR " << r.psnr_mean << " +/- " << r.psnr_std << ", SSIM "
                << r.ssim_mean << "\n";
    std::cout << "wrote position_sweep.csv -> " << out << "\n";
  });

  // ---- residue-study
  auto* residue = app.add_subcommand("residue-study",
                                     "attention-map residues of student and kd-student "
                                     "against the teacher, per cascade");
  CommonOpts rs_opts;
  rs_opts.attach(residue, false);
  std::string rs_teacher, rs_student, rs_kd;
  residue->add_option("--teacher", rs_teacher, "teacher checkpoint")->required();
  residue->add_option("--student", rs_student, "plain student checkpoint")->required();
  residue->add_option("--kd", rs_kd, "kd student checkpoint")->required();
  residue->callback([&] {
    const json cfg = rs_opts.merged();
    const std::string out = resolve_out(cfg.value("out_dir", std::string("residue_study")));
    auto mask = mask_from_config(cfg);
    auto ds = dataset_from_config(cfg);
    auto data = prepare_recon_data<R>(ds, mask);
    auto teacher = load_checkpoint<R>(rs_teacher);
    auto student = load_checkpoint<R>(rs_student);
    auto kd = load_checkpoint<R>(rs_kd);
    auto result = attention_residue_study(teacher, student, kd, data.val, mask, out);
    for (const auto& s : result.summary)
      std::cout << "cascade " << s.cascade << " " << s.model << ": median residue " << s.median
                << "\n";
    std::cout << "wrote residue_per_slice.csv, residue_summary.csv, PNGs -> " << out << "\n";
  });

  // ---- benchmark
  auto* bench = app.add_subcommand("benchmark", "parameter count and forward-time report");
  std::string bench_ckpt, bench_out;
  int bench_size = 64, bench_repeats = 20;
  bench->add_option("--ckpt", bench_ckpt, "checkpoint to benchmark")->required();
  bench->add_option("--size", bench_size, "input height/width");
  bench->add_option("--repeats", bench_repeats, "timed repetitions (>= 5)");
  bench->add_option("--out", bench_out, "output JSON path");
  bench->callback([&] {
    auto ckpt = load_checkpoint<R>(bench_ckpt);
    auto rep = benchmark_forward(ckpt.params, bench_size, bench_size, bench_repeats);
    json j{{"param_count", rep.param_count},
           {"median_forward_seconds", rep.median_forward_seconds},
           {"times", rep.times},
           {"height", rep.height},
           {"width", rep.width},
           {"stage", ckpt.stage}};
    if (!bench_out.empty()) {
      const auto out = resolve_out(bench_out);
      if (!fs::path(out).parent_path().empty())
        fs::create_directories(fs::path(out).parent_path());
      std::ofstream f(out);
      f << j.dump(2) << "\n";
    }
    std::cout << j.dump(2) << "\n";
  });

  // ---- sr-train
  auto* sr_train = app.add_subcommand("sr-train", "VDSR super-resolution training stages");
  CommonOpts srt_opts;
  srt_opts.attach(sr_train);
  std::string sr_stage = "teacher";
  std::string sr_teacher_ckpt, sr_init_ckpt;
  sr_train->add_option("--stage", sr_stage, "teacher | student | at | kd");
  sr_train->add_option("--teacher-ckpt", sr_teacher_ckpt, "frozen teacher checkpoint");
  sr_train->add_option("--init-ckpt", sr_init_ckpt, "initialization checkpoint (kd stage)");
  sr_train->callback([&] {
    const json cfg = srt_opts.merged();
    const std::string out = resolve_out(cfg.value("out_dir", std::string("sr_run")));
    auto ds = dataset_from_config(cfg);
    auto data = prepare_sr_data<R>(ds, cfg.value("sr_factor", 4));
    persist_run_inputs(out, cfg, nullptr);
    auto tc = train_config_from(cfg, out);

    TrainResult<R> res;
    if (sr_stage == "teacher") {
      res = train_vdsr(tc, vdsr_from(cfg, "vdsr_teacher"), data, "teacher");
    } else if (sr_stage == "student") {
      res = train_vdsr(tc, vdsr_from(cfg, "vdsr_student"), data, "student_plain");
    } else if (sr_stage == "at") {
      if (sr_teacher_ckpt.empty()) throw ConfigError("stage 'at' needs --teacher-ckpt");
      auto teacher = load_checkpoint<R>(sr_teacher_ckpt);
      auto plan = cfg.contains("plan")
                      ? plan_from_json(cfg["plan"])
                      : default_vdsr_plan(vdsr_from(cfg, "vdsr_teacher"),
                                          vdsr_from(cfg, "vdsr_student"));
      res = train_vdsr_at(tc, vdsr_from(cfg, "vdsr_student"), teacher, data, plan);
    } else if (sr_stage == "kd") {
      if (sr_teacher_ckpt.empty() || sr_init_ckpt.empty())
        throw ConfigError("stage 'kd' needs --teacher-ckpt and --init-ckpt");
      auto teacher = load_checkpoint<R>(sr_teacher_ckpt);
      auto init = load_checkpoint<R>(sr_init_ckpt);
      res = finetune_vdsr_kd(tc, teacher, init, data);
    } else {
      throw ConfigError("unknown sr-train stage '" + sr_stage + "'");
    }
    std::cout << "sr stage " << res.last.stage << ": final val loss "
              << res.last.history.back().val_loss << " -> " << out << "\n";
  });

  // ---- sr-eval
  auto* sr_eval = app.add_subcommand("sr-eval", "evaluate a VDSR checkpoint");
  CommonOpts sre_opts;
  sre_opts.attach(sr_eval, false);
  std::string sre_ckpt;
  sr_eval->add_option("--ckpt", sre_ckpt, "checkpoint to evaluate")->required();
  sr_eval->callback([&] {
    const json cfg = sre_opts.merged();
    const std::string out = resolve_out(cfg.value("out_dir", std::string("sr_eval")));
    auto ds = dataset_from_config(cfg);
    auto data = prepare_sr_data<R>(ds, cfg.value("sr_factor", 4));
    auto ckpt = load_checkpoint<R>(sre_ckpt);
    auto rep = evaluate_vdsr_model(ckpt.params, data.val, ckpt.stage);
    fs::create_directories(out);
    rep.write_per_slice_csv((fs::path(out) / "per_slice.csv").string());
    std::ofstream f(fs::path(out) / "aggregate.json");
    f << rep.aggregate_json().dump(2) << "\n";
    std::cout << rep.model_tag << ": PSNR " << rep.psnr_mean << " +/- " << rep.psnr_std
              << " dB, SSIM " << rep.ssim_mean << " -> " << out << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (error_json && e.get_exit_code() != 0) {
      std::cout << json{{"error", {{"type", "usage"}, {"message", e.what()}}}}.dump() << "\n";
      return kExitUsage;
    }
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  } catch (const CLI::Error& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  } catch (const TrainingFailureError& e) {
    if (error_json)
      std::cout << json{{"error", {{"type", "training_failure"}, {"message", e.what()},
                                   {"epoch", e.epoch()}}}}.dump()
                << "\n";
    else
      std::cerr << "training failure: " << e.what() << "\n";
    return kExitTrainingFailure;
  } catch (const ConfigError& e) {
    if (error_json)
      std::cout << json{{"error", {{"type", "config"}, {"message", e.what()}}}}.dump() << "\n";
    else
      std::cerr << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    if (error_json)
      std::cout << json{{"error", {{"type", "data"}, {"message", e.what()}}}}.dump() << "\n";
    else
      std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    if (error_json)
      std::cout << json{{"error", {{"type", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    else
      std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run_cli(argc, argv); }
