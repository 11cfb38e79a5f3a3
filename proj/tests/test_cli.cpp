// End-to-end tests of the command-line tool. Each test drives the installed
// binary through std::system and inspects exit codes and emitted files.
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kdmri/checkpoint.hpp"
#include "kdmri/kspace.hpp"

#ifndef KDMRI_CLI_BIN
#error "KDMRI_CLI_BIN must point at the kdmri binary"
#endif

using namespace kdmri;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string redirect = " 2>&1";
  const std::string cmd = std::string(KDMRI_CLI_BIN) + " " + args + redirect;
  CliResult res;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return res;
  char buf[512];
  while (fgets(buf, sizeof buf, pipe)) res.output += buf;
  const int status = pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "kdmri_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  std::string path(const std::string& p) const { return (dir_ / p).string(); }

  // tiny shared config so training stages finish in seconds
  std::string write_tiny_config() {
    json cfg{{"teacher", {{"n_cascades", 2}, {"n_convs", 3}, {"channels", 8}}},
             {"student", {{"n_cascades", 2}, {"n_convs", 2}, {"channels", 8}}},
             {"vdsr_teacher", {{"n_layers", 3}, {"channels", 8}}},
             {"vdsr_student", {{"n_layers", 2}, {"channels", 8}}},
             {"sr_factor", 2},
             {"seeds", {1, 2}},
             {"train", {{"epochs", 2}, {"learning_rate", 1e-3}, {"batch_size", 4}, {"seed", 1}}}};
    const auto p = path("tiny.json");
    std::ofstream(p) << cfg.dump(2);
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, MaskGenFullSampling) {
  auto res = run_cli("mask-gen --width 32 --acc 1 --center 4 --out " + path("m.json"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  auto mask = load_mask(path("m.json"));
  EXPECT_EQ(mask.num_sampled(), 32);
}

TEST_F(CliTest, MaskGenBadBudgetIsUsageError) {
  auto res = run_cli("mask-gen --width 32 --acc 32 --center 10 --out " + path("m.json"));
  EXPECT_EQ(res.exit_code, 2);
}

TEST_F(CliTest, ErrorJsonOnRequest) {
  auto res = run_cli("--error-json mask-gen --width 32 --acc 32 --center 10 --out " +
                     path("m.json"));
  EXPECT_EQ(res.exit_code, 2);
  auto j = json::parse(res.output);
  EXPECT_EQ(j["error"]["type"], "config");
}

TEST_F(CliTest, MissingDatasetIsDataError) {
  write_tiny_config();
  auto res = run_cli("eval --ckpt nonexistent.ckpt --dataset " + path("nope") + " --mask " +
                     path("nope.json") + " --out " + path("out"));
  EXPECT_EQ(res.exit_code, 4) << res.output;
}

TEST_F(CliTest, FullSmokePipeline) {
  // data-gen -> mask-gen -> train teacher (2 epochs) -> eval
  auto res = run_cli("data-gen --count 10 --size 16 --seed 3 --out " + path("ds"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(path("ds/manifest.json")));
  EXPECT_TRUE(fs::exists(path("ds/train_0000.kdmr")));

  res = run_cli("mask-gen --width 16 --acc 2 --center 2 --seed 5 --out " + path("m.json"));
  ASSERT_EQ(res.exit_code, 0) << res.output;

  const auto cfg = write_tiny_config();
  res = run_cli("train --stage teacher --config " + cfg + " --dataset " + path("ds") +
                " --mask " + path("m.json") + " --out " + path("run"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(path("run/config.json")));
  EXPECT_TRUE(fs::exists(path("run/masks/mask.json")));
  EXPECT_TRUE(fs::exists(path("run/checkpoints/teacher_2.ckpt")));
  EXPECT_TRUE(fs::exists(path("run/checkpoints/teacher_best.ckpt")));

  std::ifstream hist(path("run/history.csv"));
  std::string line;
  std::getline(hist, line);
  EXPECT_EQ(line, "epoch,train_loss,val_loss,wall_seconds");
  int rows = 0;
  while (std::getline(hist, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 2);

  res = run_cli("eval --ckpt " + path("run/checkpoints/teacher_best.ckpt") + " --dataset " +
                path("ds") + " --mask " + path("m.json") + " --out " + path("eval") +
                " --png 1");
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(path("eval/per_slice.csv")));
  EXPECT_TRUE(fs::exists(path("eval/aggregate.json")));
  EXPECT_TRUE(fs::exists(path("eval/slice_0.png")));
}

TEST_F(CliTest, TrainStagesChainAndRefuseBadOrder) {
  run_cli("data-gen --count 10 --size 16 --seed 3 --out " + path("ds"));
  run_cli("mask-gen --width 16 --acc 2 --center 2 --seed 5 --out " + path("m.json"));
  const auto cfg = write_tiny_config();
  const std::string common =
      " --config " + cfg + " --dataset " + path("ds") + " --mask " + path("m.json");

  ASSERT_EQ(run_cli("train --stage teacher" + common + " --out " + path("t")).exit_code, 0);
  const auto teacher = path("t/checkpoints/teacher_best.ckpt");

  ASSERT_EQ(run_cli("train --stage at" + common + " --teacher-ckpt " + teacher + " --out " +
                    path("at")).exit_code, 0);
  const auto at = path("at/checkpoints/student_at_pretrain_2.ckpt");
  ASSERT_TRUE(fs::exists(at));

  // kd from a non-pretrain checkpoint must be refused
  auto bad = run_cli("train --stage kd" + common + " --teacher-ckpt " + teacher +
                     " --init-ckpt " + teacher + " --out " + path("kd_bad"));
  EXPECT_EQ(bad.exit_code, 2);

  ASSERT_EQ(run_cli("train --stage kd" + common + " --teacher-ckpt " + teacher +
                    " --init-ckpt " + at + " --out " + path("kd")).exit_code, 0);
  EXPECT_TRUE(fs::exists(path("kd/checkpoints/student_kd_finetune_2.ckpt")));

  // a feature-distillation pre-train stage tags its method
  ASSERT_EQ(run_cli("train --stage fd:FSP" + common + " --teacher-ckpt " + teacher + " --out " +
                    path("fsp")).exit_code, 0);
  auto fsp = load_checkpoint<float>(path("fsp/checkpoints/student_fd_pretrain_2.ckpt"));
  EXPECT_EQ(fsp.extra["method"], "FSP");

  // ablation stage runs
  ASSERT_EQ(run_cli("train --stage ablate:rec_at" + common + " --teacher-ckpt " + teacher +
                    " --out " + path("ab")).exit_code, 0);

  auto bad_stage = run_cli("train --stage bogus" + common + " --out " + path("x"));
  EXPECT_EQ(bad_stage.exit_code, 2);
}

TEST_F(CliTest, DeterministicLossHistoryAcrossReruns) {
  run_cli("data-gen --count 10 --size 16 --seed 3 --out " + path("ds"));
  run_cli("mask-gen --width 16 --acc 2 --center 2 --seed 5 --out " + path("m.json"));
  const auto cfg = write_tiny_config();
  const std::string common =
      " --config " + cfg + " --dataset " + path("ds") + " --mask " + path("m.json");
  ASSERT_EQ(run_cli("train --stage teacher" + common + " --out " + path("r1")).exit_code, 0);
  ASSERT_EQ(run_cli("train --stage teacher" + common + " --out " + path("r2")).exit_code, 0);

  auto loss_columns = [](const std::string& p) {
    std::ifstream f(p);
    std::string line, acc;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
      // epoch,train_loss,val_loss,wall_seconds -> drop the wall clock
      acc += line.substr(0, line.rfind(','));
      acc += '\n';
    }
    return acc;
  };
  EXPECT_EQ(loss_columns(path("r1/history.csv")), loss_columns(path("r2/history.csv")));
}

TEST_F(CliTest, BenchmarkEmitsReport) {
  run_cli("data-gen --count 8 --size 16 --seed 3 --out " + path("ds"));
  run_cli("mask-gen --width 16 --acc 2 --center 2 --seed 5 --out " + path("m.json"));
  const auto cfg = write_tiny_config();
  ASSERT_EQ(run_cli("train --stage teacher --config " + cfg + " --dataset " + path("ds") +
                    " --mask " + path("m.json") + " --out " + path("t")).exit_code, 0);
  auto res = run_cli("benchmark --ckpt " + path("t/checkpoints/teacher_best.ckpt") +
                     " --size 16 --repeats 5 --out " + path("bench.json"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  std::ifstream f(path("bench.json"));
  json j;
  f >> j;
  EXPECT_GT(j["param_count"].get<size_t>(), 0u);
  EXPECT_EQ(j["times"].size(), 5u);
}

TEST_F(CliTest, SrPipelineRuns) {
  run_cli("data-gen --count 10 --size 16 --seed 7 --out " + path("ds"));
  const auto cfg = write_tiny_config();
  const std::string common = " --config " + cfg + " --dataset " + path("ds");
  ASSERT_EQ(run_cli("sr-train --stage teacher" + common + " --out " + path("srt")).exit_code, 0)
      << run_cli("sr-train --stage teacher" + common + " --out " + path("srt")).output;
  const auto teacher = path("srt/checkpoints/teacher_best.ckpt");
  ASSERT_EQ(run_cli("sr-train --stage at" + common + " --teacher-ckpt " + teacher + " --out " +
                    path("srat")).exit_code, 0);
  ASSERT_EQ(run_cli("sr-train --stage kd" + common + " --teacher-ckpt " + teacher +
                    " --init-ckpt " + path("srat/checkpoints/student_at_pretrain_2.ckpt") +
                    " --out " + path("srkd")).exit_code, 0);
  auto res = run_cli("sr-eval --ckpt " + path("srkd/checkpoints/student_kd_finetune_2.ckpt") +
                     common + " --out " + path("sre"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(path("sre/aggregate.json")));
}

TEST_F(CliTest, KdcOutDirEnvOverridesRelativeOutputs) {
  const auto root = path("envroot");
  fs::create_directories(root);
  setenv("KDC_OUT_DIR", root.c_str(), 1);
  auto res = run_cli("mask-gen --width 16 --acc 2 --center 2 --out masks/m.json");
  unsetenv("KDC_OUT_DIR");
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(fs::path(root) / "masks" / "m.json"));
}

TEST_F(CliTest, CompareFdAndResidueStudySmoke) {
  run_cli("data-gen --count 10 --size 16 --seed 3 --out " + path("ds"));
  run_cli("mask-gen --width 16 --acc 2 --center 2 --seed 5 --out " + path("m.json"));
  json cfg{{"teacher", {{"n_cascades", 2}, {"n_convs", 3}, {"channels", 6}}},
           {"student", {{"n_cascades", 2}, {"n_convs", 2}, {"channels", 6}}},
           {"seeds", {1}},
           {"train", {{"epochs", 1}, {"learning_rate", 1e-3}, {"batch_size", 4}, {"seed", 1}}}};
  std::ofstream(path("c.json")) << cfg.dump();
  const std::string common =
      " --config " + path("c.json") + " --dataset " + path("ds") + " --mask " + path("m.json");

  auto res = run_cli("compare-fd" + common + " --out " + path("fd"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(path("fd/fd_metrics.csv")));
  EXPECT_TRUE(fs::exists(path("fd/fd_val_loss_seed1.csv")));

  res = run_cli("position-sweep" + common + " --teacher-layer 1,2 --student-layer 1 --out " +
                path("ps"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(path("ps/position_sweep.csv")));

  ASSERT_EQ(run_cli("train --stage teacher" + common + " --out " + path("t")).exit_code, 0);
  ASSERT_EQ(run_cli("train --stage student" + common + " --out " + path("s")).exit_code, 0);
  ASSERT_EQ(run_cli("train --stage at" + common + " --teacher-ckpt " +
                    path("t/checkpoints/teacher_best.ckpt") + " --out " + path("at")).exit_code,
            0);
  ASSERT_EQ(run_cli("train --stage kd" + common + " --teacher-ckpt " +
                    path("t/checkpoints/teacher_best.ckpt") + " --init-ckpt " +
                    path("at/checkpoints/student_at_pretrain_1.ckpt") + " --out " +
                    path("kd")).exit_code, 0);
  res = run_cli("residue-study" + common + " --teacher " +
                path("t/checkpoints/teacher_best.ckpt") + " --student " +
                path("s/checkpoints/student_plain_best.ckpt") + " --kd " +
                path("kd/checkpoints/student_kd_finetune_best.ckpt") + " --out " + path("rs"));
  ASSERT_EQ(res.exit_code, 0) << res.output;
  EXPECT_TRUE(fs::exists(path("rs/residue_per_slice.csv")));
  EXPECT_TRUE(fs::exists(path("rs/residue_summary.csv")));
  EXPECT_TRUE(fs::exists(path("rs/residue_cascade1.png")));
}
