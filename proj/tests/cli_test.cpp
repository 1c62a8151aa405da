// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "mmdlab/cli.hpp"

namespace mmdlab {
namespace {

namespace fs = std::filesystem;

fs::path tmp_root() {
  const char* base = std::getenv("MMDLAB_TMP");
  return fs::path(base ? base : fs::temp_directory_path().string()) / "cli_test";
}

/// Empty per-test output directory.
fs::path fresh(const std::string& name) {
  const fs::path dir = tmp_root() / name;
  fs::remove_all(dir);
  return dir;
}

fs::path dir_(const std::string& name) { return tmp_root() / name; }

/// Overrides that shrink every stage to a few milliseconds.
std::vector<std::string> tiny(const fs::path& out) {
  return {"--set", "output_dir=" + out.string(),
          "--set", "dataset.n=400",
          "--set", "denoiser.width=16",
          "--set", "denoiser.depth=2",
          "--set", "denoiser.time_embedding=8",
          "--set", "pretrain.iterations=40",
          "--set", "pretrain.batch=32",
          "--set", "finetune.iterations=3",
          "--set", "finetune.batch=16",
          "--set", "finetune.eval_every=2",
          "--set", "features.encoder.iterations=20",
          "--set", "eval.n=40",
          "--set", "eval.reps=2",
          "--set", "sample.n=25",
          "--set", "interpolate.pairs=3",
          "--set", "audit.n=10"};
}

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(const std::string& command, const fs::path& out, std::vector<std::string> extra = {}) {
  std::vector<std::string> args{command};
  for (const auto& a : tiny(out)) args.push_back(a);
  for (const auto& a : extra) args.push_back(a);
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  return {code, o.str(), e.str()};
}

std::size_t data_rows(const fs::path& csv) {
  const std::string s = read_file(csv);
  EXPECT_FALSE(s.empty());
  EXPECT_EQ(s.back(), '\n');
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')) - 1;
}

std::string first_line(const fs::path& csv) {
  const std::string s = read_file(csv);
  return s.substr(0, s.find('\n'));
}

class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    base_ = fresh("base");
    const auto r = run("pretrain", base_);
    ASSERT_EQ(r.code, 0) << r.err;
  }

  static std::vector<std::string> with_model() {
    return {"--set", "checkpoint=" + (base_ / "pretrain" / "model.ckpt").string()};
  }

  static inline fs::path base_;
};

TEST(CliConfig, ZeroIterationsIsConfigError) {
  fresh("zero");
  const auto r = run("pretrain", dir_("zero"), {"--set", "pretrain.iterations=0"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("pretrain.iterations"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_("zero") / "pretrain" / "model.ckpt"));
}

TEST(CliConfig, FieldLevelMessages) {
  const auto bad_key = run("eval", dir_("x"), {"--set", "finetune.lr_typo=1"});
  EXPECT_EQ(bad_key.code, 2);
  EXPECT_NE(bad_key.err.find("finetune.lr_typo"), std::string::npos);
  const auto bad_enum = run("eval", dir_("x"), {"--set", "finetune.kernel=laplace"});
  EXPECT_EQ(bad_enum.code, 2);
  EXPECT_NE(bad_enum.err.find("finetune.kernel"), std::string::npos);
  const auto bad_type = run("eval", dir_("x"), {"--set", "eval.reps=\"three\""});
  EXPECT_EQ(bad_type.code, 2);
  EXPECT_NE(bad_type.err.find("eval.reps"), std::string::npos);
  const auto big = run("eval", dir_("x"), {"--set", "eval.budgets=[5,101]"});
  EXPECT_EQ(big.code, 2);
  const auto quad = run("ablate-schedule", dir_("x"), {"--set", "ablate.schedule_budgets=[20]"});
  EXPECT_EQ(quad.code, 2);
  EXPECT_NE(quad.err.find("quadratic"), std::string::npos) << quad.err;
  const auto no_seed = run("eval", dir_("x"), {"--set", "seed=null"});
  EXPECT_EQ(no_seed.code, 2);
  std::ostringstream sink;
  EXPECT_EQ(cli::run({"no-such-command"}, sink, sink), 2);
}

TEST(CliConfig, ConfigFileMerge) {
  const fs::path file = tmp_root() / "cfg.json";
  write_file_atomic(file, R"({"finetune": {"lr": 0.5}, "seed": 9})");
  Json cfg = cli::resolve_config(file, {"seed=3"});
  EXPECT_EQ(cfg["finetune"]["lr"].get<double>(), 0.5);
  EXPECT_EQ(cfg["finetune"]["iterations"].get<int>(), 500);
  EXPECT_EQ(cfg["seed"].get<int>(), 3);
  write_file_atomic(file, R"({"finetune": {"learning_rate": 0.5}})");
  EXPECT_THROW(cli::resolve_config(file, {}), ConfigError);
}

TEST(CliConfig, MissingCheckpointIsRuntimeFailure) {
  const auto r = run("sample", dir_("nothing"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("checkpoint"), std::string::npos);
}

TEST(CliConfig, BinaryExitStatus) {
  const std::string cmd = std::string(MMDLAB_CLI_PATH) +
                          " pretrain --set pretrain.iterations=0 --set output_dir=" +
                          (dir_("bin")).string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
}

TEST_F(CliRun, PretrainArtifacts) {
  const fs::path dir = base_ / "pretrain";
  EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
  EXPECT_EQ(data_rows(dir / "loss.csv"), 40u);
  EXPECT_EQ(first_line(dir / "loss.csv"), "iteration,loss");
  EXPECT_EQ(data_rows(dir / "train.csv") + data_rows(dir / "heldout.csv"), 400u);
  EXPECT_TRUE(fs::exists(dir / "train.csv.meta.json"));
  // Frozen config reproduces the run's settings.
  const Json frozen = Json::parse(read_file(dir / "config.json"));
  EXPECT_EQ(frozen["pretrain"]["iterations"].get<int>(), 40);
  EXPECT_NO_THROW(cli::ExperimentConfig::from_json(frozen));
}

TEST_F(CliRun, NeverOverwritesCheckpoint) {
  const auto before = read_file(base_ / "pretrain" / "model.ckpt");
  const auto r = run("pretrain", base_, {"--set", "pretrain.iterations=1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("overwrite"), std::string::npos);
  EXPECT_EQ(read_file(base_ / "pretrain" / "model.ckpt"), before);
}

TEST_F(CliRun, FinetuneWritesCheckpointAndHistory) {
  fresh("ft");
  const fs::path out = dir_("ft");
  auto r = run("finetune", out, with_model());
  ASSERT_EQ(r.code, 0) << r.err;
  for (int b : {5, 10, 20}) {
    const std::string name = "b" + std::to_string(b) + "_ddim";
    EXPECT_TRUE(fs::exists(out / "finetune" / ("finetuned_" + name + ".ckpt")));
    const fs::path hist = out / "finetune" / ("history_" + name + ".csv");
    EXPECT_EQ(first_line(hist), "iteration,loss,heldout_mmd2,millis");
    EXPECT_EQ(data_rows(hist), 3u);
  }
  r = run("finetune", out, with_model());
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliRun, AblateKernelsNineRowsByteIdentical) {
  fresh("ak1");
  fresh("ak2");
  const auto a = run("ablate-kernels", dir_("ak1"), with_model());
  ASSERT_EQ(a.code, 0) << a.err;
  auto extra = with_model();
  extra.insert(extra.end(), {"--parallel", "3"});
  const auto b = run("ablate-kernels", dir_("ak2"), extra);
  ASSERT_EQ(b.code, 0) << b.err;
  const fs::path m1 = dir_("ak1") / "ablate-kernels" / "metrics.csv";
  const fs::path m2 = dir_("ak2") / "ablate-kernels" / "metrics.csv";
  EXPECT_EQ(data_rows(m1), 9u);
  EXPECT_EQ(first_line(m1), "run_id,metric,value,std,reps,kernel,feature_map,budget,sampler");
  EXPECT_EQ(read_file(m1), read_file(m2));
}

TEST_F(CliRun, EvalRerunByteIdentical) {
  fresh("ev1");
  fresh("ev2");
  ASSERT_EQ(run("eval", dir_("ev1"), with_model()).code, 0);
  ASSERT_EQ(run("eval", dir_("ev2"), with_model()).code, 0);
  const fs::path m1 = dir_("ev1") / "eval" / "metrics.csv";
  EXPECT_EQ(read_file(m1), read_file(dir_("ev2") / "eval" / "metrics.csv"));
  EXPECT_EQ(data_rows(m1), 4u * 4u);  // 4 budgets x (mmd2, ffd, precision, recall)
}

TEST_F(CliRun, OtherAblations) {
  fresh("as");
  fresh("asp");
  auto r = run("ablate-schedule", dir_("as"), with_model());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(data_rows(dir_("as") / "ablate-schedule" / "metrics.csv"), 4u);
  r = run("ablate-sampler", dir_("asp"), with_model());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(data_rows(dir_("asp") / "ablate-sampler" / "metrics.csv"), 12u);
}

TEST_F(CliRun, SampleInterpolateAudit) {
  fresh("misc");
  const fs::path out = dir_("misc");
  ASSERT_EQ(run("sample", out, with_model()).code, 0);
  EXPECT_EQ(data_rows(out / "sample" / "samples.csv"), 25u);
  EXPECT_EQ(first_line(out / "sample" / "samples.csv"), "x0,x1");
  EXPECT_TRUE(fs::exists(out / "sample" / "samples.csv.meta.json"));
  ASSERT_EQ(run("interpolate", out, with_model()).code, 0);
  EXPECT_EQ(data_rows(out / "interpolate" / "interpolation.csv"), 33u);
  ASSERT_EQ(run("nn-audit", out, with_model()).code, 0);
  EXPECT_EQ(data_rows(out / "nn-audit" / "neighbors.csv"), 50u);
  EXPECT_EQ(data_rows(out / "nn-audit" / "metrics.csv"), 1u);
  EXPECT_TRUE(fs::exists(out / "nn-audit" / "config.json"));
}

}  // namespace
}  // namespace mmdlab
