#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "prop/checkpoint.hpp"

namespace {

namespace fs = std::filesystem;

const fs::path kCli = PROP_CLI_PATH;

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / "prop_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    std::ofstream(p / "small.cfg") << "num_layers=1\nmodel_dim=8\nseq_len=3\nff_hidden=8\ndata_dim=6\n"
                                      "num_classes=6\nbase_classes=3\ntrain_per_class=12\ntest_per_class=6\n"
                                      "epochs=2\nprompt_len=2\npretrain_epochs=2\nseeds=5\n";
    return p;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = kCli.string() + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string common(const std::string& out) {
  return "--config " + (workdir() / "small.cfg").string() + " --synthetic --out-dir " + (workdir() / out).string();
}

TEST(Cli, RunWritesMetricsManifestAndCheckpoint) {
  ASSERT_EQ(run("run " + common("run")), 0);
  const auto csv = prop::read_file(workdir() / "run/metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,last,avg,task_0,task_1,task_2");
  EXPECT_NO_THROW(prop::load_checkpoint(workdir() / "run/model.ckpt"));
  EXPECT_NE(prop::read_file(workdir() / "run/manifest.txt").find("\nseed=1993\n"), std::string::npos);
}

TEST(Cli, SeedFlagOverridesConfig) {
  ASSERT_EQ(run("run " + common("seed7") + " --seed 7"), 0);
  EXPECT_NE(prop::read_file(workdir() / "seed7/manifest.txt").find("seed=7"), std::string::npos);
}

TEST(Cli, PretrainThenRunFromCheckpoint) {
  ASSERT_EQ(run("pretrain " + common("pre")), 0);
  ASSERT_TRUE(fs::exists(workdir() / "pre/backbone.ckpt"));
  EXPECT_EQ(run("run " + common("from_ckpt") + " --checkpoint " + (workdir() / "pre/backbone.ckpt").string()), 0);
}

TEST(Cli, Baselines) {
  for (const std::string kind : {"finetune", "kv", "ncm"}) {
    ASSERT_EQ(run("baseline " + kind + " " + common("b_" + kind)), 0) << kind;
    EXPECT_TRUE(fs::exists(workdir() / ("b_" + kind) / "metrics.csv"));
  }
  EXPECT_NE(prop::read_file(workdir() / "b_kv/manifest.txt").find("retrieval_accuracy_step0="), std::string::npos);
}

TEST(Cli, AblateProfileAndExport) {
  ASSERT_EQ(run("ablate loss_components " + common("abl")), 0);
  EXPECT_TRUE(fs::exists(workdir() / "abl/ablation.csv"));
  ASSERT_EQ(run("profile " + common("prof")), 0);
  const auto prof = prop::read_file(workdir() / "prof/profile.csv");
  EXPECT_EQ(prof.substr(0, 6), "tasks,");
  ASSERT_EQ(run("export-embeddings " + common("emb")), 0);
  const auto emb = prop::read_file(workdir() / "emb/embeddings.csv");
  EXPECT_EQ(emb.substr(0, emb.find('\n')), "x,y,label,kind");
  // learner state from a run checkpoint is reused as is
  ASSERT_EQ(run("run " + common("for_prof")), 0);
  EXPECT_EQ(run("profile " + common("prof2") + " --checkpoint " + (workdir() / "for_prof/model.ckpt").string()), 0);
}

TEST(Cli, ConfigErrorsExitTwo) {
  std::ofstream(workdir() / "bad.cfg") << "no_such_key=1\n";
  EXPECT_EQ(run("run --config " + (workdir() / "bad.cfg").string()), 2);
  EXPECT_EQ(run("run --config " + (workdir() / "missing.cfg").string()), 2);
  EXPECT_EQ(run("ablate depth " + common("x")), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  std::ofstream(workdir() / "zero_init.cfg") << "init_classes=0\n";
  EXPECT_EQ(run("run --config " + (workdir() / "zero_init.cfg").string()), 2);
}

TEST(Cli, UnfrozenBackboneExitsThree) {
  ASSERT_EQ(run("baseline finetune " + common("ft")), 0);
  EXPECT_EQ(run("run " + common("leak") + " --checkpoint " + (workdir() / "ft/model.ckpt").string()), 3);
}

}  // namespace
