#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// A tiny world and model so every command finishes in about a second.
const char* kConfig = R"({
  "world": {"n_classes": 4, "objects_per_class": 2, "prototype_dim": 16, "obs_dim": 32, "render_hidden": 32},
  "model": {"enc_hidden": 32, "rep_dim": 16, "model_dim": 16, "n_layers": 1, "n_heads": 2,
            "ff_mult": 2, "out_dim": 8, "pred_hidden": 16},
  "train": {"steps": 10, "batch_sequences": 2, "k_max": 4, "lr": 0.001},
  "probe": {"lengths": [0, 2], "n_eval_samples": 64, "n_contexts": 2, "retrieval_queries": 8,
            "retrieval_views": 4, "classification_samples": 64, "pca_dim": 8},
  "paths": {"checkpoint_every": 5}
})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ctxssl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "cfg.json") << kConfig;
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args, const std::string& env = "") const {
    const std::string cmd =
        "cd '" + dir_.string() + "' && " + env + " '" CTXSSL_BIN "' " + args + " > out.txt 2> err.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string read(const fs::path& rel) const {
    std::ifstream in(dir_ / rel, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenWorldIsDeterministic) {
  ASSERT_EQ(run("gen-world --config cfg.json --world a.bin"), 0);
  ASSERT_EQ(run("gen-world --config cfg.json --world b.bin"), 0);
  EXPECT_FALSE(read("a.bin").empty());
  EXPECT_EQ(read("a.bin"), read("b.bin"));
  ASSERT_EQ(run("gen-world --config cfg.json --world c.bin --world-seed 99"), 0);
  EXPECT_NE(read("a.bin"), read("c.bin"));
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(run("gen-world --config cfg.json --no-such-key 1"), 2);
  EXPECT_EQ(run("train --config cfg.json --train.stepz 3"), 2);
  std::ofstream(dir_ / "bad.json") << "{ not json";
  EXPECT_EQ(run("gen-world --config bad.json"), 2);
  EXPECT_EQ(run("gen-world --config missing.json"), 2);
  EXPECT_EQ(run("train --config cfg.json --world nowhere.bin"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(Cli, TrainWritesArtifacts) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  ASSERT_EQ(run("train --config cfg.json --steps 10"), 0) << read("err.txt");
  EXPECT_TRUE(fs::exists(dir_ / "run/checkpoint.bin"));
  std::ifstream log(dir_ / "run/train_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) EXPECT_TRUE(json::parse(line).contains("step"));
  EXPECT_EQ(lines, 10);
}

TEST_F(Cli, InvariantBaselineAudit) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  ASSERT_EQ(run("train --config cfg.json --mode invariant_baseline"), 0) << read("err.txt");
  const json resolved = json::parse(read("run/resolved_config.json"));
  EXPECT_EQ(resolved["audit"]["effective_lambda"], 0.0);
  EXPECT_EQ(resolved["audit"]["nonzero_actions"], 0);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  ASSERT_EQ(run("train --config cfg.json --steps 10 --out full"), 0);
  ASSERT_EQ(run("train --config cfg.json --steps 5 --out split"), 0);
  ASSERT_EQ(run("train --config cfg.json --steps 10 --out split --resume"), 0) << read("err.txt");
  EXPECT_EQ(read("full/checkpoint.bin"), read("split/checkpoint.bin"));
}

TEST_F(Cli, EvalWritesReports) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  ASSERT_EQ(run("train --config cfg.json"), 0);
  ASSERT_EQ(run("eval --config cfg.json --lengths 0"), 0) << read("err.txt");
  const json rep = json::parse(read("run/report.json"));
  EXPECT_FALSE(rep["cells"].empty());
  for (const auto& c : rep["cells"]) EXPECT_EQ(c["length"], 0);
  EXPECT_EQ(read("run/report.csv").rfind("context_group,mode,length,metric,value\n", 0), 0u);
  ASSERT_EQ(run("eval --config cfg.json --lengths 0"), 0);
  EXPECT_EQ(read("run/report.json"), rep.dump(2) + "\n");
}

TEST_F(Cli, EvalOnOtherWorldExitsFour) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  ASSERT_EQ(run("train --config cfg.json"), 0);
  ASSERT_EQ(run("gen-world --config cfg.json --world other.bin --world-seed 7"), 0);
  EXPECT_EQ(run("eval --config cfg.json --world other.bin"), 4);
}

TEST_F(Cli, NumericFailureExitsThree) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  EXPECT_EQ(run("train --config cfg.json --lr 1e38"), 3);
  EXPECT_TRUE(fs::exists(dir_ / "run/failure.json"));
}

TEST_F(Cli, AblateGridAndCache) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  ASSERT_EQ(run("ablate --config cfg.json --steps 2"), 0) << read("err.txt");
  const std::string first = read("out.txt");
  // The default grid has six mask probabilities.
  int cells = 0;
  for (auto pos = first.find("cell p="); pos != std::string::npos; pos = first.find("cell p=", pos + 1)) ++cells;
  EXPECT_EQ(cells, 6);
  for (const char* p : {"p=0 ", "p=0.2 ", "p=0.5 ", "p=0.75 ", "p=0.9 ", "p=0.98 "})
    EXPECT_NE(first.find(p), std::string::npos) << p;
  const std::string csv = read("run/ablation.csv");
  ASSERT_EQ(run("ablate --config cfg.json --steps 2"), 0);
  const std::string second = read("out.txt");
  EXPECT_EQ(second.find(" ok\n"), std::string::npos);
  EXPECT_NE(second.find("cached"), std::string::npos);
  EXPECT_EQ(read("run/ablation.csv"), csv);
}

TEST_F(Cli, ThreadCountDoesNotChangeResults) {
  ASSERT_EQ(run("gen-world --config cfg.json"), 0);
  ASSERT_EQ(run("ablate --config cfg.json --steps 2 --ablate.p_grid 0,0.5 --out one"), 0);
  ASSERT_EQ(run("ablate --config cfg.json --steps 2 --ablate.p_grid 0,0.5 --out two", "CTXSSL_THREADS=2"), 0);
  EXPECT_EQ(read("one/ablation.csv"), read("two/ablation.csv"));
}
