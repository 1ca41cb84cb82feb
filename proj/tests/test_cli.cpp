// End-to-end checks of the CLI surface and its exit-code contract:
// 0 success, 1 config error, 2 runtime error.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "json.hpp"
#include "testutil.hpp"

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SAMLAB_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::filesystem::path write_config(const std::filesystem::path& dir, bool sam) {
  nlohmann::json j = {
      {"model", {{"architecture", "mlp_bn"}, {"dims", {5, 8, 4}}}},
      {"optim",
       {{"base", {{"kind", "sgd"}, {"lr", 0.05}, {"momentum", 0.9}, {"weight_decay", 0.0005}}},
        {"schedule", "cosine"}}},
      {"data",
       {{"kind", "blobs"}, {"classes", 4}, {"dim", 5}, {"n", 160}, {"noise", 0.8}, {"seed", 3}}},
      {"epochs", 2},
      {"batch_size", 16},
      {"seed", 11},
  };
  if (sam) {
    j["optim"]["perturb"] = {{"variant", "sam"}, {"rho", 0.05}, {"scope", "only_norm"}};
  }
  auto path = dir / (sam ? "cfg_sam.json" : "cfg_sgd.json");
  std::ofstream(path) << j.dump(2);
  return path;
}

}  // namespace

TEST(Cli, FullPipelineExitCodes) {
  auto dir = testutil::scratch_dir("cli");
  auto cfg = write_config(dir, true);
  const std::string run = (dir / "run").string();

  EXPECT_EQ(run_cli("train --config " + cfg.string() + " --out " + run), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "metrics.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "checkpoint_final.json"));

  const std::string ckpt = run + "/checkpoint_final.json";
  EXPECT_EQ(run_cli("sharpness --checkpoint " + ckpt + " --rho 0.003 --steps 1 --m 16 --subset 64 --seed 0 --out " +
                    (dir / "sharp.json").string()),
            0);
  nlohmann::json sharp = nlohmann::json::parse(testutil::slurp(dir / "sharp.json"));
  EXPECT_TRUE(sharp.contains("s_w_m"));
  EXPECT_EQ(sharp["per_batch"].size(), 4u);

  EXPECT_EQ(run_cli("converge --fn quadratic --h 0.5 --rho 0.1 --T 10 --norm-coords all --out " +
                    (dir / "conv.json").string()),
            0);
  nlohmann::json conv = nlohmann::json::parse(testutil::slurp(dir / "conv.json"));
  EXPECT_LE(conv["ratio"].get<double>(), 1.0);

  EXPECT_EQ(run_cli("inspect masks --checkpoint " + ckpt + " --scope only_norm"), 0);
  EXPECT_EQ(run_cli("inspect masks --checkpoint " + ckpt + " --scope fisher_topk:0.9"), 0);
  EXPECT_EQ(run_cli("export hist --checkpoint " + ckpt + " --bins 10 --out " + (dir / "h.csv").string()), 0);
  const std::string hist = testutil::slurp(dir / "h.csv");
  EXPECT_EQ(hist.rfind("tag,bin_lo,bin_hi,count\r\n", 0), 0u);
}

TEST(Cli, ConfigErrorsExitOne) {
  auto dir = testutil::scratch_dir("cli_err");
  EXPECT_EQ(run_cli("train --config /nonexistent.json --out " + (dir / "x").string()), 1);

  auto cfg = write_config(dir, false);
  nlohmann::json j = nlohmann::json::parse(testutil::slurp(cfg));
  j["unknown_key"] = 1;
  std::ofstream(dir / "bad.json") << j.dump();
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.json").string() + " --out " + (dir / "x").string()), 1);

  // h > 1/L violates the step-size precondition of the bound
  EXPECT_EQ(run_cli("converge --fn quadratic --h 1.5 --rho 0.1 --T 5 --norm-coords all --out " +
                    (dir / "c.json").string()),
            1);
  // bad flags and missing subcommands are config errors too
  EXPECT_EQ(run_cli("converge --bogus 1"), 1);
  EXPECT_EQ(run_cli("nosuchcommand"), 1);
  EXPECT_EQ(run_cli("inspect masks --checkpoint /nonexistent.ckpt --scope all"), 1);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  auto dir = testutil::scratch_dir("cli_rt");
  // absurd learning rate overflows the parameters; the engine aborts the run
  nlohmann::json j = nlohmann::json::parse(testutil::slurp(write_config(dir, false)));
  j["optim"]["base"]["lr"] = 1e30;
  j["epochs"] = 5;
  std::ofstream(dir / "blowup.json") << j.dump();
  EXPECT_EQ(run_cli("train --config " + (dir / "blowup.json").string() + " --out " + (dir / "x").string()), 2);
}

TEST(Cli, HelpExitsZero) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("train --help"), 0);
}
