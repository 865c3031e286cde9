#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#ifndef CDKD_CLI_PATH
#error "CDKD_CLI_PATH must name the cdkd executable"
#endif

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string("\"") + CDKD_CLI_PATH + "\" " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path work_dir() {
  const auto dir = fs::temp_directory_path() / "cdkd_test_cli";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(run("gen-data --optim.lr nope").code, 2);
  EXPECT_EQ(run("gen-data --no-such-flag 1").code, 2);
  EXPECT_EQ(run("").code, 2);
  const auto cfg = work_dir() / "bad.cfg";
  std::ofstream(cfg) << "data.n_train = 4\nmystery.key = 1\n";
  const auto r = run("gen-data --config " + cfg.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("bad.cfg:2"), std::string::npos) << r.out;
  EXPECT_EQ(run("train-student --baseline --optim.momentum 1.5").code, 2);
}

TEST(Cli, BadCheckpointExitsFour) {
  const auto ck = work_dir() / "garbage.ckpt";
  std::ofstream(ck) << "definitely not a checkpoint";
  const auto r = run("eval --checkpoint " + ck.string() + " --data.n_train 4 --data.n_val 4");
  EXPECT_EQ(r.code, 4) << r.out;
}

TEST(Cli, GenDataWritesSplitsAndEcho) {
  const auto out = work_dir() / "gen";
  fs::remove_all(out);
  const auto r = run("gen-data --data.n_train 6 --data.n_val 3 --paths.out_dir " + out.string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(out / "data" / "train.cdks"));
  EXPECT_TRUE(fs::exists(out / "data" / "val.cdks"));
  EXPECT_TRUE(fs::exists(out / "config.txt"));
}

TEST(Cli, EndToEndTeacherStudentEvalReport) {
  const auto dir = work_dir() / "e2e";
  fs::remove_all(dir);
  const std::string common =
      " --data.n_train 32 --data.n_val 16 --optim.batch_size 16 --optim.epochs 1"
      " --optim.teacher_epochs 1";
  auto r = run("train-teacher" + common + " --paths.out_dir " + (dir / "t").string());
  ASSERT_EQ(r.code, 0) << r.out;
  r = run("train-student" + common + " --paths.teacher " + (dir / "t" / "best.ckpt").string() +
          " --paths.out_dir " + (dir / "s").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("distilled"), std::string::npos);
  r = run("eval --strip --checkpoint " + (dir / "s" / "best.ckpt").string() + common);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("threshold,aggregate"), std::string::npos) << r.out;
  // The distilled checkpoint is rejected by the teacher network.
  r = run("eval --network teacher --checkpoint " + (dir / "s" / "best.ckpt").string() + common);
  EXPECT_EQ(r.code, 4) << r.out;
  r = run("report " + (dir / "s").string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir / "s" / "summary.txt"));
}

TEST(Cli, SelftestPasses) {
  const auto r = run("selftest");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}
