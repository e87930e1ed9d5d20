#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "teachcut/json_io.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int status = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(TEACHCUT_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("teachcut_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(CliTest, SnrPrintsVerdict) {
  const Result r = run("snr --mp 1 --vp 1 --mr 0 --vr 1");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("improves=true"), std::string::npos);
  EXPECT_NE(r.out.find("snr_release=1"), std::string::npos);
  EXPECT_NE(r.out.find("snr_full=0.5"), std::string::npos);
}

TEST_F(CliTest, SnrRejectsNonPositivePrefixVariance) { EXPECT_EQ(run("snr --mp 1 --vp 0 --mr 0 --vr 1").status, 1); }

TEST_F(CliTest, UnknownFlagIsUsageError) {
  EXPECT_EQ(run("release --bogus").status, 1);
  EXPECT_EQ(run("").status, 1);
}

TEST_F(CliTest, SimulateThenReleaseZeroNoise) {
  const Result sim = run("simulate --out " + path("sim.jsonl") + " --count 20 --n 6 --tau 3 --noise 0 --seed 4");
  ASSERT_EQ(sim.status, 0);
  EXPECT_EQ(read_lines(path("ground_truth.jsonl")).size(), 20u);
  const Result rel = run("release --in " + path("sim.jsonl") + " --out " + path("out.jsonl") + " --top-k 4 --diag-dir " +
                         dir_.string());
  ASSERT_EQ(rel.status, 0);
  const auto lines = read_lines(path("out.jsonl"));
  ASSERT_EQ(lines.size(), 20u);
  for (const auto& line : lines) {
    rapidjson::Document d;
    d.Parse(line.c_str());
    ASSERT_FALSE(d.HasParseError());
    EXPECT_TRUE(d["release"]["accepted"].GetBool());
    EXPECT_EQ(d["release"]["release_segment"].GetUint(), 3u);
  }
  EXPECT_TRUE(fs::exists(path("bins.csv")));
  EXPECT_TRUE(fs::exists(path("margin_bins.csv")));
  EXPECT_EQ(read_lines(path("summary.csv")).size(), 2u);
}

TEST_F(CliTest, DiagnoseWritesCsv) {
  ASSERT_EQ(run("simulate --out " + path("sim.jsonl") + " --count 5 --n 4 --tau 2 --noise 0.1").status, 0);
  const Result r = run("diagnose --in " + path("sim.jsonl") + " --out-dir " + dir_.string() + " --bins 4");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("rollouts=5"), std::string::npos);
  EXPECT_EQ(read_lines(path("bins.csv")).size(), 5u);
}

TEST_F(CliTest, BadRecordsFailSoftOrStrict) {
  ASSERT_EQ(run("simulate --out " + path("sim.jsonl") + " --count 2 --n 4 --tau 2").status, 0);
  {
    std::ofstream f(path("sim.jsonl"), std::ios::app);
    f << "{\"rollout_id\":\"broken\"\n";
  }
  EXPECT_EQ(run("release --in " + path("sim.jsonl") + " --out " + path("o.jsonl")).status, 0);
  EXPECT_EQ(read_lines(path("o.jsonl")).size(), 2u);
  EXPECT_EQ(run("release --strict --in " + path("sim.jsonl") + " --out " + path("o.jsonl")).status, 2);
}

TEST_F(CliTest, StrategiesAndPermute) {
  ASSERT_EQ(run("simulate --out " + path("sim.jsonl") + " --count 10 --n 5 --tau 2 --noise 0.05").status, 0);
  EXPECT_EQ(run("release --in " + path("sim.jsonl") + " --out " + path("f.jsonl") + " --strategy fixed:7").status, 0);
  EXPECT_EQ(run("release --in " + path("sim.jsonl") + " --out " + path("f.jsonl") + " --strategy fixed").status, 1);
  EXPECT_EQ(run("release --in " + path("sim.jsonl") + " --out " + path("f.jsonl") + " --strategy nope").status, 1);
  EXPECT_EQ(run("release --in " + path("sim.jsonl") + " --out " + path("r.jsonl") + " --strategy random --seed 5").status,
            0);
  ASSERT_EQ(run("release --in " + path("sim.jsonl") + " --out " + path("b.jsonl")).status, 0);
  ASSERT_EQ(run("permute --in " + path("b.jsonl") + " --out " + path("p.jsonl") + " --seed 5").status, 0);
  const auto r = read_lines(path("r.jsonl"));
  const auto p = read_lines(path("p.jsonl"));
  ASSERT_EQ(r.size(), p.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    rapidjson::Document a;
    rapidjson::Document b;
    a.Parse(r[i].c_str());
    b.Parse(p[i].c_str());
    EXPECT_EQ(a["release"]["prefix_mask"], b["release"]["prefix_mask"]);
  }
}

TEST_F(CliTest, MissingInputIsUsageError) {
  EXPECT_EQ(run("release --in " + path("nope.jsonl") + " --out " + path("o.jsonl")).status, 1);
  ASSERT_EQ(run("simulate --out " + path("sim.jsonl") + " --count 1").status, 0);
  EXPECT_EQ(run("release --in " + path("sim.jsonl") + " --out " + path("missing/o.jsonl")).status, 1);
}

}  // namespace
