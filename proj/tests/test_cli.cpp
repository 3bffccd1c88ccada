#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hroa_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(HROA_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, FindCycleIsByteIdentical) {
  const auto a = scratch("a"), b = scratch("b");
  ASSERT_EQ(run("find-cycle --system rimless-wheel --out " + a.string()), 0);
  ASSERT_EQ(run("find-cycle --system rimless-wheel --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "orbit.csv"), slurp(b / "orbit.csv"));
  EXPECT_EQ(slurp(a / "orbit.json"), slurp(b / "orbit.json"));
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
}

TEST(Cli, MissingPrerequisiteNamesProducer) {
  const auto d = scratch("dep");
  EXPECT_EQ(run("surfaces --out " + d.string()), 3);
  EXPECT_EQ(run("audit --out " + d.string()), 3);
  const std::string cmd = std::string(HROA_CLI) + " linearize --out " + d.string() + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  std::string text;
  char buf[256];
  while (fgets(buf, sizeof buf, pipe)) text += buf;
  pclose(pipe);
  EXPECT_NE(text.find("'surfaces'"), std::string::npos) << text;
}

TEST(Cli, StagedPipelineReplaysFromManifest) {
  const auto a = scratch("stage"), b = scratch("replay");
  ASSERT_EQ(run("find-cycle --system van-der-pol --out " + a.string()), 0);
  for (const char* c : {"surfaces", "linearize", "design-lqr", "verify", "export-plot"})
    ASSERT_EQ(run(std::string(c) + " --out " + a.string()), 0) << c;
  ASSERT_EQ(run("audit --samples-per-phase 100 --out " + a.string()), 0);

  for (const char* f : {"orbit.json", "family.json", "ltv.json", "lqr.json", "certificate.json", "audit.json",
                        "plot.json", "manifest.json", "timings.json"}) {
    const auto j = nlohmann::json::parse(slurp(a / f));
    EXPECT_TRUE(j.contains("schema")) << f;
  }
  const auto audit = nlohmann::json::parse(slurp(a / "audit.json"));
  EXPECT_EQ(audit["boundary"]["violations"].get<long>(), 0);
  EXPECT_EQ(audit["boundary"]["samples"].get<long>(), 4000);

  // a fresh directory driven only by the manifest reproduces every artifact
  const std::string m = "--manifest " + (a / "manifest.json").string() + " --out " + b.string();
  ASSERT_EQ(run("verify " + m), 0);
  ASSERT_EQ(run("audit " + m), 0);
  ASSERT_EQ(run("export-plot " + m), 0);
  for (const char* f : {"orbit.csv", "family.json", "ltv.json", "lqr.json", "certificate.json", "audit.csv",
                        "audit.json", "region.csv", "plot.json", "manifest.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Cli, RejectsUnknownSystem) { EXPECT_NE(run("find-cycle --system pendulum --out /tmp"), 0); }
