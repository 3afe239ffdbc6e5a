#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + COME_CLI_PATH + "\" " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {};
  Outcome o;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) o.out.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

// Value printed after `key ` on its own output line.
std::string field(const std::string& out, const std::string& key) {
  std::istringstream in(out);
  for (std::string line; std::getline(in, line);)
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  return "";
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static inline fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("come-cli-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }

  static json base() {
    json j = load_json(COME_DEFAULT_CONFIG);
    j["output_dir"] = (dir / "out").string();
    return j;
  }

  static std::string write_config(const std::string& name, const json& j) {
    const auto p = dir / name;
    std::ofstream(p) << j.dump(2);
    return "\"" + p.string() + "\"";
  }
};

}  // namespace

TEST_F(Cli, MissingFieldIsAConfigErrorNamingTheField) {
  json j = base();
  j["task"].erase("seed");
  const auto o = run_cli("pretrain " + write_config("missing.json", j));
  EXPECT_EQ(o.code, 2) << o.out;
  EXPECT_NE(o.out.find("task.seed"), std::string::npos) << o.out;
}

TEST_F(Cli, UnknownKeysAndValuesAreConfigErrors) {
  json j = base();
  j["adapt"]["step_size"] = 0.1;
  auto o = run_cli("pretrain " + write_config("unknown-key.json", j));
  EXPECT_EQ(o.code, 2) << o.out;
  EXPECT_NE(o.out.find("step_size"), std::string::npos) << o.out;

  j = base();
  j["adapt"]["objective"]["kind"] = "tent";
  o = run_cli("pretrain " + write_config("unknown-objective.json", j));
  EXPECT_EQ(o.code, 2) << o.out;

  j = base();
  j["adapt"]["learning_rate"] = -1.0;
  o = run_cli("pretrain " + write_config("negative-lr.json", j));
  EXPECT_EQ(o.code, 2) << o.out;

  EXPECT_EQ(run_cli("pretrain \"" + (dir / "absent.json").string() + "\"").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("adapt " + write_config("ok.json", base()) + " --objective tent").code, 2);
}

TEST_F(Cli, PretrainIsDeterministicAndAccurate) {
  const auto cfg = write_config("pretrain.json", base());
  const auto a = run_cli("pretrain " + cfg);
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_GE(std::stod(field(a.out, "clean_acc")), 0.95);
  const fs::path ckpt = field(a.out, "checkpoint");
  ASSERT_TRUE(fs::exists(ckpt));
  const auto first = slurp(ckpt);
  const auto report = load_json(field(a.out, "report"));
  EXPECT_GE(report.at("clean_acc").get<double>(), 0.95);

  const auto b = run_cli("pretrain " + cfg);
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(field(b.out, "checkpoint"), ckpt.string());
  EXPECT_EQ(slurp(ckpt), first);
}

TEST_F(Cli, AdaptWritesTrajectoryAndSummary) {
  json j = base();
  j["scenario"]["num_batches"] = 40;
  const auto cfg = write_config("adapt.json", j);
  ASSERT_EQ(run_cli("pretrain " + cfg).code, 0);
  const auto o = run_cli("adapt " + cfg + " --objective come");
  ASSERT_EQ(o.code, 0) << o.out;

  const auto summary = load_json(field(o.out, "summary"));
  for (const char* key : {"acc", "fpr95", "auroc", "mean_conf", "mean_u", "mean_abs_du", "n", "steps", "collapsed",
                          "aborted", "collapse_step", "diagnostic", "objective", "scenario", "score", "stream_hash",
                          "config_hash"})
    EXPECT_TRUE(summary.contains(key)) << key;
  EXPECT_EQ(summary.at("objective"), "come");
  EXPECT_EQ(summary.at("steps").get<int>(), 40);
  EXPECT_FALSE(summary.at("collapsed").get<bool>());
  const double acc = summary.at("acc").get<double>();
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);

  const auto traj = lines(slurp(field(o.out, "trajectory")));
  EXPECT_EQ(traj.size(), 41u);
  EXPECT_EQ(lines(slurp(field(o.out, "rows"))).size(), 40u * 64u);
  const auto hist = lines(slurp(field(o.out, "histogram")));
  EXPECT_EQ(hist.front(), "bin_left,bin_right,count");
  EXPECT_EQ(hist.size(), 21u);

  // Same inputs, same bytes.
  const auto before = slurp(field(o.out, "summary"));
  ASSERT_EQ(run_cli("adapt " + cfg + " --objective come").code, 0);
  EXPECT_EQ(slurp(field(o.out, "summary")), before);
}

TEST_F(Cli, AdaptWithoutCheckpointIsAUsageError) {
  json j = base();
  j["output_dir"] = (dir / "empty").string();
  EXPECT_EQ(run_cli("adapt " + write_config("no-ckpt.json", j)).code, 2);
}

TEST_F(Cli, EmCollapseFixtureExitsZeroWithPartialTrajectory) {
  json j = load_json(COME_COLLAPSE_CONFIG);
  j["output_dir"] = (dir / "collapse").string();
  const auto cfg = write_config("collapse.json", j);
  ASSERT_EQ(run_cli("pretrain " + cfg).code, 0);
  const auto o = run_cli("adapt " + cfg);
  ASSERT_EQ(o.code, 0) << o.out;
  EXPECT_NE(o.out.find("collapsed true"), std::string::npos) << o.out;

  const auto summary = load_json(field(o.out, "summary"));
  EXPECT_TRUE(summary.at("collapsed").get<bool>());
  const int steps = summary.at("steps").get<int>();
  EXPECT_LT(steps, j["scenario"]["num_batches"].get<int>());
  EXPECT_EQ(summary.at("collapse_step").get<int>(), steps - 1);
  EXPECT_EQ(lines(slurp(field(o.out, "trajectory"))).size(), static_cast<std::size_t>(steps) + 1);
}

TEST_F(Cli, CompareRunsObjectivesOnIdenticalStreams) {
  json j = base();
  j["output_dir"] = (dir / "compare").string();
  j["scenario"]["num_batches"] = 20;
  const auto o = run_cli("compare " + write_config("compare.json", j) + " --objectives em,come --scenarios standard,open_world");
  ASSERT_EQ(o.code, 0) << o.out;
  const auto rows = lines(slurp(field(o.out, "table")));
  ASSERT_EQ(rows.size(), 1u + 4u + 4u);
  EXPECT_EQ(rows[0],
            "seed,objective,scenario,acc,fpr95,auroc,mean_conf,collapsed,stream_hash,d_acc_vs_em,d_fpr95_vs_em,config_hash");
  std::map<std::string, std::set<std::string>> hashes;
  for (std::size_t i = 1; i < 5; ++i) {
    const auto cols = split(rows[i], ',');
    ASSERT_EQ(cols.size(), 12u) << rows[i];
    EXPECT_EQ(cols[0], "0");
    hashes[cols[2]].insert(cols[8]);
    if (cols[1] == "em") {
      EXPECT_EQ(cols[9], "0");
    }
  }
  ASSERT_EQ(hashes.size(), 2u);
  for (const auto& [scenario, h] : hashes) EXPECT_EQ(h.size(), 1u) << scenario;
  EXPECT_NE(*hashes["standard"].begin(), *hashes["open_world"].begin());
  for (std::size_t i = 5; i < rows.size(); ++i) EXPECT_EQ(split(rows[i], ',')[0], "mean");
}

TEST_F(Cli, CompareOneObjectiveGivesOneRowPerScenario) {
  json j = base();
  j["output_dir"] = (dir / "compare-one").string();
  j["scenario"]["num_batches"] = 10;
  const auto o = run_cli("compare " + write_config("compare-one.json", j) + " --objectives come");
  ASSERT_EQ(o.code, 0) << o.out;
  const auto rows = lines(slurp(field(o.out, "table")));
  ASSERT_EQ(rows.size(), 1u + 5u + 5u);
  std::set<std::string> scenarios;
  for (std::size_t i = 1; i < 6; ++i) scenarios.insert(split(rows[i], ',')[2]);
  EXPECT_EQ(scenarios, (std::set<std::string>{"standard", "open_world", "lifelong", "imbalanced", "mixed"}));
}

TEST(Verify, DeterministicPassingAndFaultInjection) {
  const auto a = run_cli("verify --seed 11 --trials 50");
  EXPECT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out.find("FAIL"), std::string::npos) << a.out;
  EXPECT_EQ(run_cli("verify --seed 11 --trials 50").out, a.out);
  EXPECT_EQ(run_cli("verify").code, 0);

  const auto bad = run_cli("verify --seed 11 --trials 50 --inject-fault");
  EXPECT_EQ(bad.code, 3) << bad.out;
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_NE(bad.out.find("counterexample"), std::string::npos);
  EXPECT_EQ(run_cli("verify --trials 0").code, 2);
}
