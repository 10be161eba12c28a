#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <regex>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "volseg_cli_test";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run volseg(const std::string& args) {
  const auto err_path = scratch() / ("stderr_" + std::to_string(::getpid()));
  const std::string cmd = std::string(VOLSEG_CLI) + " " + args + " 2>" + err_path.string();
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) r.out.append(buf, n);
  const int raw = ::pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.err = slurp(err_path);
  return r;
}

std::string path(const std::string& leaf) { return (scratch() / leaf).string(); }

double number_after(const std::string& text, const std::string& label) {
  std::smatch m;
  const std::regex re("(?:^|\n)" + label + R"(\s+(-?[0-9.]+))");
  if (!std::regex_search(text, m, re)) return -1.0;
  return std::stod(m[1]);
}

}  // namespace

TEST(Cli, RequiresASubcommandAndRejectsUnknownFlags) {
  EXPECT_NE(volseg("").status, 0);
  auto r = volseg("complexity --frobnicate 3");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos) << r.err;
  EXPECT_TRUE(r.out.empty());
  EXPECT_NE(volseg("complexity --format yaml").status, 0);
  EXPECT_NE(volseg("train --precision f16").status, 0);
}

TEST(Cli, ComplexityTableForV2) {
  auto r = volseg("complexity");
  ASSERT_EQ(r.status, 0) << r.err;
  const double params = number_after(r.out, "params");
  EXPECT_NEAR(params, 15.30e6, 0.10 * 15.30e6);
  const double flops = number_after(r.out, "flops/case");
  EXPECT_NEAR(flops, 240.66e9, 0.10 * 240.66e9);
  EXPECT_EQ(static_cast<std::uint64_t>(number_after(r.out, "flops/slice")),
            static_cast<std::uint64_t>(flops) / 128);
  EXPECT_EQ(r.out.find("remainder"), std::string::npos);
}

TEST(Cli, CompareReportsReductions) {
  for (const char* conv : {"mac", "flops2"}) {
    auto r = volseg(std::string("complexity --compare transbts_v1 --convention ") + conv);
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_NEAR(number_after(r.out, "params reduction"), 53.62, 3.0) << r.out;
    EXPECT_NEAR(number_after(r.out, "flops reduction"), 27.75, 3.0) << r.out;
  }
}

TEST(Cli, CsvReparsesToTheSameTotals) {
  auto table = volseg("complexity --config ablation_B+TR --input-size 64");
  auto csv = volseg("complexity --config ablation_B+TR --input-size 64 --format csv");
  ASSERT_EQ(csv.status, 0) << csv.err;
  std::istringstream in(csv.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "layer,section,kind,params,macs,aux,flops,output");
  std::uint64_t params = 0, flops = 0, total_params = 0, total_flops = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    ASSERT_GE(f.size(), 7u) << line;
    if (f[0] == "TOTAL") {
      total_params = std::stoull(f[3]);
      total_flops = std::stoull(f[6]);
    } else {
      params += std::stoull(f[3]);
      flops += std::stoull(f[6]);
    }
  }
  EXPECT_EQ(params, total_params);
  EXPECT_EQ(flops, total_flops);
  EXPECT_EQ(static_cast<std::uint64_t>(number_after(table.out, "params")), total_params);
  EXPECT_EQ(static_cast<std::uint64_t>(number_after(table.out, "flops/case")), total_flops);
}

TEST(Cli, JsonAndOutputFile) {
  const auto out = path("report.json");
  auto r = volseg("complexity --format json --compare v1 --output " + out);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(out), r.out);
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["input_shape"], (std::vector<int>{4, 128, 128, 128}));
  EXPECT_EQ(j["per_slice_remainder"], 0);
  EXPECT_NEAR(j["compare"]["params_reduction_percent"].get<double>(), 53.62, 3.0);
}

TEST(Cli, OutputsAreByteStable) {
  auto a = volseg("complexity --format csv --config micro");
  auto b = volseg("complexity --format csv --config micro");
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(volseg("ablation-table --input-size 32").out,
            volseg("ablation-table --input-size 32").out);
}

TEST(Cli, BadConfigNamesTheField) {
  const auto cfg = path("bad.cfg");
  std::ofstream(cfg) << "schema_version = 1\nheads = 7\n";
  auto r = volseg("complexity --config " + cfg);
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("heads"), std::string::npos) << r.err;
  std::ofstream(cfg) << "schema_version = 1\ntrain.learning_rate = 0.1\n";
  r = volseg("complexity --config " + cfg);
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos) << r.err;
  r = volseg("complexity --config no_such_preset");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("unknown preset"), std::string::npos) << r.err;
  r = volseg("complexity --config " + path("missing.cfg"));
  EXPECT_NE(r.status, 0);
}

TEST(Cli, InitConfigRoundTripsThroughComplexity) {
  const auto cfg = path("v1.cfg");
  fs::remove(cfg);
  ASSERT_EQ(volseg("init-config --preset transbts_v1 --output " + cfg).status, 0);
  EXPECT_EQ(volseg("complexity --config " + cfg).out, volseg("complexity --config v1").out);
  auto again = volseg("init-config --preset transbts_v1 --output " + cfg);
  EXPECT_NE(again.status, 0);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  EXPECT_EQ(volseg("init-config --preset transbts_v1 --force --output " + cfg).status, 0);
}

TEST(Cli, AblationTableLadder) {
  auto r = volseg("ablation-table");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("matches the full-row delta"), std::string::npos) << r.out;
  auto csv = volseg("ablation-table --format csv");
  std::istringstream in(csv.out);
  std::string line;
  std::getline(in, line);
  std::vector<std::uint64_t> params;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string name, p;
    std::getline(ls, name, ',');
    std::getline(ls, p, ',');
    params.push_back(std::stoull(p));
  }
  ASSERT_EQ(params.size(), 5u);
  for (std::size_t i = 1; i < params.size(); ++i) EXPECT_GT(params[i], params[i - 1]);
  EXPECT_NEAR(static_cast<double>(params.back()), 15.30e6, 0.10 * 15.30e6);
}

TEST(Cli, GradcheckPassesAndDetectsInjectedFault) {
  auto ok = volseg("gradcheck primitives --tol 1e-4");
  EXPECT_EQ(ok.status, 0) << ok.out << ok.err;
  EXPECT_NE(ok.out.find("units passed"), std::string::npos);
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
  auto bad = volseg("gradcheck primitives --only conv3d --inject-fault conv3d");
  EXPECT_EQ(bad.status, 1);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_NE(bad.err.find("conv3d"), std::string::npos);
  EXPECT_NE(volseg("gradcheck everything").status, 0);
  EXPECT_NE(volseg("gradcheck blocks --only nope").status, 0);
}

TEST(Cli, TrainIsDeterministicAndEvalReadsTheCheckpoint) {
  std::string digests[2];
  for (int i = 0; i < 2; ++i) {
    const auto ck = path("micro" + std::to_string(i) + ".ckpt");
    const auto log = path("micro" + std::to_string(i) + ".jsonl");
    auto r = volseg("train --config micro --precision f64 --seed 3 --checkpoint " + ck +
                    " --log " + log);
    ASSERT_EQ(r.status, 0) << r.err;
    std::smatch m;
    ASSERT_TRUE(std::regex_search(r.out, m, std::regex("digest ([0-9a-f]{16})")));
    digests[i] = m[1];
    std::istringstream lines(slurp(log));
    int n = 0;
    for (std::string l; std::getline(lines, l); ++n) {
      EXPECT_TRUE(nlohmann::json::accept(l)) << l;
    }
    EXPECT_EQ(n, 4);
  }
  EXPECT_EQ(digests[0], digests[1]);
  EXPECT_EQ(slurp(path("micro0.ckpt")), slurp(path("micro1.ckpt")));
  EXPECT_EQ(slurp(path("micro0.jsonl")), slurp(path("micro1.jsonl")));

  auto ev = volseg("eval --checkpoint " + path("micro0.ckpt"));
  ASSERT_EQ(ev.status, 0) << ev.err;
  EXPECT_NE(ev.out.find("mean dice"), std::string::npos);
  auto js = volseg("eval --format json --precision f64 --checkpoint " + path("micro0.ckpt"));
  ASSERT_EQ(js.status, 0) << js.err;
  auto j = nlohmann::json::parse(js.out);
  EXPECT_EQ(j["dice"].size(), 1u);
  EXPECT_GE(j["mean_dice"].get<double>(), 0.0);
}

TEST(Cli, EvalWithMismatchedConfigListsNames) {
  const auto ck = path("mm.ckpt");
  ASSERT_EQ(volseg("train --config micro --checkpoint " + ck + " --log " + path("mm.jsonl"))
                .status,
            0);
  const auto cfg = path("nodbm.cfg");
  fs::remove(cfg);
  ASSERT_EQ(volseg("init-config --preset micro --output " + cfg).status, 0);
  std::string text = slurp(cfg);
  text = std::regex_replace(text, std::regex("use_dbm = true"), "use_dbm = false");
  std::ofstream(cfg) << text;
  auto r = volseg("eval --checkpoint " + ck + " --config " + cfg);
  EXPECT_EQ(r.status, 3);
  EXPECT_NE(r.err.find("unexpected parameters"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("dbm"), std::string::npos) << r.err;
  auto missing = volseg("eval --checkpoint " + path("none.ckpt"));
  EXPECT_NE(missing.status, 0);
}
