#include <doctest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

#ifndef TSDC_CLI_BIN
#error "TSDC_CLI_BIN must point at the command-line binary"
#endif

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(TSDC_CLI_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  char buf[4096];
  while (std::size_t got = std::fread(buf, 1, sizeof(buf), pipe)) r.output.append(buf, got);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// scratch directory shared by the suite, removed by the last test
fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "tsdc_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("simulate emits identical results for any thread count") {
  const fs::path a = scratch() / "sim_a.json";
  const fs::path b = scratch() / "sim_b.json";
  const std::string common =
      "simulate --scenario table1 --n1 150 --n0 70 --reps 3 --seed 9 "
      "--estimators tsiv,or,lik ";

  const CmdResult r1 = run_cli(common + "--threads 1 --out " + q(a));
  CAPTURE(r1.output);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.output.find("cell") != std::string::npos);
  CHECK(r1.output.find("tsiv") != std::string::npos);

  const CmdResult r3 = run_cli(common + "--threads 3 --out " + q(b));
  REQUIRE(r3.exit_code == 0);
  CHECK(slurp(a) == slurp(b));  // byte identical despite different scheduling

  const json j = json::parse(slurp(a));
  CHECK(j["scenario"] == "table1");
  CHECK(j["config"]["n1"] == 150);
  REQUIRE(j["cells"].size() == 4);
  for (const auto& cell : j["cells"]) REQUIRE(cell["rows"].size() == 3);

  const fs::path csv = scratch() / "sim_a.csv";
  REQUIRE(fs::exists(csv));
  const std::string head = slurp(csv).substr(0, 60);
  CHECK(head.find("scenario,ps_model,or_model,estimator,bias,sd") != std::string::npos);
}

TEST_CASE("estimate consumes an exported sample") {
  const fs::path data = scratch() / "sample.csv";
  const CmdResult ex = run_cli(
      "simulate --scenario table1 --n1 260 --n0 130 --reps 1 --seed 21 "
      "--estimators tsiv --export-sample " +
      q(data));
  CAPTURE(ex.output);
  REQUIRE(ex.exit_code == 0);
  REQUIRE(fs::exists(data));

  const fs::path out = scratch() / "est.json";
  const CmdResult r = run_cli("estimate --data " + q(data) +
                              " --instrument z0 --exog z1,z2 "
                              "--estimators tsiv,ts2sls,or,lik --bootstrap 12 --seed 4 "
                              "--threads 2 --out " +
                              q(out));
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("ts2sls:") != std::string::npos);

  const json j = json::parse(slurp(out));
  CHECK(j["n1"] == 260);
  CHECK(j["n0"] == 130);
  for (const char* name : {"tsiv", "ts2sls", "or", "lik"}) {
    REQUIRE(j["estimators"].contains(name));
    const json& jr = j["estimators"][name];
    REQUIRE(jr.contains("beta"));
    CHECK(jr["beta"].contains("x"));
    CHECK((jr.contains("se") || jr.contains("se_error")));
    REQUIRE(jr.contains("bootstrap"));
    CHECK(jr["bootstrap"]["B"] == 12);
  }
  const double b_or = j["estimators"]["or"]["beta"]["x"].get<double>();
  CHECK(b_or > 0.2);
  CHECK(b_or < 0.8);
}

TEST_CASE("estimate is reproducible across bootstrap thread counts") {
  const fs::path data = scratch() / "sample.csv";
  REQUIRE(fs::exists(data));  // produced by the previous test
  const fs::path o1 = scratch() / "est_t1.json";
  const fs::path o4 = scratch() / "est_t4.json";
  const std::string common = "estimate --data " + q(data) +
                             " --instrument z0 --exog z1,z2 --estimators or "
                             "--bootstrap 16 --seed 8 ";
  REQUIRE(run_cli(common + "--threads 1 --out " + q(o1)).exit_code == 0);
  REQUIRE(run_cli(common + "--threads 4 --out " + q(o4)).exit_code == 0);
  CHECK(slurp(o1) == slurp(o4));
}

TEST_CASE("balance reports weighted auxiliary means") {
  const fs::path data = scratch() / "sample.csv";
  REQUIRE(fs::exists(data));
  const fs::path out = scratch() / "bal.json";
  const CmdResult r =
      run_cli("balance --data " + q(data) + " --u-cols z0,z1,z2 --out " + q(out));
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("aux.w") != std::string::npos);
  const json j = json::parse(slurp(out));
  REQUIRE(j["columns"].size() == 3);
  // weighting should pull the auxiliary mean toward the primary one for z0
  const json& c0 = j["columns"][0];
  const double gap_raw =
      std::abs(c0["primary_mean"].get<double>() - c0["aux_mean"].get<double>());
  const double gap_w =
      std::abs(c0["primary_mean"].get<double>() - c0["aux_weighted_mean"].get<double>());
  CHECK(gap_w < gap_raw);
}

TEST_CASE("invalid requests exit with code 1") {
  CHECK(run_cli("simulate --scenario nope --reps 2").exit_code == 1);
  CHECK(run_cli("estimate --instrument z0").exit_code == 1);  // missing --data
  const fs::path data = scratch() / "sample.csv";
  CHECK(run_cli("estimate --data " + q(data) + " --instrument q9").exit_code == 1);
  CHECK(run_cli("estimate --data " + q(data) +
                " --instrument z0 --exog z1,z2 --ps-terms 1,q9 --estimators or")
            .exit_code == 1);
  CHECK(run_cli("simulate --estimators warp --reps 2").exit_code == 1);
}

TEST_CASE("estimator failures exit with code 2") {
  // perfectly separated propensity: the logistic fit cannot converge
  const fs::path data = scratch() / "separated.csv";
  {
    std::ofstream f(data);
    f << "t,z0,z1,x,y\n";
    for (int i = 0; i < 8; ++i)
      f << "1," << (1.0 + 0.5 * i) << "," << (0.3 * i) << ",," << (0.1 * i) << "\n";
    for (int i = 0; i < 8; ++i)
      f << "0," << (-1.0 - 0.5 * i) << "," << (0.2 * i) << "," << (0.4 * i) << ",\n";
  }
  const CmdResult r = run_cli("estimate --data " + q(data) +
                              " --instrument z0 --exog z1 --estimators ipw");
  CAPTURE(r.output);
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("failed") != std::string::npos);

  // cleanup for the whole suite (this case runs last in file order)
  std::error_code ec;
  fs::remove_all(scratch(), ec);
}

}  // TEST_SUITE
