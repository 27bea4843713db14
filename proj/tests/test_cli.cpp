#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "gode/cli.hpp"
#include "gode/error.hpp"
#include "test_util.hpp"

using namespace gode;
using namespace gode::cli;
using gode::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "gode");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// "key value" lines of the params command.
std::map<std::string, long> parse_counts(const std::string& text) {
  std::map<std::string, long> out;
  std::istringstream is(text);
  std::string key, value;
  while (is >> key >> value) {
    if (key != "family") out[key] = std::stol(value);
  }
  return out;
}

std::string line_with(const std::string& text, const std::string& prefix) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind(prefix, 0) == 0) return line;
  }
  return "";
}

std::vector<std::string> synthetic_train(const fs::path& out, const std::string& family = "gode") {
  return {"train",      "--dataset", "synthetic", "--synthetic-n", "40",       "--family", family,
          "--width",    "4",         "--epochs",  "2",             "--batch",  "16",       "--step",
          "0.25",       "--out",     out.string(), "--seed",       "3"};
}

}  // namespace

TEST_CASE("invalid spline basis exits with code 2 and names the constraint") {
  const auto r = invoke({"params", "--family", "gode", "--n", "2", "--k", "3"});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("n >= k + 1") != std::string::npos);

  TempDir dir("cli_bad");
  const auto t = invoke({"train", "--dataset", "synthetic", "--n", "1", "--k", "1", "--out", dir.path.string()});
  CHECK(t.code == kExitConfig);
  CHECK(t.err.find("n >= k + 1") != std::string::npos);
}

TEST_CASE("usage and data errors map to exit codes") {
  CHECK(invoke({}).code == kExitConfig);
  CHECK(invoke({"train", "--no-such-flag"}).code == kExitConfig);
  CHECK(invoke({"params", "--family", "transformer"}).code == kExitConfig);
  CHECK(invoke({"--help"}).code == kExitOk);

  TempDir dir("cli_data");
  const auto missing = invoke({"train", "--dataset", "mnist", "--data-dir", (dir.path / "nothing").string(),
                               "--out", dir.path.string(), "--epochs", "1"});
  CHECK(missing.code == kExitData);
  CHECK(missing.err.find("missing data file") != std::string::npos);

  std::ofstream(dir.path / "junk.ckpt") << "not a checkpoint";
  CHECK(invoke({"eval", "--checkpoint", (dir.path / "junk.ckpt").string(), "--dataset", "synthetic"}).code ==
        kExitData);
}

TEST_CASE("train writes report, checkpoint and resolved config") {
  TempDir dir("cli_train");
  const auto r = invoke(synthetic_train(dir.path));
  REQUIRE(r.code == kExitOk);
  const auto line = line_with(r.out, "run directory ");
  REQUIRE(!line.empty());
  const fs::path run_dir = line.substr(std::string("run directory ").size());
  CHECK(run_dir.parent_path() == dir.path);
  CHECK(run_dir.filename().string().ends_with("-seed3"));
  CHECK(fs::exists(run_dir / "report.csv"));
  CHECK(fs::exists(run_dir / "timing.csv"));
  CHECK(fs::exists(run_dir / "model.ckpt"));
  CHECK(fs::exists(run_dir / "config.json"));
  CHECK(slurp(run_dir / "report.csv").rfind("epoch,lr,train_loss,train_acc,test_error_pct\n", 0) == 0);

  const auto echoed = RunConfig::from_json(slurp(run_dir / "config.json"));
  CHECK(echoed.seed == 3);
  CHECK(echoed.width == 4);
  CHECK(echoed.epochs == 2);
  CHECK(echoed.dataset == DatasetKind::synthetic);
  CHECK(run_directory(echoed) == run_dir);
  CHECK(RunConfig::from_json(echoed.to_json()) == echoed);

  const auto e = invoke({"eval", "--checkpoint", (run_dir / "model.ckpt").string(), "--config",
                         (run_dir / "config.json").string()});
  REQUIRE(e.code == kExitOk);
  CHECK(e.out.rfind("test_error_pct ", 0) == 0);
}

TEST_CASE("reruns produce byte-identical CSVs") {
  TempDir a("cli_rerun_a"), b("cli_rerun_b");
  REQUIRE(invoke(synthetic_train(a.path)).code == kExitOk);
  REQUIRE(invoke(synthetic_train(b.path)).code == kExitOk);
  const auto dir_a = *fs::directory_iterator(a.path);
  const auto dir_b = *fs::directory_iterator(b.path);
  CHECK(dir_a.path().filename() == dir_b.path().filename());
  CHECK(slurp(dir_a.path() / "report.csv") == slurp(dir_b.path() / "report.csv"));
  CHECK(slurp(dir_a.path() / "model.ckpt") == slurp(dir_b.path() / "model.ckpt"));

  // A different seed lands in a different directory of the same config hash.
  auto args = synthetic_train(a.path);
  args.back() = "4";
  REQUIRE(invoke(args).code == kExitOk);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(a.path)) names.push_back(entry.path().filename().string());
  REQUIRE(names.size() == 2);
  CHECK(names[0].substr(0, 16) == names[1].substr(0, 16));
}

TEST_CASE("config precedence and strictness") {
  TempDir dir("cli_config");
  const auto file = dir.path / "c.json";
  std::ofstream(file) << R"({"width": 8, "n": 6, "epochs": 3})";
  const auto r = invoke({"params", "--config", file.string(), "--n", "4", "--dataset", "cifar10"});
  REQUIRE(r.code == kExitOk);
  RunConfig expected;
  expected.width = 8;
  expected.n = 4;
  expected.dataset = DatasetKind::cifar10;
  CHECK(parse_counts(r.out)["total"] == static_cast<long>(count_params(expected.model_spec())));

  std::ofstream(file) << R"({"width": 8, "colour": "blue"})";
  const auto bad = invoke({"params", "--config", file.string()});
  CHECK(bad.code == kExitConfig);
  CHECK(bad.err.find("colour") != std::string::npos);

  CHECK_THROWS_AS(RunConfig::from_json("{\"width\": \"wide\"}"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json("not json"), ConfigError);

  RunConfig cfg;
  cfg.family = Family::node;
  cfg.lr_drops = std::vector<int>{1, 2};
  cfg.precision = "f64";
  CHECK(RunConfig::from_json(cfg.to_json()) == cfg);
  CHECK(RunConfig::from_json(cfg.resolved().to_json()) == cfg.resolved());
  CHECK(config_hash(cfg) != config_hash(RunConfig{}));
  auto reseeded = cfg;
  reseeded.seed = 99;
  reseeded.out = "elsewhere";
  CHECK(config_hash(reseeded) == config_hash(cfg));
}

TEST_CASE("default lr drops fall below the epoch count") {
  RunConfig cfg;
  cfg.epochs = 5;
  CHECK(cfg.resolved().lr_drops->empty());
  cfg.epochs = 120;
  CHECK(*cfg.resolved().lr_drops == std::vector<int>{60, 100});
  CHECK(*RunConfig{}.resolved().lr_drops == std::vector<int>{60, 100, 140});
}

TEST_CASE("params marginals over n and k") {
  auto total = [](int n, int k) {
    const auto r = invoke({"params", "--dataset", "cifar10", "--width", "64", "--layers", "2", "--n",
                           std::to_string(n), "--k", std::to_string(k)});
    REQUIRE(r.code == kExitOk);
    return parse_counts(r.out)["total"];
  };
  for (int n : {2, 4, 6}) CHECK(total(n + 2, 1) - total(n, 1) == 147456);
  for (int k = 1; k <= 5; ++k) CHECK(total(8, k) == total(8, 1));

  const auto r = invoke({"params", "--dataset", "cifar10", "--width", "64", "--n", "8", "--k", "1"});
  const auto counts = parse_counts(r.out);
  CHECK(counts.at("downsampling") + counts.at("core") + counts.at("head") == counts.at("total"));
  CHECK(line_with(r.out, "family") == "family gode");

  const auto node = invoke({"params", "--dataset", "cifar10", "--family", "node", "--width", "64"});
  const double node_total = static_cast<double>(parse_counts(node.out)["total"]);
  CHECK(std::abs(node_total - 210000.0) / 210000.0 < 0.02);
}

TEST_CASE("grid over n reports the parameter marginals") {
  TempDir dir("cli_grid");
  const auto r = invoke({"grid", "--axis", "n", "--values", "2,4", "--dataset", "synthetic", "--synthetic-n",
                         "20", "--width", "4", "--epochs", "1", "--batch", "20", "--step", "0.5", "--out",
                         dir.path.string()});
  REQUIRE(r.code == kExitOk);
  const auto line = line_with(r.out, "grid directory ");
  const fs::path grid_dir = line.substr(std::string("grid directory ").size());
  const auto csv = slurp(grid_dir / "grid.csv");
  std::istringstream is(csv);
  std::string header, row2, row4;
  std::getline(is, header);
  std::getline(is, row2);
  std::getline(is, row4);
  CHECK(header == "n,params,test_error_pct");
  auto params_of = [](const std::string& row) {
    const auto a = row.find(','), b = row.find(',', a + 1);
    return std::stol(row.substr(a + 1, b - a - 1));
  };
  // Width 4, L = 2: each extra control point adds 2 * 4 * 4 * 9 = 288.
  CHECK(params_of(row4) - params_of(row2) == 2 * 288);
  CHECK(fs::exists(grid_dir / "grid_timing.csv"));
  CHECK(fs::exists(grid_dir / "n=2" / "model.ckpt"));

  CHECK(invoke({"grid", "--axis", "width", "--values", "1", "--out", dir.path.string()}).code == kExitConfig);
  CHECK(invoke({"grid", "--axis", "n", "--values", "4", "--family", "node", "--out", dir.path.string()}).code ==
        kExitConfig);
}

TEST_CASE("gradcheck passes for every family and catches a corrupted rule") {
  for (const std::string family : {"resnet", "node", "gode"}) {
    const auto r = invoke({"gradcheck", "--family", family});
    INFO(r.out << r.err);
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("gradcheck passed") != std::string::npos);
  }
  const auto bad = invoke({"gradcheck", "--family", "gode", "--inject-fault", "conv2d", "--fault-factor", "1.01"});
  CHECK(bad.code == kExitFailure);
  CHECK(bad.err.find("worst tensor") != std::string::npos);
  // The hook is cleared afterwards.
  CHECK(invoke({"gradcheck", "--family", "gode"}).code == kExitOk);
}

TEST_CASE("trajectory export from checkpoints") {
  TempDir dir("cli_traj");
  REQUIRE(invoke(synthetic_train(dir.path, "node")).code == kExitOk);
  const auto node_dir = (*fs::directory_iterator(dir.path)).path();
  const auto r = invoke({"trajectory", "--checkpoint", (node_dir / "model.ckpt").string(), "--t-count", "11"});
  REQUIRE(r.code == kExitOk);
  std::istringstream is(r.out);
  const auto traj = read_trajectory_csv(is);
  CHECK(traj.t.size() == 11);
  CHECK(traj.entries == 9);
  for (std::size_t row = 0; row < traj.t.size(); ++row) {
    for (std::size_t e = 0; e < traj.entries; ++e) CHECK(traj.at(row, e) == traj.at(0, e));
  }

  const auto one = invoke({"trajectory", "--checkpoint", (node_dir / "model.ckpt").string(), "--t-count", "1",
                           "--csv", (dir.path / "one.csv").string()});
  REQUIRE(one.code == kExitOk);
  std::ifstream in(dir.path / "one.csv");
  const auto single = read_trajectory_csv(in);
  CHECK(single.t == std::vector<double>{0.0});

  TempDir res("cli_traj_res");
  REQUIRE(invoke(synthetic_train(res.path, "resnet")).code == kExitOk);
  const auto res_dir = (*fs::directory_iterator(res.path)).path();
  CHECK(invoke({"trajectory", "--checkpoint", (res_dir / "model.ckpt").string()}).code == kExitConfig);
}

TEST_CASE("eval can swap the solver") {
  TempDir dir("cli_eval");
  REQUIRE(invoke(synthetic_train(dir.path)).code == kExitOk);
  const auto run_dir = (*fs::directory_iterator(dir.path)).path();
  const auto ckpt = (run_dir / "model.ckpt").string();
  const auto cfg = (run_dir / "config.json").string();
  const auto euler = invoke({"eval", "--checkpoint", ckpt, "--config", cfg});
  const auto dopri = invoke({"eval", "--checkpoint", ckpt, "--config", cfg, "--solver", "dopri5", "--rtol", "1e-3"});
  REQUIRE(euler.code == kExitOk);
  REQUIRE(dopri.code == kExitOk);
  CHECK(invoke({"eval", "--checkpoint", ckpt, "--config", cfg, "--solver", "rk4"}).code == kExitConfig);
}

TEST_CASE("the installed binary reports exit codes") {
  const char* binary = std::getenv("GODE_BINARY");
  if (!binary) return;
  const std::string cmd = std::string(binary) + " params --n 1 --k 2 > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == kExitConfig);
  const int ok = std::system((std::string(binary) + " params > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(ok) == kExitOk);
}
