#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "deformer/config.hpp"
#include "deformer/errors.hpp"
#include "deformer/joint.hpp"

using namespace deformer;

namespace {

std::string temp_dir(const std::string& name) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(path);
  std::filesystem::create_directories(path);
  return path.string();
}

int run_cli(const std::string& args) {
  const std::string command = std::string(CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(command.c_str());
  return WEXITSTATUS(status);
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("profiles select the documented defaults") {
  const RunConfig desk = RunConfig::resolve("", {});
  CHECK(desk.profile() == "desk");
  CHECK(desk.get_double("optimizer.lr") == 1e-3);
  CHECK(desk.get_int("model.d_model") == 64);
  CHECK(desk.get_string("precision") == "f64");

  const RunConfig paper = RunConfig::resolve("", {{"profile", "paper"}});
  CHECK(paper.get_double("optimizer.lr") == 1e-6);
  CHECK(paper.get_int("model.d_model") == 512);
  CHECK(paper.get_int("model.heads") == 8);
  CHECK(paper.get_int("model.d_ff") == 2048);
  CHECK(paper.get_int("model.layers") == 6);
  CHECK(paper.get_int("model.components") == 150);
  CHECK(paper.get_string("precision") == "f32");
  CHECK(paper.get_double("optimizer.beta1") == 0.9);
  CHECK(paper.get_double("optimizer.beta2") == 0.999);
  CHECK(paper.get_double("optimizer.eps") == 1e-9);

  // K defaults to 10 orderings in both profiles.
  CHECK(desk.get_int("eval.orderings") == 10);
  CHECK(paper.get_int("eval.orderings") == 10);
}

TEST_CASE("config files override defaults and --set overrides files") {
  const std::string dir = temp_dir("deformer_cfg_test");
  {
    std::ofstream out(dir + "/run.cfg");
    out << "# comment line\n";
    out << "profile = paper\n";
    out << "optimizer.lr = 5e-4   # trailing comment\n";
    out << "\n";
    out << "model.layers = 3\n";
  }
  const RunConfig config = RunConfig::resolve(dir + "/run.cfg", {{"model.layers", "4"}});
  CHECK(config.profile() == "paper");
  CHECK(config.get_double("optimizer.lr") == 5e-4);
  CHECK(config.get_int("model.layers") == 4);
  CHECK(config.get_int("model.d_model") == 512);  // paper default survives
  std::filesystem::remove_all(dir);
}

TEST_CASE("unknown keys and malformed values are rejected with the key name") {
  CHECK_THROWS_WITH_AS(RunConfig::resolve("", {{"bogus.key", "1"}}), "unknown config key 'bogus.key'",
                       ConfigError);

  const RunConfig config = RunConfig::resolve("", {{"optimizer.lr", "banana"}});
  CHECK_THROWS_WITH_AS(config.get_double("optimizer.lr"),
                       "config key 'optimizer.lr': cannot parse 'banana' as a number", ConfigError);

  const RunConfig bad_choice = RunConfig::resolve("", {{"dataset.kind", "parquet"}});
  static constexpr const char* kKinds[] = {"synthetic_joint", "image_idx", "tabular_csv"};
  CHECK_THROWS_AS(bad_choice.get_choice("dataset.kind", kKinds), ConfigError);

  const std::string dir = temp_dir("deformer_cfg_bad");
  {
    std::ofstream out(dir + "/bad.cfg");
    out << "no equals sign here\n";
  }
  CHECK_THROWS_AS(RunConfig::resolve(dir + "/bad.cfg", {}), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("resolved config files reproduce the configuration exactly") {
  const std::string dir = temp_dir("deformer_cfg_resolved");
  const RunConfig config =
      RunConfig::resolve("", {{"profile", "paper"}, {"optimizer.lr", "2e-5"}, {"seed", "777"}});
  config.write_resolved(dir + "/resolved.txt");
  const RunConfig reloaded = RunConfig::resolve(dir + "/resolved.txt", {});
  CHECK(reloaded.values() == config.values());
  std::filesystem::remove_all(dir);
}

TEST_CASE("help table lists every key") {
  const std::string table = config_help_table();
  for (const auto& spec : RunConfig::keys()) {
    CHECK(table.find(spec.key) != std::string::npos);
  }
}

TEST_CASE("cli exit codes follow the documented mapping") {
  CHECK(run_cli("selftest") == 0);
  CHECK(run_cli("definitely-not-a-command") == 1);
  CHECK(run_cli("train --set bogus.key=1") == 2);                       // config error
  CHECK(run_cli("train --set optimizer.lr=banana --set dataset.joint=x") == 2);
  CHECK(run_cli("eval --set checkpoint.path=/does/not/exist.ckpt") == 3);  // data error
  CHECK(run_cli("train") == 2);  // synthetic_joint dataset without a joint path
}

TEST_CASE("rerunning from the resolved config reproduces the checkpoint bit-exactly") {
  const std::string dir = temp_dir("deformer_cli_repro");
  SyntheticJoint::random(3, 99).save(dir + "/joint.txt");

  const std::string common = "train --set dataset.joint=" + dir + "/joint.txt" +
                             " --set dataset.train_samples=200 --set dataset.val_samples=40" +
                             " --set dataset.test_samples=40 --set optimizer.max_epochs=2" +
                             " --set model.d_model=16 --set model.heads=2 --set model.d_ff=32" +
                             " --set model.mlp_hidden1=8 --set model.mlp_hidden2=16";
  REQUIRE(run_cli(common + " --out " + dir + "/run_a") == 0);
  REQUIRE(run_cli("train --config " + dir + "/run_a/resolved_config.txt --out " + dir + "/run_b") == 0);

  auto a = read_bytes(dir + "/run_a/last.ckpt");
  auto b = read_bytes(dir + "/run_b/last.ckpt");
  CHECK(a == b);

  // The training log rows match except for wall-clock seconds.
  std::ifstream log_a(dir + "/run_a/training_log.csv"), log_b(dir + "/run_b/training_log.csv");
  std::string line_a, line_b;
  while (std::getline(log_a, line_a) && std::getline(log_b, line_b)) {
    CHECK(line_a.substr(0, line_a.rfind(',')) == line_b.substr(0, line_b.rfind(',')));
  }
  std::filesystem::remove_all(dir);
}
