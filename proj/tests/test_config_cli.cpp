#include "calibfield/commands.hpp"
#include "calibfield/config.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

using namespace calibfield;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "calibfield_unit" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CALIBFIELD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_json(const fs::path& path, const json& doc) {
  std::ofstream(path) << doc.dump(2);
  return path;
}

json small_run(const fs::path& out) {
  return {{"seed", 3},
          {"output_dir", out.string()},
          {"dataset", {{"source", "three_cluster"}, {"three_cluster", {{"n", 300}}}}},
          {"arch", {{"hidden_width", 16}, {"hidden_layers", 1}, {"output_dim", 8}}},
          {"train", {{"max_epochs", 1}, {"batch_size", 64}}},
          {"grid", {{"sigmas", {0.3}}, {"lambdas", {0.0}}}}};
}

}  // namespace

TEST_CASE("global seed fills unset sub-seeds; explicit ones win") {
  const RunConfig a = config_from_json({{"seed", 9}});
  CHECK(a.split.seed == 9);
  CHECK(a.train.seed == 9);
  CHECK(a.dataset.three_cluster.seed == 9);
  const RunConfig b = config_from_json({{"seed", 9}, {"train", {{"seed", 2}}}});
  CHECK(b.train.seed == 2);
  CHECK(b.split.seed == 9);
}

TEST_CASE("unknown keys and wrong types name the field") {
  try {
    config_from_json({{"kernel", {{"sigmaa", 0.3}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("kernel.sigmaa") != std::string::npos);
  }
  CHECK_THROWS_AS(config_from_json({{"train", {{"max_epochs", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"arch", {{"preset", "huge"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"kernel", {{"sigma", -1.0}}}}).validate(), ConfigError);
}

TEST_CASE("presets and explicit architecture fields") {
  const RunConfig e = config_from_json({{"arch", {{"preset", "embedding"}}}});
  CHECK(e.arch.hidden_width == 512);
  CHECK(e.arch.output_dim == 128);
  const RunConfig o = config_from_json({{"arch", {{"preset", "embedding"}, {"output_dim", 32}}}});
  CHECK(o.arch.output_dim == 32);
  CHECK(o.arch.hidden_width == 512);
}

TEST_CASE("environment overrides nest on double underscores and parse json") {
  json doc = {{"kernel", {{"sigma", 0.3}}}};
  apply_env_overrides(doc, {{"CALIBFIELD_KERNEL__SIGMA", "1.5"},
                            {"CALIBFIELD_GRID__SIGMAS", "[0.1, 0.2]"},
                            {"CALIBFIELD_OUTPUT_DIR", "runs/x"},
                            {"OTHER_VAR", "1"}});
  CHECK(doc["kernel"]["sigma"] == 1.5);
  CHECK(doc["grid"]["sigmas"] == json::array({0.1, 0.2}));
  CHECK(doc["output_dir"] == "runs/x");
  CHECK_FALSE(doc.contains("other_var"));
  const RunConfig c = config_from_json(doc);
  CHECK(c.kernel.sigma == 1.5);
  CHECK(c.grid.sigmas.size() == 2);
  json scalar = {{"kernel", 3}};
  CHECK_THROWS_AS(apply_env_overrides(scalar, {{"CALIBFIELD_KERNEL__SIGMA", "1"}}), ConfigError);
}

TEST_CASE("resolved config round trips through json") {
  const RunConfig a = config_from_json({{"seed", 5}, {"loss", {{"lambda", 0.0}}}, {"audit", {{"bootstrap", 10}}}});
  const json once = config_to_json(a);
  const json twice = config_to_json(config_from_json(once));
  CHECK(once == twice);
}

TEST_CASE("command-line values beat the file") {
  const fs::path dir = fresh_dir("resolve");
  const fs::path cfg = write_json(dir / "c.json", {{"seed", 1}, {"jobs", 1}});
  CommandOverrides o;
  o.config_path = cfg;
  o.seed = 4;
  o.epsilon = 0.1;
  const RunConfig c = resolve_config(o);
  CHECK(c.seed == 4);
  CHECK(c.train.seed == 4);
  CHECK(c.regime.epsilon == 0.1);
}

TEST_CASE("generate writes data and a manifest whose hashes match") {
  const fs::path out = fresh_dir("generate");
  RunConfig c = config_from_json(small_run(out));
  cmd_generate(c);
  const json manifest = json::parse(std::ifstream(out / "manifest.json"));
  CHECK(manifest["rows"] == 300);
  REQUIRE(!manifest["files"].empty());
  for (const auto& f : manifest["files"]) {
    CHECK(sha256_file(out / f["path"].get<std::string>()) == f["sha256"].get<std::string>());
  }
  CHECK(fs::exists(out / "resolved_config.json"));
}

TEST_CASE("train then evaluate on a tiny run") {
  const fs::path out = fresh_dir("train_eval");
  const RunConfig c = config_from_json(small_run(out));
  cmd_train(c);
  REQUIRE(fs::exists(out / "checkpoint.bin"));
  const json meta = json::parse(std::ifstream(checkpoint_metadata_path(out / "checkpoint.bin")));
  CHECK(meta["sigma"] == 0.3);
  const json report = cmd_evaluate(c, out / "checkpoint.bin");
  for (const char* cond : {"raw", "corrected", "isotonic", "temperature"}) CHECK(report["conditions"].contains(cond));
  CHECK(report["corrected_in_range"] == true);
  CHECK(fs::exists(out / "report.json"));
  CHECK(fs::exists(out / "reliability_corrected.csv"));
}

TEST_CASE("sha256 of a known string") {
  const fs::path dir = fresh_dir("sha");
  std::ofstream(dir / "abc.txt", std::ios::binary) << "abc";
  CHECK(sha256_file(dir / "abc.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("cli exit codes") {
  const fs::path dir = fresh_dir("cli");
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("train --no-such-flag") == 2);
  const fs::path bad = write_json(dir / "bad.json", {{"kernel", {{"sigma", "wide"}}}});
  CHECK(run_cli("train --config " + bad.string()) == 2);
  const fs::path file_src =
      write_json(dir / "file.json", {{"dataset", {{"source", "file"}, {"path", (dir / "missing.csv").string()}}}});
  CHECK(run_cli("generate --config " + file_src.string()) == 2);
  CHECK(run_cli("train --config " + file_src.string() + " --out " + dir.string()) == 3);
  const fs::path ok = write_json(dir / "ok.json", small_run(dir / "gen"));
  CHECK(run_cli("generate --config " + ok.string() + " --format jsonl") == 0);
  CHECK(fs::exists(dir / "gen" / "dataset.jsonl"));
}
