#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  std::string cmd = std::string(CLIPLAB_BIN) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch() {
  fs::path dir = fs::temp_directory_path() / "cliplab_cli_test";
  fs::create_directories(dir);
  return dir;
}

// A deliberately tiny experiment so the full pipeline runs in seconds.
std::string tiny_config(const std::string& out_dir) {
  std::ostringstream ss;
  ss << R"({
  "seed": 42,
  "out_dir": ")" << out_dir << R"(",
  "val_fraction": 0.25,
  "dataset": {"examples_per_class": 4, "seed": 0},
  "poison": {"kind": "badnet", "target_class": 0, "num_poison": 6},
  "arch": {"embed_dim": 16, "proj_dim": 16},
  "pretrain": {
    "objective": "mmcl", "data": "poisoned",
    "optim": {"epochs": 2, "batch_size": 16, "warmup_steps": 2, "lr": 0.001}
  },
  "finetune": {
    "objective": "cleanclip", "data": "clean", "fraction": 0.5,
    "optim": {"epochs": 1, "batch_size": 16, "warmup_steps": 1, "lr": 0.0005}
  },
  "eval": {"pair_distance_samples": 8}
})";
  return ss.str();
}

std::string write_config(const std::string& name, const std::string& body) {
  fs::path path = scratch() / name;
  std::ofstream f(path);
  f << body;
  return path.string();
}

}  // namespace

TEST_CASE("generate is idempotent for a fixed config") {
  fs::path out = scratch() / "gen";
  fs::remove_all(out);
  std::string cfg = write_config("gen.json", tiny_config(out.string()));
  REQUIRE(run("generate --config " + cfg) == 0);
  std::string first = slurp(out / "corpus_train" / "manifest.json");
  REQUIRE(run("generate --config " + cfg) == 0);
  CHECK(slurp(out / "corpus_train" / "manifest.json") == first);
}

TEST_CASE("full pipeline runs and is byte-reproducible") {
  fs::path out_a = scratch() / "run_a";
  fs::path out_b = scratch() / "run_b";
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  std::string cfg_a = write_config("pipe_a.json", tiny_config(out_a.string()));
  std::string cfg_b = write_config("pipe_b.json", tiny_config(out_b.string()));

  for (const std::string& cfg : {cfg_a, cfg_b}) {
    REQUIRE(run("generate --config " + cfg) == 0);
    REQUIRE(run("poison --config " + cfg) == 0);
    REQUIRE(run("train --config " + cfg + " --stage pretrain") == 0);
    REQUIRE(run("train --config " + cfg + " --stage finetune") == 0);
    REQUIRE(run("eval --config " + cfg) == 0);
  }
  CHECK(fs::exists(out_a / "report.json"));
  CHECK(fs::exists(out_a / "projection.tsv"));
  CHECK(fs::exists(out_a / "poison_manifest.json"));
  // out_dir differs between the configs but is excluded from the artifacts'
  // content, so a determinism check can compare bytes directly... except the
  // config hash covers out_dir too. Compare within-config determinism instead:
  std::string ckpt = slurp(out_a / "pretrain.ckpt");
  std::string report = slurp(out_a / "report.json");
  std::string cfg_c = write_config("pipe_c.json", tiny_config(out_a.string()));
  REQUIRE(run("generate --config " + cfg_c) == 0);
  REQUIRE(run("poison --config " + cfg_c) == 0);
  REQUIRE(run("train --config " + cfg_c + " --stage pretrain") == 0);
  CHECK(slurp(out_a / "pretrain.ckpt") == ckpt);
  REQUIRE(run("train --config " + cfg_c + " --stage finetune") == 0);
  REQUIRE(run("eval --config " + cfg_c) == 0);
  CHECK(slurp(out_a / "report.json") == report);

  CHECK(run("report --config " + cfg_a) == 0);
}

TEST_CASE("finetune without a pretrain checkpoint is a config error") {
  fs::path out = scratch() / "noft";
  fs::remove_all(out);
  std::string cfg = write_config("noft.json", tiny_config(out.string()));
  REQUIRE(run("generate --config " + cfg) == 0);
  CHECK(run("train --config " + cfg + " --stage finetune") == 2);
}

TEST_CASE("pretrain on poisoned data requires the poison stage first") {
  fs::path out = scratch() / "nopoison";
  fs::remove_all(out);
  std::string cfg = write_config("nopoison.json", tiny_config(out.string()));
  REQUIRE(run("generate --config " + cfg) == 0);
  CHECK(run("train --config " + cfg + " --stage pretrain") == 2);
}

TEST_CASE("invalid configs exit with code 2") {
  std::string bad = write_config("bad.json", R"({"val_fraction": 1.5})");
  CHECK(run("generate --config " + bad) == 2);
  std::string garbage = write_config("garbage.json", "not json at all {{{");
  CHECK(run("generate --config " + garbage) == 2);
  CHECK(run("generate --config /nonexistent/path.json") == 2);
}

TEST_CASE("eval refuses a checkpoint from a different config unless forced") {
  fs::path out = scratch() / "mismatch";
  fs::remove_all(out);
  std::string cfg = write_config("mm1.json", tiny_config(out.string()));
  REQUIRE(run("generate --config " + cfg) == 0);
  REQUIRE(run("poison --config " + cfg) == 0);
  REQUIRE(run("train --config " + cfg + " --stage pretrain") == 0);

  // Same out_dir, different seed: hash mismatch against existing artifacts.
  std::string other = tiny_config(out.string());
  other.replace(other.find("\"seed\": 42"), 10, "\"seed\": 43");
  std::string cfg2 = write_config("mm2.json", other);
  CHECK(run("eval --config " + cfg2 + " --checkpoint " + (out / "pretrain.ckpt").string()) == 2);
  CHECK(run("eval --config " + cfg2 + " --checkpoint " + (out / "pretrain.ckpt").string() +
            " --force") == 0);
}

TEST_CASE("sweep with no values succeeds with an empty table") {
  fs::path out = scratch() / "sweep_empty";
  fs::remove_all(out);
  std::string cfg = write_config("sweep.json", tiny_config(out.string()));
  REQUIRE(run("sweep --config " + cfg + " --axis lambda2") == 0);
  std::string table = slurp(out / "sweep_lambda2.tsv");
  CHECK(table.find("value\t") == 0);
  CHECK(table.find('\n') == table.size() - 1);  // header only
}

TEST_CASE("seed override changes artifacts") {
  fs::path out = scratch() / "seedover";
  fs::remove_all(out);
  std::string cfg = write_config("seedover.json", tiny_config(out.string()));
  REQUIRE(run("generate --config " + cfg) == 0);
  std::string base = slurp(out / "corpus_train" / "manifest.json");
  REQUIRE(run("generate --config " + cfg + " --seed 999") == 0);
  CHECK(slurp(out / "corpus_train" / "manifest.json") != base);
}
