// SPDX-License-Identifier: Apache-2.0
//
// Run-config parsing and end-to-end drives of the command-line binary.
// The binary path comes in through FACEADAPT_BIN (set by the build).

#include <doctest.h>

#include <faceadapt/manifest.hpp>
#include <faceadapt/runconfig.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

using namespace faceadapt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("faceadapt_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Runs the CLI from `dir`, captures stdout/stderr to files, returns the exit code.
struct CliRun {
  int code = -1;
  std::string out, err;
};

CliRun run_cli(const fs::path& dir, const std::string& args) {
  fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  std::string cmd = "cd '" + dir.string() + "' && '" + std::string(FACEADAPT_BIN) + "' " + args +
                    " > '" + out.string() + "' 2> '" + err.string() + "'";
  int raw = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

int line_count(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("empty config resolves to the full-scale presets") {
  RunConfig rc = parse_run_config(nlohmann::json::object());
  CHECK(rc.train.epochs == 40);
  CHECK(rc.train.batch_size == 512);
  CHECK(rc.train.base_lr == doctest::Approx(1e-4));
  CHECK(rc.train.weight_decay == doctest::Approx(0.05));
  CHECK(rc.train.rank == 16);
  CHECK(rc.train.alpha == doctest::Approx(16.0));
  CHECK(rc.train.mode == ScalingMode::RankStabilized);
  CHECK(rc.train.margin == doctest::Approx(0.3));
  CHECK(rc.train.scale == doctest::Approx(64.0));
  CHECK_FALSE(rc.train.per_head);
  CHECK(rc.vit.image_size == 56);
  CHECK(rc.vit.patch_size == 14);
  CHECK(rc.vit.channels == 1);
  CHECK(rc.vit.d_model == 192);
  CHECK(rc.vit.n_heads == 3);
  CHECK(rc.vit.n_layers == 4);
  CHECK(rc.subset.n == 0);  // no subsetting unless asked
  CHECK(rc.far_targets == std::vector<double>{1e-3, 1e-4, 1e-5});
}

TEST_CASE("unknown keys are rejected with their dotted path") {
  CHECK_THROWS_WITH_AS(parse_run_config({{"bogus", 1}}), "unknown config key 'bogus'",
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"train", {{"leraning_rate", 0.1}}}}),
                       "unknown config key 'train.leraning_rate'", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"model", {{"depth", 4}}}}),
                       "unknown config key 'model.depth'", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"eval", {{"roc", true}}}}),
                       "unknown config key 'eval.roc'", ConfigError);
}

TEST_CASE("type mismatches name the key and the expected type") {
  CHECK_THROWS_WITH_AS(parse_run_config({{"train", {{"epochs", "ten"}}}}),
                       "config key 'train.epochs' expects an integer", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"train", {{"base_lr", "fast"}}}}),
                       "config key 'train.base_lr' expects a number", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"train", {{"per_head", 1}}}}),
                       "config key 'train.per_head' expects a boolean", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"manifest", 7}}),
                       "config key 'manifest' expects a string", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"train", 7}}),
                       "config key 'train' expects an object", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"eval", {{"far_targets", "all"}}}}),
                       "config key 'eval.far_targets' expects an array of numbers", ConfigError);
}

TEST_CASE("invalid values fail validation by name") {
  CHECK_THROWS_WITH_AS(parse_run_config({{"train", {{"rank", -1}}}}), "rank must be positive",
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"train", {{"margin", 1.5}}}}),
                       "margin must be in [0, 1)", ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"command", "destroy"}}), "unknown command 'destroy'",
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config({{"eval", {{"far_targets", nlohmann::json::array()}}}}),
                       "eval.far_targets must not be empty", ConfigError);
  CHECK_THROWS(parse_run_config({{"eval", {{"far_targets", {1.5}}}}}));
}

TEST_CASE("one seed drives the derived streams unless pinned") {
  RunConfig rc = parse_run_config({{"seed", 123}});
  CHECK(rc.train.seed == 123);
  CHECK(rc.subset.seed == derive_seed(123, "subset"));
  CHECK(rc.synth.seed == derive_seed(123, "synth"));

  // explicit sub-seeds win over the derivation
  RunConfig pinned = parse_run_config({{"seed", 123}, {"subset", {{"seed", 5}}}});
  CHECK(pinned.subset.seed == 5);
  CHECK(pinned.synth.seed == derive_seed(123, "synth"));

  // train.seed (the stream actually used by training) also respects pinning
  RunConfig tpin = parse_run_config({{"seed", 123}, {"train", {{"seed", 77}}}});
  CHECK(tpin.train.seed == 77);
}

TEST_CASE("resolved config round-trips through the parser") {
  nlohmann::json user = {
      {"seed", 31},
      {"command", "train"},
      {"manifest", "data/manifest.csv"},
      {"out", "runs/a"},
      {"model", {{"image_size", 28}, {"patch_size", 7}, {"d_model", 24}, {"n_heads", 3},
                 {"n_layers", 2}, {"mlp_ratio", 2.0}}},
      {"train", {{"epochs", 3}, {"batch_size", 16}, {"mode", "standard"}, {"neck_dim", 32}}},
      {"subset", {{"width", 5}, {"mode", "top_by_image_count"}}},
  };
  RunConfig rc = parse_run_config(user);
  nlohmann::json snap = resolved_run_config(rc);
  RunConfig back = parse_run_config(snap);
  CHECK(resolved_run_config(back).dump(2) == snap.dump(2));
  CHECK(back.train.epochs == 3);
  CHECK(back.train.mode == ScalingMode::Standard);
  CHECK(back.subset.n == 5);
  CHECK(back.subset.mode == DepthMode::TopByImageCount);
  CHECK(back.vit.d_model == 24);
}

TEST_CASE("parsing the same document twice is deterministic") {
  nlohmann::json doc = {{"seed", 9}, {"train", {{"epochs", 4}}}};
  CHECK(resolved_run_config(parse_run_config(doc)).dump() ==
        resolved_run_config(parse_run_config(doc)).dump());
}

#ifdef FACEADAPT_BIN

TEST_CASE("cli: synth writes a loadable dataset under the run root") {
  fs::path dir = fresh_dir("synth");
  // relative --out goes under FACEADAPT_RUN_ROOT when that is set
  setenv("FACEADAPT_RUN_ROOT", (dir / "root").c_str(), 1);
  CliRun r = run_cli(dir, "synth --identities 6 --per-id 4 --size 28 --groups 0 "
                          "--pairs 30 --seed 9 --out data");
  unsetenv("FACEADAPT_RUN_ROOT");
  CAPTURE(r.err);
  REQUIRE(r.code == 0);

  fs::path data = dir / "root" / "data";
  CHECK(fs::exists(data / "config.json"));
  CHECK(fs::exists(data / "images"));
  DatasetManifest m = DatasetManifest::load(data / "manifest.csv");
  CHECK(m.records.size() == 24);
  CHECK(m.num_classes() == 6);
  PairProtocol proto = PairProtocol::load(data / "pairs.csv");
  CHECK(proto.pairs.size() == 60);  // 30 genuine + 30 impostor

  // the snapshot echoes the flags we passed
  nlohmann::json snap = nlohmann::json::parse(slurp(data / "config.json"));
  CHECK(snap["synth"]["identities"] == 6);
  CHECK(snap["synth"]["seed"] == 9);
}

namespace {

// one shared tiny dataset + config for the pipeline cases below
struct Pipeline {
  fs::path dir;
  Pipeline() : dir(fresh_dir("pipeline")) {
    CliRun s = run_cli(dir, "synth --identities 6 --per-id 4 --size 28 --groups 0 "
                            "--pairs 30 --seed 9 --out data");
    REQUIRE(s.code == 0);
    spit(dir / "cfg.json", R"({
      "manifest": "data/manifest.csv",
      "out": "run1",
      "model": { "image_size": 28, "patch_size": 7, "d_model": 24,
                 "n_heads": 3, "n_layers": 2, "mlp_ratio": 2.0 },
      "train": { "epochs": 2, "batch_size": 8, "base_lr": 0.001,
                 "rank": 2, "alpha": 4.0 },
      "seed": 99
    })");
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("cli: train writes snapshot, base model, checkpoints and metrics") {
  fs::path dir = pipeline().dir;
  CliRun r = run_cli(dir, "train --config cfg.json");
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("trained 6 steps on 24 images (6 classes)") != std::string::npos);

  CHECK(fs::exists(dir / "run1" / "config.json"));
  CHECK(fs::exists(dir / "run1" / "base-model.st"));
  CHECK(fs::exists(dir / "run1" / "checkpoint-epoch-0000.st"));
  CHECK(fs::exists(dir / "run1" / "checkpoint-epoch-0002.st"));
  // metrics: header + 3 steps/epoch * 2 epochs
  CHECK(line_count(slurp(dir / "run1" / "metrics.csv")) == 7);

  // the snapshot pins the backbone file so the run is reproducible from it alone
  nlohmann::json snap = nlohmann::json::parse(slurp(dir / "run1" / "config.json"));
  CHECK(snap["base_model"] == "run1/base-model.st");
  CHECK(snap["train"]["epochs"] == 2);
}

TEST_CASE("cli: retraining the same config is byte-identical") {
  fs::path dir = pipeline().dir;
  REQUIRE(fs::exists(dir / "run1" / "checkpoint-epoch-0002.st"));
  // reuse run1's backbone so both runs share weights, then compare checkpoints
  CliRun r = run_cli(dir, "train --config cfg.json --out run2");
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  // run2 starts from a fresh random backbone seeded the same way -> same bytes
  CHECK(slurp(dir / "run2" / "base-model.st") == slurp(dir / "run1" / "base-model.st"));
  CHECK(slurp(dir / "run2" / "checkpoint-epoch-0002.st") ==
        slurp(dir / "run1" / "checkpoint-epoch-0002.st"));
  CHECK(slurp(dir / "run2" / "metrics.csv") == slurp(dir / "run1" / "metrics.csv"));
}

TEST_CASE("cli: evaluate produces a stable report for adapters and merged weights") {
  fs::path dir = pipeline().dir;
  REQUIRE(fs::exists(dir / "run1" / "checkpoint-epoch-0002.st"));

  CliRun e1 = run_cli(dir, "evaluate --base run1/base-model.st "
                           "--checkpoint run1/checkpoint-epoch-0002.st "
                           "--protocol data/pairs.csv --out eval1");
  CAPTURE(e1.err);
  REQUIRE(e1.code == 0);
  CHECK(fs::exists(dir / "eval1" / "report.json"));
  CHECK(fs::exists(dir / "eval1" / "summary.csv"));
  CHECK(fs::exists(dir / "eval1" / "roc-pairs.csv"));
  CHECK(e1.out.find("pairs accuracy") != std::string::npos);

  // re-running is byte-identical
  CliRun e2 = run_cli(dir, "evaluate --base run1/base-model.st "
                           "--checkpoint run1/checkpoint-epoch-0002.st "
                           "--protocol data/pairs.csv --out eval2");
  REQUIRE(e2.code == 0);
  CHECK(slurp(dir / "eval1" / "report.json") == slurp(dir / "eval2" / "report.json"));

  // merging and evaluating the folded backbone gives the same verification accuracy
  CliRun m = run_cli(dir, "merge --base run1/base-model.st "
                          "--checkpoint run1/checkpoint-epoch-0002.st --out merged.st");
  CAPTURE(m.err);
  REQUIRE(m.code == 0);
  CHECK(fs::exists(dir / "merged.st"));
  CHECK(fs::exists(dir / "merged.st.config.json"));
  CHECK(m.out.find("fingerprint") != std::string::npos);

  CliRun e3 = run_cli(dir, "evaluate --base merged.st --protocol data/pairs.csv --out eval3");
  REQUIRE(e3.code == 0);
  auto acc = [](const std::string& report) {
    return nlohmann::json::parse(report)["benchmarks"]["pairs"]["accuracy"].get<double>();
  };
  const double merged_acc = acc(slurp(dir / "eval3" / "report.json"));
  const double adapter_acc = acc(slurp(dir / "eval1" / "report.json"));
  CHECK(std::abs(merged_acc - adapter_acc) <= 2.0);
}

TEST_CASE("cli: subset keeps the asked-for width and rejects the impossible") {
  fs::path dir = pipeline().dir;
  CliRun ok = run_cli(dir, "subset --manifest data/manifest.csv --width 3 --out sub.csv");
  CAPTURE(ok.err);
  REQUIRE(ok.code == 0);
  DatasetManifest sub = DatasetManifest::load(dir / "sub.csv");
  CHECK(sub.num_classes() == 3);
  CHECK(sub.records.size() == 12);
  CHECK(fs::exists(dir / "sub.csv.config.json"));

  CliRun bad = run_cli(dir, "subset --manifest data/manifest.csv --width 99 --out bad.csv");
  CHECK(bad.code == 2);
  CHECK(bad.err.find("subset width 99 outside 1..6") != std::string::npos);
}

TEST_CASE("cli: report-bias reproduces the published demographic rows") {
  fs::path dir = fresh_dir("bias");
  CliRun r = run_cli(dir, "report-bias --accuracies 75.25,75.68,84.75,78.58 "
                          "--groups African,Asian,Caucasian,Indian");
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("group Caucasian 84.75") != std::string::npos);
  CHECK(r.out.find("average 78.57") != std::string::npos);
  CHECK(r.out.find("std 4.38") != std::string::npos);
  CHECK(r.out.find("ser 1.62") != std::string::npos);

  CliRun inf_row = run_cli(dir, "report-bias --accuracies 100,95");
  REQUIRE(inf_row.code == 0);
  CHECK(inf_row.out.find("ser inf") != std::string::npos);

  CliRun nan_row = run_cli(dir, "report-bias --accuracies 95,abc");
  CHECK(nan_row.code == 2);
  CHECK(nan_row.err.find("'abc' is not a number") != std::string::npos);
}

TEST_CASE("cli: print-config emits the resolved snapshot") {
  fs::path dir = fresh_dir("printcfg");
  spit(dir / "min.json", R"({"train": {"epochs": 5}})");
  CliRun r = run_cli(dir, "synth --config min.json --print-config --identities 2 --per-id 2 "
                          "--size 14 --pairs 2 --out d");
  REQUIRE(r.code == 0);
  // the snapshot is a 2-indent dump followed by the command's own output
  auto at = r.out.find('{');
  auto end = r.out.find("\n}");
  REQUIRE(at != std::string::npos);
  REQUIRE(end != std::string::npos);
  nlohmann::json snap = nlohmann::json::parse(r.out.substr(at, end + 2 - at));
  CHECK(snap["train"]["epochs"] == 5);
  CHECK(snap["train"]["batch_size"] == 512);  // untouched keys echo the defaults
}

TEST_CASE("cli: failures use distinct exit codes") {
  fs::path dir = fresh_dir("errors");

  // usage errors -> 2
  CHECK(run_cli(dir, "frobnicate").code == 2);
  CHECK(run_cli(dir, "").code == 2);
  CHECK(run_cli(dir, "train --config missing.json").code == 2);

  CliRun no_manifest = run_cli(dir, "train --out r");
  CHECK(no_manifest.code == 2);
  CHECK(no_manifest.err.find("manifest") != std::string::npos);

  CliRun bad_rank = run_cli(dir, "train --manifest m.csv --out r --rank -1");
  CHECK(bad_rank.code == 2);
  CHECK(bad_rank.err.find("rank must be positive") != std::string::npos);

  spit(dir / "bad.json", R"({"train": {"warmup": 5}})");
  CliRun bad_key = run_cli(dir, "train --config bad.json");
  CHECK(bad_key.code == 2);
  CHECK(bad_key.err.find("unknown config key 'train.warmup'") != std::string::npos);

  // runtime errors -> 1
  CliRun no_base = run_cli(dir, "evaluate --base nope.st --protocol p.csv --out e");
  CHECK(no_base.code == 1);
}

#endif  // FACEADAPT_BIN
