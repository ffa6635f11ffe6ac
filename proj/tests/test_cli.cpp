#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mamt4/cli.hpp"
#include "mamt4/imaging.hpp"
#include "support.hpp"

using namespace mamt4;
using mamt4::testing::file_bytes;
using mamt4::testing::TempDir;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

const char* kTinyConfig =
    "lr0=0.003\nmax_epochs=2\nbatch_size=8\nseeds=1,2\n"
    "backbone.widths=4,8\nbackbone.feature_dim=16\nbackbone.input_size=16\n"
    "mamt4.tokens_per_view=2\nte.num_blocks=1\nte.num_heads=2\nte.mlp_hidden=16\n"
    "augment.empty_image_prob=0.2\nunet.depth=2\nunet.base_width=4\nunet.input_size=16\n";

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

// synth -> stage 1 -> stage 2 -> eval -> report inside `root`.
std::vector<Outcome> pipeline(const std::filesystem::path& root) {
  const auto r = root.string();
  write_file(root / "tiny.cfg", kTinyConfig);
  std::vector<Outcome> o;
  o.push_back(run_cli({"synth", "--scenario", "asymmetry", "--exams", "12", "--seed", "4", "--out", r + "/data"}));
  o.push_back(run_cli({"train", "--stage", "1", "--manifest", r + "/data/manifest.csv", "--config", r + "/tiny.cfg",
                       "--out", r + "/runs/s1_seed{seed}.ckpt"}));
  o.push_back(run_cli({"train", "--stage", "2", "--manifest", r + "/data/manifest.csv", "--config", r + "/tiny.cfg",
                       "--backbone", r + "/runs/s1_seed{seed}.ckpt", "--out", r + "/runs/s2_seed{seed}.ckpt"}));
  o.push_back(run_cli({"eval", "--mode", "mamt4", "--ckpt", r + "/runs/s2_seed{seed}.ckpt", "--manifest",
                       r + "/data/manifest.csv", "--seeds", "1,2", "--config", r + "/tiny.cfg"}));
  o.push_back(run_cli({"report", "--logs", r + "/runs"}));
  return o;
}

}  // namespace

TEST_CASE("every verb has help") {
  const std::vector<std::pair<std::string, std::vector<std::string>>> verbs{
      {"synth", {"--scenario", "--exams", "--seed", "--out", "--force"}},
      {"preprocess", {"--manifest", "--method", "--unet-ckpt", "--size", "--out"}},
      {"train-unet", {"--manifest", "--config", "--out"}},
      {"train", {"--stage", "--manifest", "--config", "--backbone", "--out"}},
      {"eval", {"--mode", "--ckpt", "--manifest", "--seeds", "--config"}},
      {"gradcheck", {"--seed"}},
      {"report", {"--logs"}},
  };
  for (const auto& [verb, flags] : verbs) {
    const auto o = run_cli({verb, "--help"});
    INFO(verb);
    CHECK(o.code == 0);
    for (const auto& f : flags) CHECK(contains(o.out + o.err, f));
  }
  const auto top = run_cli({"--help"});
  CHECK(top.code == 0);
  for (const auto& [verb, flags] : verbs) CHECK(contains(top.out, verb));
}

TEST_CASE("usage errors exit 2") {
  CHECK(run_cli({}).code == cli::kExitUsage);
  CHECK(run_cli({"fly"}).code == cli::kExitUsage);
  CHECK(run_cli({"synth", "--scenario", "asymmetry"}).code == cli::kExitUsage);
  CHECK(run_cli({"synth", "--scenario", "nope", "--exams", "20", "--seed", "1", "--out", "x"}).code ==
        cli::kExitUsage);
  CHECK(run_cli({"synth", "--scenario", "asymmetry", "--exams", "5", "--seed", "1", "--out", "x"}).code ==
        cli::kExitUsage);
  CHECK(run_cli({"gradcheck", "--bogus"}).code == cli::kExitUsage);
  CHECK(run_cli({"eval", "--mode", "both", "--ckpt", "a", "--manifest", "b"}).code == cli::kExitUsage);
}

TEST_CASE("gradcheck verb passes") {
  const auto o = run_cli({"gradcheck"});
  CHECK(o.code == 0);
  CHECK(contains(o.out, "gradient checks passed"));
  CHECK_FALSE(contains(o.out, "FAIL"));
}

TEST_CASE("synth, preprocess and overwrite protection") {
  TempDir dir("cli_pre");
  const auto r = dir.path().string();
  CHECK(run_cli({"synth", "--scenario", "artifact", "--exams", "10", "--seed", "2", "--out", r + "/data"}).code == 0);
  CHECK(std::filesystem::exists(dir / "data" / "manifest.csv"));

  const auto again = run_cli({"synth", "--scenario", "artifact", "--exams", "10", "--seed", "2", "--out", r + "/data"});
  CHECK(again.code == cli::kExitFailure);
  CHECK(contains(again.err, "--force"));
  const auto before = file_bytes(dir / "data" / "manifest.csv");
  CHECK(run_cli({"synth", "--scenario", "artifact", "--exams", "10", "--seed", "2", "--out", r + "/data", "--force"})
            .code == 0);
  CHECK(file_bytes(dir / "data" / "manifest.csv") == before);

  const auto pre = run_cli({"preprocess", "--manifest", r + "/data/manifest.csv", "--method", "threshold", "--size",
                            "32", "--out", r + "/pre"});
  REQUIRE(pre.code == 0);
  std::size_t images = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir / "pre" / "images")) {
    const auto img = read_image(entry.path());
    CHECK(img.width == 32);
    CHECK(img.height == 32);
    ++images;
  }
  CHECK(images == 40);
  CHECK(std::filesystem::exists(dir / "pre" / "manifest.csv"));
  CHECK(run_cli({"preprocess", "--manifest", r + "/data/manifest.csv", "--method", "unet", "--out", r + "/pre2"})
            .code != 0);
}

TEST_CASE("pipeline runs end to end and reproduces byte for byte") {
  TempDir a("cli_a");
  TempDir b("cli_b");
  const auto oa = pipeline(a.path());
  const auto ob = pipeline(b.path());
  for (std::size_t i = 0; i < oa.size(); ++i) {
    INFO("step " << i << ": " << oa[i].err);
    CHECK(oa[i].code == 0);
  }
  CHECK(contains(oa[2].out, "eval_blackouts=0"));
  CHECK(contains(oa[3].out, "ROC-AUC mean \xc2\xb1 std"));
  CHECK(contains(oa[3].out, "F1-macro mean \xc2\xb1 std"));
  // Keys are relative to --logs with the seed token dropped.
  CHECK(contains(oa[4].out, "\ns1 "));
  CHECK(contains(oa[4].out, "\ns2 "));
  CHECK_FALSE(contains(oa[4].out, "seed1"));

  for (const char* name : {"s1_seed1.ckpt", "s1_seed2.ckpt", "s2_seed1.ckpt", "s2_seed2.ckpt", "s2_seed1.log.csv",
                           "s2_seed2.metrics.txt"}) {
    INFO(name);
    REQUIRE(std::filesystem::exists(a / "runs" / name));
    CHECK(file_bytes(a / "runs" / name) == file_bytes(b / "runs" / name));
  }
  CHECK(file_bytes(a / "runs" / "s1_seed1.ckpt") != file_bytes(a / "runs" / "s1_seed2.ckpt"));

  // Without {seed} and with two seeds the outputs would collide.
  const auto r = a.path().string();
  const auto clash = run_cli({"train", "--stage", "1", "--manifest", r + "/data/manifest.csv", "--config",
                              r + "/tiny.cfg", "--out", r + "/runs/one.ckpt"});
  CHECK(clash.code == cli::kExitUsage);

  // A stage-1 checkpoint is not a fusion model.
  const auto wrong = run_cli({"eval", "--mode", "mamt4", "--ckpt", r + "/runs/s1_seed1.ckpt", "--manifest",
                              r + "/data/manifest.csv", "--config", r + "/tiny.cfg"});
  CHECK(wrong.code == cli::kExitFailure);
}

TEST_CASE("train-unet then preprocess with the segmenter") {
  TempDir dir("cli_unet");
  const auto r = dir.path().string();
  write_file(dir / "tiny.cfg", std::string(kTinyConfig) + "max_train_images=8\n");
  REQUIRE(run_cli({"synth", "--scenario", "single_view", "--exams", "10", "--seed", "3", "--out", r + "/data"}).code ==
          0);
  const auto tu = run_cli({"train-unet", "--manifest", r + "/data/manifest.csv", "--config", r + "/tiny.cfg", "--out",
                           r + "/unet.ckpt"});
  REQUIRE(tu.code == 0);
  CHECK(contains(tu.out, "mean IoU"));
  CHECK(std::filesystem::exists(dir / "unet.log.csv"));
  const auto pre = run_cli({"preprocess", "--manifest", r + "/data/manifest.csv", "--method", "unet", "--unet-ckpt",
                            r + "/unet.ckpt", "--config", r + "/tiny.cfg", "--size", "16", "--out", r + "/pre"});
  CHECK(pre.code == 0);
}

TEST_CASE("experiment keys and the report table") {
  CHECK(cli::experiment_key("runs/s1_seed3") == "runs/s1");
  CHECK(cli::experiment_key("runs/s2-seed12") == "runs/s2");
  CHECK(cli::experiment_key("runs/plain") == "runs/plain");

  MetricsReport a;
  a.roc_auc = 0.823;
  a.f1 = 0.5;
  a.f1_macro = 0.7;
  MetricsReport b = a;
  b.roc_auc = 0.857;
  const auto summary = cli::format_seed_summary({a, b});
  CHECK(contains(summary, "ROC-AUC mean \xc2\xb1 std: 84.0 \xc2\xb1 2.4"));
  CHECK(contains(summary, "F1 mean \xc2\xb1 std: 50.0 \xc2\xb1 0.0"));

  const auto table = cli::format_report_table({{"runs/s2", {a, b}}, {"runs/s1", {a}}});
  std::istringstream lines(table);
  std::string header, first, second;
  std::getline(lines, header);
  std::getline(lines, first);
  std::getline(lines, second);
  CHECK(contains(header, "Method"));
  CHECK(contains(header, "F1-macro"));
  CHECK(contains(first, "runs/s1"));
  CHECK(contains(second, "runs/s2"));
  CHECK(contains(second, "84.0 \xc2\xb1 2.4"));
  // Columns line up although "\xc2\xb1" takes two bytes.
  CHECK(header.find("ROC-AUC") == first.find("82.3"));
  const auto column = [](const std::string& line, std::size_t byte) {
    return byte - static_cast<std::size_t>(std::count(line.begin(), line.begin() + static_cast<long>(byte), '\xb1'));
  };
  CHECK(column(header, header.find("F1")) == column(second, second.find("50.0")));
  CHECK(column(header, header.find("seeds")) == column(second, second.rfind("2")));
}

TEST_CASE("the installed binary reports exit codes") {
  const char* bin = std::getenv("MAMT4_BIN");
  if (bin == nullptr) SKIP("MAMT4_BIN not set");
  const std::string b = bin;
  auto status = [](const std::string& cmd) {
    const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status(b + " --help") == 0);
  CHECK(status(b + " train --help") == 0);
  CHECK(status(b) == 2);
  CHECK(status(b + " train --stage 3") == 2);
  CHECK(status(b + " report --logs /nonexistent_dir_xyz") == 2);
}
