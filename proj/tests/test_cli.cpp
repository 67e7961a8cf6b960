#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "nlpl/common.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string err;
};

Result run(const std::string& args, const fs::path& dir) {
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string(NLPL_CLI) + " " + args + " >/dev/null 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = nlpl::read_file(err.string());
  return r;
}

/// Shared toy pipeline: corpus, vocabulary and generators.
const fs::path& toy_dir() {
  static const fs::path dir = [] {
    auto d = nlpl::fixtures::scratch_dir("cli_toy");
    const auto data = nlpl::fixtures::data_path("toy16.jsonl");
    EXPECT_EQ(run("ingest --input " + data + " --out " + (d / "corpus").string(), d).code, 0);
    EXPECT_EQ(run("train-vocab --bimodal " + (d / "corpus/bimodal.jsonl").string() +
                      " --size 400 --out " + (d / "vocab").string(), d).code, 0);
    EXPECT_EQ(run("train-generators --bimodal " + (d / "corpus/bimodal.jsonl").string() +
                      " --unimodal " + (d / "corpus/unimodal.jsonl").string() + " --vocab " +
                      (d / "vocab/vocab.jsonl").string() + " --out " + (d / "gen").string(), d).code, 0);
    return d;
  }();
  return dir;
}

std::string toy(const std::string& rel) { return (toy_dir() / rel).string(); }

std::string pretrain_args(const std::string& out) {
  return "pretrain --bimodal " + toy("corpus/bimodal.jsonl") + " --vocab " + toy("vocab/vocab.jsonl") +
         " --generators " + toy("gen") +
         " --layers 1 --hidden 16 --heads 2 --ffn 32 --max-positions 128 --batch-size 4"
         " --steps 6 --checkpoint-interval 3 --out " + out;
}

}  // namespace

TEST(Cli, RecipeEmitsEveryManifest) {
  auto dir = nlpl::fixtures::scratch_dir("cli_recipe");
  const std::string env = "NLPL=" + std::string(NLPL_CLI) +
                          " STEPS=20 EPOCHS=1 TRAIN_PAIRS=48 QUERIES=40 DISTRACTORS=10"
                          " LAYERS=1 HIDDEN=16 HEADS=2 FFN=32 ";
  const std::string cmd = env + NLPL_RECIPE + " " + dir.string() + " >/dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  for (const char* stage : {"corpus", "split", "vocab", "generators", "pretrain", "search", "mrr"}) {
    const auto m = dir / stage / "manifest.json";
    ASSERT_TRUE(fs::exists(m)) << stage;
    auto j = json::parse(nlpl::read_file(m.string()));
    EXPECT_FALSE(j.at("config").get<std::string>().empty());
    for (const auto& out : j.at("outputs")) EXPECT_TRUE(fs::exists(dir / stage / out.get<std::string>()));
    for (const auto& [flag, in] : j.at("inputs").items())
      if (in.at("fnv1a").is_string())
        EXPECT_EQ(in.at("fnv1a").get<std::string>(),
                  nlpl::hex64(nlpl::hash_file(in.at("path").get<std::string>())));
  }
  auto mrr = json::parse(nlpl::read_file((dir / "mrr/mrr.json").string()));
  EXPECT_EQ(mrr.at("distractors").get<int>(), 10);

  // Re-running from the stored config reproduces the report.
  const auto again = dir / "mrr_again";
  ASSERT_EQ(run("eval-mrr --config " + (dir / "mrr/config.toml").string() + " --out " + again.string(), dir).code, 0);
  EXPECT_EQ(nlpl::read_file((again / "mrr.json").string()), nlpl::read_file((dir / "mrr/mrr.json").string()));
}

TEST(Cli, ProbeBuildIsByteIdentical) {
  auto dir = nlpl::fixtures::scratch_dir("cli_probes");
  const std::string args = "probe-build --bimodal " + toy("corpus/bimodal.jsonl") + " --vocab " +
                           toy("vocab/vocab.jsonl") + " --out ";
  ASSERT_EQ(run(args + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(run(args + (dir / "b").string(), dir).code, 0);
  const auto a = nlpl::read_file((dir / "a/probes.jsonl").string());
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, nlpl::read_file((dir / "b/probes.jsonl").string()));
}

TEST(Cli, PretrainDeterministicAndResumable) {
  auto dir = nlpl::fixtures::scratch_dir("cli_pretrain");
  ASSERT_EQ(run(pretrain_args((dir / "a").string()), dir).code, 0);
  ASSERT_EQ(run(pretrain_args((dir / "b").string()), dir).code, 0);
  for (const char* f : {"step-0000003.ckpt", "step-0000006.ckpt", "final.ckpt", "loss.jsonl"})
    EXPECT_EQ(nlpl::read_file((dir / "a" / f).string()), nlpl::read_file((dir / "b" / f).string())) << f;
  ASSERT_EQ(run("resume --checkpoint " + (dir / "a/step-0000003.ckpt").string() + " --bimodal " +
                    toy("corpus/bimodal.jsonl") + " --vocab " + toy("vocab/vocab.jsonl") +
                    " --generators " + toy("gen") + " --steps 6 --out " + (dir / "r").string(), dir).code,
            0);
  EXPECT_EQ(nlpl::read_file((dir / "r/final.ckpt").string()), nlpl::read_file((dir / "a/final.ckpt").string()));
  auto changed = run(pretrain_args((dir / "c").string()) + " --seed 2", dir);
  ASSERT_EQ(changed.code, 0);
  EXPECT_NE(nlpl::read_file((dir / "c/final.ckpt").string()), nlpl::read_file((dir / "a/final.ckpt").string()));
}

TEST(Cli, DistinctErrorExits) {
  auto dir = nlpl::fixtures::scratch_dir("cli_errors");
  const auto bimodal = toy("corpus/bimodal.jsonl");

  auto too_many = run("eval-mrr --scorer random --bimodal " + bimodal + " --distractors 16 --out " +
                      (dir / "x").string(), dir);
  EXPECT_EQ(too_many.code, 8);
  auto j = json::parse(too_many.err);
  EXPECT_EQ(j.at("error"), "insufficient_data");
  EXPECT_EQ(std::count(too_many.err.begin(), too_many.err.end(), '\n'), 1);

  EXPECT_EQ(run("eval-mrr --scorer random --bimodal " + bimodal + " --distractors 15 --out " +
                (dir / "ok").string(), dir).code, 0);
  auto unknown = run("split --bimodal " + bimodal + " --colour red --out " + (dir / "y").string(), dir);
  EXPECT_EQ(unknown.code, 2);
  EXPECT_EQ(json::parse(unknown.err).at("error"), "unknown_flag");
  auto missing = run("split --bimodal " + (dir / "none.jsonl").string() + " --out " + (dir / "y").string(), dir);
  EXPECT_EQ(missing.code, 3);
  EXPECT_EQ(json::parse(missing.err).at("error"), "missing_file");

  // A vocabulary other than the one the generators were trained with.
  ASSERT_EQ(run("train-vocab --bimodal " + bimodal + " --size 300 --out " + (dir / "v").string(), dir).code, 0);
  auto mismatch = run("pretrain --bimodal " + bimodal + " --vocab " + (dir / "v/vocab.jsonl").string() +
                      " --generators " + toy("gen") +
                      " --layers 1 --hidden 16 --heads 2 --ffn 32 --max-positions 128 --steps 1 --out " +
                      (dir / "z").string(), dir);
  EXPECT_EQ(mismatch.code, 6);
  EXPECT_EQ(json::parse(mismatch.err).at("error"), "hash_mismatch");
  EXPECT_EQ(run("split --out " + (dir / "w").string(), dir).code, 10);
}
