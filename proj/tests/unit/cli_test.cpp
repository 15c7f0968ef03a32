#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "softmask/cli.hpp"

namespace softmask {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args, const std::string& stdin_text = "") {
  std::istringstream in(stdin_text);
  std::ostringstream out, err;
  const int code = cli::run(args, in, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) { return data::read_file(p.string()); }

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(slurp(dir / "manifest.json")); }

const std::vector<std::string> kTiny = {"--width", "16", "--layers", "1", "--heads", "2", "--ffn", "32",
                                        "--gru-hidden", "8", "--batch", "16", "--lr", "0.003"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ::setenv("SOFTMASK_LOG", "warn", 1);
    root_ = fs::temp_directory_path() / "softmask_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    ASSERT_EQ(run({"synth", "--out", dir("data"), "--sentences", "240", "--dev", "40", "--test", "40", "--seed", "3"}).code,
              0);
    ASSERT_EQ(run(with_tiny({"train", "--data", dir("data"), "--out", dir("model"), "--epochs", "2"})).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string dir(const std::string& name) { return (root_ / name).string(); }

  static fs::path root_;
};

fs::path Cli::root_;

TEST_F(Cli, SynthIsDeterministic) {
  ASSERT_EQ(run({"synth", "--out", dir("s1"), "--sentences", "100", "--seed", "7"}).code, 0);
  ASSERT_EQ(run({"synth", "--out", dir("s2"), "--sentences", "100", "--seed", "7"}).code, 0);
  for (const char* f : {"corpus.txt", "vocab.txt", "confusion.tsv", "train.jsonl", "dev.jsonl", "test.jsonl"}) {
    EXPECT_EQ(slurp(root_ / "s1" / f), slurp(root_ / "s2" / f)) << f;
  }
  EXPECT_EQ(manifest(root_ / "s1")["outputs"], manifest(root_ / "s2")["outputs"]);
}

TEST_F(Cli, SynthZeroRateLeavesPairsClean) {
  const auto r = run({"synth", "--out", dir("clean"), "--sentences", "50", "--dev", "5", "--test", "5",
                      "--replace-rate", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& p : data::parse_jsonl(slurp(root_ / "clean" / "train.jsonl"))) EXPECT_EQ(p.x, p.y);
  EXPECT_EQ(manifest(root_ / "clean")["metrics"]["replaced"], 0);
}

TEST_F(Cli, InvalidRateIsUsageErrorNamingFlag) {
  const auto r = run({"synth", "--out", dir("bad"), "--replace-rate", "1.5"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--replace-rate"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(root_ / "bad"));
}

TEST_F(Cli, UnwritableOutputIsUsageError) {
  const auto r = run({"synth", "--out", "/proc/softmask/nope", "--sentences", "10"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--out"), std::string::npos) << r.err;
}

TEST_F(Cli, HelpExitsZero) {
  const auto r = run({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--lambda"), std::string::npos);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
}

TEST_F(Cli, EvalReproducesTrainManifest) {
  const auto m = manifest(root_ / "model");
  ASSERT_TRUE(m["metrics"].contains("test"));
  const auto r = run({"eval", "--model", dir("model"), "--data", dir("data"), "--out", dir("eval")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(manifest(root_ / "eval")["metrics"], m["metrics"]["test"]);
  EXPECT_EQ(m["inputs"].size(), 4u);  // train, dev, vocab, test
  for (const auto& [path, hash] : m["inputs"].items()) EXPECT_EQ(hash, git_blob_hash(slurp(path)));
}

TEST_F(Cli, RunConfReproducesCheckpoint) {
  const auto r = run({"train", "--config", dir("model") + "/run.conf", "--out", dir("again")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = train::parse_checkpoint(slurp(root_ / "model" / "model.ck"));
  const auto b = train::parse_checkpoint(slurp(root_ / "again" / "model.ck"));
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) EXPECT_EQ(a.tensors[i].values, b.tensors[i].values);
  EXPECT_EQ(manifest(root_ / "model")["metrics"]["test"], manifest(root_ / "again")["metrics"]["test"]);
}

TEST_F(Cli, CommandLineOverridesConfigFile) {
  data::write_file(dir("c.conf"), "# overrides\nlambda = 0.3\nmode = \"hard\"\nthreshold = 0.9\nepochs = 1\n");
  const auto r = run(with_tiny({"train", "--data", dir("data"), "--out", dir("prec"), "--config", dir("c.conf"),
                                "--lambda", "0.5"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = manifest(root_ / "prec")["config"];
  EXPECT_EQ(cfg["lambda"], 0.5);
  EXPECT_EQ(cfg["mode"], "hard");
  EXPECT_EQ(cfg["epochs"], 1);
  EXPECT_TRUE(manifest(root_ / "prec")["inputs"].contains(dir("c.conf")));
}

TEST_F(Cli, BadConfigFileIsUsageError) {
  data::write_file(dir("bad.conf"), "lambda = 0.3\nnot-a-flag = 1\n");
  EXPECT_EQ(run({"train", "--data", dir("data"), "--out", dir("x"), "--config", dir("bad.conf")}).code, 2);
  data::write_file(dir("bad2.conf"), "lambda = [oops\n");
  const auto r = run({"train", "--data", dir("data"), "--out", dir("x"), "--config", dir("bad2.conf")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 1"), std::string::npos) << r.err;
  data::write_file(dir("bad3.conf"), "lambda = 4\n");
  EXPECT_EQ(run({"train", "--data", dir("data"), "--out", dir("x"), "--config", dir("bad3.conf")}).code, 2);
}

TEST_F(Cli, HardNinetyMatchesAblationRow) {
  const auto r = run(with_tiny({"train", "--data", dir("data"), "--out", dir("hard"), "--mode", "hard", "--threshold",
                                "0.9", "--epochs", "1"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto config = train::checkpoint_config(train::load_checkpoint(dir("hard") + "/model.ck"));
  const auto row = experiments::default_ablation()[3];
  EXPECT_EQ(row.label, "Hard(0.9)");
  EXPECT_EQ(config.mode, row.mode);
  EXPECT_EQ(config.residual, row.residual);
}

TEST_F(Cli, VocabularyMismatchPrintsBothSizes) {
  fs::create_directories(root_ / "other");
  data::write_file(dir("other") + "/train.jsonl", "{\"x\":\"日本語日\",\"y\":\"日本語本\"}\n");
  data::write_file(dir("other") + "/dev.jsonl", "{\"x\":\"日本語\",\"y\":\"日本語\"}\n");
  const auto r = run({"train", "--data", dir("other"), "--out", dir("x"), "--init-from", dir("model")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("60"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("7"), std::string::npos) << r.err;
  const auto w = run({"train", "--data", dir("data"), "--out", dir("x"), "--init-from", dir("model"), "--width", "32"});
  EXPECT_EQ(w.code, 2);
  EXPECT_NE(w.err.find("32"), std::string::npos);
  EXPECT_NE(w.err.find("16"), std::string::npos);
}

TEST_F(Cli, ResumeMatchesUninterruptedTraining) {
  const auto base = with_tiny({"train", "--data", dir("data"), "--keep-last"});
  auto full = base, first = base, second = base;
  full.insert(full.end(), {"--out", dir("full"), "--epochs", "2"});
  first.insert(first.end(), {"--out", dir("first"), "--epochs", "1"});
  second.insert(second.end(), {"--out", dir("second"), "--epochs", "2", "--resume", dir("first")});
  ASSERT_EQ(run(full).code, 0);
  ASSERT_EQ(run(first).code, 0);
  const auto r = run(second);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = train::restore_checkpoint(train::load_checkpoint(dir("full") + "/model.ck"));
  const auto b = train::restore_checkpoint(train::load_checkpoint(dir("second") + "/model.ck"));
  EXPECT_EQ(train::parameter_digest(a.first), train::parameter_digest(b.first));
  EXPECT_EQ(a.second.optimizer->step, b.second.optimizer->step);
}

TEST_F(Cli, PretrainThenFinetune) {
  auto pre = with_tiny({"pretrain", "--data", dir("data"), "--out", dir("pre"), "--steps", "5"});
  const auto r = run(pre);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(manifest(root_ / "pre")["metrics"].contains("final_loss"));
  const auto t = run({"train", "--data", dir("data"), "--out", dir("two"), "--init-from", dir("pre"), "--epochs",
                      "1", "--batch", "16"});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(run({"pretrain", "--data", dir("data"), "--out", dir("x"), "--steps", "0"}).code, 2);
}

TEST_F(Cli, PredictContract) {
  const auto empty = run({"predict", "--model", dir("model")}, "");
  EXPECT_EQ(empty.code, 0);
  EXPECT_EQ(empty.out, "");

  const std::string text = "tek na\n\nsm\xE2\x82\xACx\n";  // third line holds an unknown character
  const auto r = run({"predict", "--model", dir("model"), "--probs"}, text);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto in_lines = data::split_lines(text), out_lines = data::split_lines(r.out);
  ASSERT_EQ(out_lines.size(), in_lines.size());
  for (std::size_t i = 0; i < in_lines.size(); ++i) {
    const auto fields = [&] {
      std::vector<std::string> f;
      std::stringstream ss(out_lines[i]);
      for (std::string x; std::getline(ss, x, '\t');) f.push_back(x);
      if (f.empty()) f.push_back("");
      return f;
    }();
    const auto n = utf8_decode(in_lines[i]).size();
    EXPECT_EQ(utf8_decode(fields[0]).size(), n);
    EXPECT_EQ(fields.size(), n + 1) << out_lines[i];
  }
  EXPECT_EQ(utf8_decode(data::split_lines(r.out)[2])[2], U'€');
}

TEST_F(Cli, PredictRejectsLongLineWithItsNumber) {
  const std::string text = "ok\n" + std::string(65, 'a') + "\n";
  const auto r = run({"predict", "--model", dir("model")}, text);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;
  EXPECT_EQ(r.out, "");
}

// A model trained on pairs with no errors learns to copy its input.
TEST_F(Cli, IdentityTrainedModelLeavesLinesUnchanged) {
  ASSERT_EQ(run({"synth", "--out", dir("ident"), "--sentences", "400", "--dev", "40", "--test", "40",
                 "--replace-rate", "0", "--seed", "5"})
                .code,
            0);
  const auto t = run(with_tiny({"train", "--data", dir("ident"), "--out", dir("copy"), "--epochs", "6"}));
  ASSERT_EQ(t.code, 0) << t.err;
  std::string text;
  for (const auto& p : data::parse_jsonl(slurp(root_ / "ident" / "test.jsonl"))) text += p.y + "\n";
  const auto r = run({"predict", "--model", dir("copy")}, text);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, text);
}

TEST_F(Cli, AblateEmitsEightRowsInOrder) {
  const auto r = run(with_tiny({"ablate", "--data", dir("data"), "--out", dir("ablate"), "--epochs", "1"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = manifest(root_ / "ablate")["metrics"]["rows"];
  ASSERT_EQ(rows.size(), 8u);
  const auto spec = experiments::default_ablation();
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(rows[i]["label"], spec[i].label);
    EXPECT_EQ(rows[i]["init_digest"], rows[0]["init_digest"]);
  }
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 9);
  EXPECT_EQ(slurp(root_ / "ablate" / "table.txt"), r.out);
}

TEST_F(Cli, SweepOneRowPerLambda) {
  const auto r = run(with_tiny({"sweep", "--data", dir("data"), "--out", dir("sweep"), "--epochs", "1", "--lambdas",
                                "0.2,0.8"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = manifest(root_ / "sweep")["metrics"];
  ASSERT_EQ(m["rows"].size(), 2u);
  EXPECT_EQ(m["rows"][1]["config"]["lambda"], 0.8);
  EXPECT_NE(r.out.find("best lambda"), std::string::npos);
  EXPECT_EQ(run(with_tiny({"sweep", "--data", dir("data"), "--out", dir("x"), "--lambdas", "0.5,1.5"})).code, 2);
}

TEST_F(Cli, LogLevelFromEnvironment) {
  ::setenv("SOFTMASK_LOG", "info", 1);
  const auto loud = run(with_tiny({"train", "--data", dir("data"), "--out", dir("log1"), "--epochs", "1"}));
  ::setenv("SOFTMASK_LOG", "off", 1);
  const auto quiet = run(with_tiny({"train", "--data", dir("data"), "--out", dir("log2"), "--epochs", "1"}));
  ::setenv("SOFTMASK_LOG", "warn", 1);
  EXPECT_NE(loud.err.find("epoch 1"), std::string::npos);
  EXPECT_EQ(quiet.err, "");
}

}  // namespace
}  // namespace softmask
