#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mer/cli.hpp"
#include "test_util.hpp"

using namespace mer;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult run(std::vector<std::string> args) {
    args.insert(args.begin(), "mer");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

nlohmann::json verbose_config(const std::string& err) {
    const auto pos = err.find("config ");
    if (pos == std::string::npos) return {};
    const auto end = err.find('\n', pos);
    return nlohmann::json::parse(err.substr(pos + 7, end - pos - 7));
}

}  // namespace

// One small corpus and one trained model shared by the flow tests.
class CliFlow : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fs::temp_directory_path() / "mer_cli_flow";
        fs::remove_all(root_);
        const CliResult s = run({"synth", "--out", (root_ / "corpus").string(), "--n-per-class", "3", "--clip-len", "25",
                           "--sample-rate", "8000", "--seed", "4"});
        ASSERT_EQ(s.code, 0) << s.err;
        const CliResult t = run({"train", "--manifest", (root_ / "corpus/manifest.json").string(), "--out",
                           (root_ / "run").string(), "--arch", "squeezenet", "--width-mult", "0.125", "--input-hw",
                           "64", "--epochs", "2", "--split-level", "subclip", "--seed", "1"});
        ASSERT_EQ(t.code, 0) << t.err;
        train_out_ = t.out;
    }
    static void TearDownTestSuite() { fs::remove_all(root_); }

    static inline fs::path root_;
    static inline std::string train_out_;
};

TEST_F(CliFlow, SynthWritesCorpus) {
    EXPECT_TRUE(fs::exists(root_ / "corpus/happy/happy_0002.wav"));
    EXPECT_TRUE(fs::exists(root_ / "corpus/sad/sad_0000.wav"));
    EXPECT_EQ(load_manifest(root_ / "corpus/manifest.json").entries.size(), 6u);
}

TEST_F(CliFlow, TrainWritesArtifactsAndTable) {
    const fs::path run_dir = root_ / "run";
    for (const char* f : {"split_manifest.json", "loss_curves.csv", "loss_curves.svg", "accuracy_table.txt",
                          "squeezenet_v10/checkpoint.bin", "squeezenet_v10/loss.csv", "squeezenet_v10/loss.svg",
                          "squeezenet_v10/val_accuracy.csv", "squeezenet_v10/report.json",
                          "squeezenet_v10/epoch_seconds.csv"}) {
        EXPECT_TRUE(fs::exists(run_dir / f)) << f;
    }
    EXPECT_EQ(train_out_.rfind("Model\tAccuracy\nSqueezeNetV1\t", 0), 0u) << train_out_;
    EXPECT_EQ(testutil::slurp(run_dir / "accuracy_table.txt"), train_out_);
    const DatasetManifest split = load_manifest(run_dir / "split_manifest.json");
    EXPECT_EQ(split.entries.size(), 30u);
    EXPECT_EQ(split.count(Split::val), 4u);  // round(15 * 0.15) = 2 per class
    EXPECT_TRUE(fs::exists(split.resolve(split.entries[0])));
}

TEST_F(CliFlow, EvalScoresCheckpoints) {
    const std::string ck = (root_ / "run/squeezenet_v10/checkpoint.bin").string();
    const CliResult r = run({"eval", "--checkpoint", ck, "--checkpoint", ck, "--manifest",
                       (root_ / "run/split_manifest.json").string(), "--split", "all", "--out",
                       (root_ / "eval.txt").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 3);
    EXPECT_EQ(testutil::slurp(root_ / "eval.txt"), r.out);
}

TEST_F(CliFlow, PredictPrintsProbabilities) {
    const CliResult r = run({"predict", "--checkpoint", (root_ / "run/squeezenet_v10/checkpoint.bin").string(), "--wav",
                       (root_ / "corpus/sad/sad_0001.wav").string(), "--offset", "5"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("label: "), std::string::npos);
    EXPECT_NE(r.out.find("p(happy): "), std::string::npos);
    EXPECT_NE(r.out.find("entropy_nats: "), std::string::npos);

    const CliResult late = run({"predict", "--checkpoint", (root_ / "run/squeezenet_v10/checkpoint.bin").string(), "--wav",
                          (root_ / "corpus/sad/sad_0001.wav").string(), "--offset", "22"});
    EXPECT_EQ(late.code, 2);
    EXPECT_NE(late.err.find("too short"), std::string::npos);
}

TEST_F(CliFlow, SpectrogramWritesCsvAndPng) {
    const CliResult r = run({"spectrogram", "--wav", (root_ / "corpus/happy/happy_0000.wav").string(), "--out",
                       (root_ / "spec").string(), "--offset", "5", "--duration", "5", "--n-mels", "40"});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string csv = testutil::slurp(root_ / "spec/happy_0000_mel.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(frame_count(40000, 2048, 512)));
    EXPECT_TRUE(fs::exists(root_ / "spec/happy_0000_mel.png"));
}

TEST_F(CliFlow, IngestBuildsManifestFromDirectories) {
    const CliResult r = run({"ingest", "--dir", (root_ / "corpus").string(), "--out", (root_ / "ingested/m.json").string(),
                       "--sample-rate", "8000"});
    ASSERT_EQ(r.code, 0) << r.err;
    const DatasetManifest m = load_manifest(root_ / "ingested/m.json");
    ASSERT_EQ(m.entries.size(), 6u);
    EXPECT_EQ(m.entries[0].source_id, "happy/happy_0000");
    EXPECT_EQ(m.entries[0].path, "../corpus/happy/happy_0000.wav");
    EXPECT_TRUE(fs::exists(m.resolve(m.entries[5])));
}

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run({}).code, 1);
    EXPECT_EQ(run({"frobnicate"}).code, 1);
    EXPECT_EQ(run({"synth"}).code, 1);  // --out is required
    EXPECT_EQ(run({"synth", "--out", "x", "--n-per-class", "-2"}).code, 1);
    EXPECT_EQ(run({"gradcheck", "--arch", "alexnet"}).code, 1);
    EXPECT_EQ(run({"--help"}).code, 0);
    EXPECT_EQ(run({"train", "--help"}).code, 0);
}

TEST(Cli, RuntimeErrorsExitTwo) {
    testutil::TempDir tmp;
    std::ofstream(tmp / "m.json") << R"([{"path": "nope.wav", "label": "happy"}])";
    const CliResult r = run({"train", "--manifest", (tmp / "m.json").string(), "--out", (tmp / "o").string(), "--arch",
                       "squeezenet", "--split-level", "subclip"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error: "), std::string::npos);

    std::ofstream(tmp / "bad.wav") << "RIFF....WAVEjunk";
    const CliResult s = run({"spectrogram", "--wav", (tmp / "bad.wav").string(), "--out", (tmp / "s").string()});
    EXPECT_EQ(s.code, 2);
}

TEST(Cli, ConfigFileMergesUnderExplicitFlags) {
    testutil::TempDir tmp;
    std::ofstream(tmp / "cfg.json") << R"({"n_per_class": 2, "seed": 9, "clip-len": 1.5, "sample_rate": 8000})";
    const CliResult r = run({"synth", "--config", (tmp / "cfg.json").string(), "--out", (tmp / "c").string(), "--seed", "5",
                       "--verbose"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto cfg = verbose_config(r.err);
    EXPECT_EQ(cfg.at("seed"), "5");
    EXPECT_EQ(cfg.at("n-per-class"), "2");
    EXPECT_EQ(cfg.at("clip-len"), "1.5");
    EXPECT_EQ(load_manifest(tmp / "c/manifest.json").entries.size(), 4u);
    EXPECT_EQ(load_manifest(tmp / "c/manifest.json").metadata.seed, 5u);
}

TEST(Cli, ConfigBooleansAndUnknownKeys) {
    testutil::TempDir tmp;
    std::ofstream(tmp / "flags.json") << R"({"skip_archs": true, "trials": 1})";
    const CliResult g = run({"gradcheck", "--config", (tmp / "flags.json").string(), "--verbose"});
    ASSERT_EQ(g.code, 0) << g.err;
    EXPECT_EQ(verbose_config(g.err).at("skip-archs"), true);
    EXPECT_NE(g.out.find("cross_entropy"), std::string::npos);
    EXPECT_EQ(g.out.find("resnet18"), std::string::npos);

    std::ofstream(tmp / "neg.json") << R"({"deterministic": false, "epochs": 0})";
    std::ofstream(tmp / "m.json") << "[]";
    const CliResult t = run({"train", "--config", (tmp / "neg.json").string(), "--manifest", (tmp / "m.json").string(),
                             "--out", (tmp / "o").string(), "--verbose"});
    EXPECT_EQ(t.code, 2);  // empty manifest
    EXPECT_EQ(verbose_config(t.err).at("deterministic"), false);
    EXPECT_EQ(verbose_config(t.err).at("epochs"), "0");

    std::ofstream(tmp / "unknown.json") << R"({"learning_rate": 0.1})";
    const CliResult u = run({"gradcheck", "--config", (tmp / "unknown.json").string()});
    EXPECT_EQ(u.code, 1);
    EXPECT_NE(u.err.find("learning_rate"), std::string::npos);

    std::ofstream(tmp / "notjson.json") << "[1, 2";
    EXPECT_EQ(run({"gradcheck", "--config", (tmp / "notjson.json").string()}).code, 1);
}

TEST(Cli, GradcheckReportsEveryOp) {
    const CliResult r = run({"gradcheck", "--skip-archs", "--trials", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::size_t pass = 0;
    for (auto p = r.out.find("PASS"); p != std::string::npos; p = r.out.find("PASS", p + 1)) ++pass;
    EXPECT_EQ(pass, 18u);
    EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
