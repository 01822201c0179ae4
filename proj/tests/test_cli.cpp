#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "defectlab/commands.hpp"

using namespace defectlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Small synthetic world: 24 px patches, a few per class, one epoch.
std::vector<std::string> small_sets() {
    return {"synth.image_side=24",  "synth.train_per_class=6", "synth.test_per_class=3", "synth.pool_count=8",
            "train.epochs=1",       "train.batch_size=8",      "transmatch.shots=2",     "transmatch.fine_tune.epochs=1",
            "engine.max_rounds=2",  "engine.labeled_fraction=0.5"};
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() /
                ("defectlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    int run(const std::string& command, const fs::path& run_dir, std::vector<std::string> extra = {},
            const fs::path& config = {}) {
        cli::Options opt;
        opt.command = command;
        opt.config = config;
        opt.sets = small_sets();
        opt.sets.insert(opt.sets.end(), extra.begin(), extra.end());
        opt.out = root_;
        opt.run_dir = run_dir;
        opt.weights = weights_;
        opt.input = input_;
        std::ostringstream err;
        log::ScopedSink quiet([](const std::string&) {});
        const int rc = cli::run_command(opt, err);
        last_error_ = err.str();
        return rc;
    }

    fs::path root_;
    fs::path weights_;
    fs::path input_;
    std::string last_error_;
};

}  // namespace

TEST_F(CliTest, ConfigErrorsExitTwo) {
    EXPECT_EQ(run("synth", root_ / "a", {}, root_ / "missing.json"), 2);
    spit(root_ / "bad.json", "{ not json");
    EXPECT_EQ(run("synth", root_ / "a", {}, root_ / "bad.json"), 2);
    spit(root_ / "typo.json", R"({"train": {"epoch": 3}})");
    EXPECT_EQ(run("train", root_ / "a", {}, root_ / "typo.json"), 2);
    EXPECT_NE(last_error_.find("train.epoch"), std::string::npos);
    EXPECT_EQ(run("train", root_ / "a", {"train.learning_rate=0.1"}), 2);
    EXPECT_EQ(run("train", root_ / "a", {"no-equals-sign"}), 2);
    EXPECT_EQ(run("train", root_ / "a", {"train.optimizer=rmsprop"}), 2);
    EXPECT_EQ(run("train", root_ / "a", {"train.epochs=\"many\""}), 2);
    EXPECT_EQ(run("bogus", root_ / "a"), 2);
    EXPECT_FALSE(fs::exists(root_ / "a"));
}

TEST_F(CliTest, MissingWeightsExitThree) {
    weights_ = root_ / "nope.tmw";
    EXPECT_EQ(run("eval", root_ / "e"), 3);
    spit(root_ / "junk.tmw", "garbage");
    weights_ = root_ / "junk.tmw";
    EXPECT_EQ(run("eval", root_ / "e"), 3);
    EXPECT_EQ(read_json(root_ / "e" / "status.json").at("exit_code"), 3);
}

TEST_F(CliTest, TooManyShotsExitFour) {
    EXPECT_EQ(run("transmatch", root_ / "t", {"transmatch.shots=50"}), 4);
    const auto status = read_json(root_ / "t" / "status.json");
    EXPECT_EQ(status.at("state"), "failed");
    EXPECT_EQ(status.at("exit_code"), 4);
    EXPECT_TRUE(fs::exists(root_ / "t" / "manifest.json"));
}

TEST_F(CliTest, SynthThenTrainFromDirectory) {
    ASSERT_EQ(run("synth", root_ / "s"), 0) << last_error_;
    for (const char* f : {"train/index.jsonl", "test/index.jsonl", "pool/index.jsonl", "pool/truth.jsonl"})
        EXPECT_TRUE(fs::exists(root_ / "s" / f)) << f;
    const auto status = read_json(root_ / "s" / "status.json");
    EXPECT_EQ(status.at("state"), "completed");
    EXPECT_EQ(status.at("counts").at("train"), 24);
    EXPECT_EQ(status.at("counts").at("pool"), 8);

    ASSERT_EQ(run("train", root_ / "t", {"data.dir=" + (root_ / "s").string()}), 0) << last_error_;
    const auto manifest = read_json(root_ / "t" / "manifest.json");
    EXPECT_TRUE(manifest.at("inputs").contains("train"));
    EXPECT_EQ(read_json(root_ / "t" / "report.json").at("total"), 12);
}

TEST_F(CliTest, TrainThenEval) {
    ASSERT_EQ(run("train", root_ / "t"), 0) << last_error_;
    for (const char* f : {"weights.tmw", "history.csv", "report.json", "metrics.csv", "confusion.csv", "manifest.json"})
        EXPECT_TRUE(fs::exists(root_ / "t" / f)) << f;
    weights_ = root_ / "t" / "weights.tmw";
    ASSERT_EQ(run("eval", root_ / "e"), 0) << last_error_;
    EXPECT_EQ(slurp(root_ / "e" / "report.json"), slurp(root_ / "t" / "report.json"));
    // Same file against a network with another class count.
    EXPECT_EQ(run("eval", root_ / "e2", {"network.classes=3"}), 3);
}

TEST_F(CliTest, PreprocessAnnotatedImages) {
    input_ = root_ / "in";
    fs::create_directories(input_);
    GrayImage img(48, 32, 1);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 48; ++x) img.at(x, y) = static_cast<std::uint8_t>(120 + (x * 3 + y) % 40);
    for (int i = 0; i < 2; ++i) {
        const auto stem = "img" + std::to_string(i);
        pnm::write_pgm(input_ / (stem + ".pgm"), img);
        spit(input_ / (stem + ".xml"),
             voc::write_voc_xml(stem + ".pgm", 48, 32,
                                {{stem, {2, 2, 18, 18}, 0}, {stem, {20, 4, 30, 14}, 1}, {stem, {30, 10, 46, 30}, 3}}));
    }
    ASSERT_EQ(run("preprocess", root_ / "p", {"data.patch_side=16", "data.train_fraction=0.5"}), 0) << last_error_;
    const auto status = read_json(root_ / "p" / "status.json");
    EXPECT_EQ(status.at("counts").at("patches"), 6);
    EXPECT_EQ(status.at("counts").at("train").get<int>() + status.at("counts").at("test").get<int>(), 6);
    const auto train = patch_io::read_patch_set(root_ / "p" / "train");
    ASSERT_FALSE(train.empty());
    EXPECT_EQ(train[0].patch.width(), 16);

    spit(input_ / "img1.xml", voc::write_voc_xml("img1.pgm", 48, 32, {}) + "<broken");
    EXPECT_EQ(run("preprocess", root_ / "p2"), 3);
}

TEST_F(CliTest, PseudolabelRun) {
    ASSERT_EQ(run("pseudolabel", root_ / "pl"), 0) << last_error_;
    for (const char* f : {"rounds/rounds.csv", "pseudo_labels.csv", "weights.tmw", "report.json"})
        EXPECT_TRUE(fs::exists(root_ / "pl" / f)) << f;
    const auto status = read_json(root_ / "pl" / "status.json");
    EXPECT_EQ(status.at("labeled"), 12);
    EXPECT_GE(status.at("rounds").get<int>(), 1);
    EXPECT_LE(status.at("rounds").get<int>(), 2);
}

TEST_F(CliTest, TransmatchRunAndEvalHead) {
    ASSERT_EQ(run("transmatch", root_ / "tm"), 0) << last_error_;
    const auto episode = read_json(root_ / "tm" / "episode.json");
    EXPECT_EQ(episode.at("support"), 4);
    EXPECT_EQ(episode.at("query"), 6);
    EXPECT_TRUE(fs::exists(root_ / "tm" / "base_weights.tmw"));
    weights_ = root_ / "tm" / "weights.tmw";
    ASSERT_EQ(run("eval", root_ / "e"), 0) << last_error_;
    EXPECT_EQ(read_json(root_ / "e" / "report.json").at("total"), 6);
}

TEST_F(CliTest, ManifestRerunIsByteIdentical) {
    ASSERT_EQ(run("train", root_ / "a"), 0) << last_error_;
    cli::Options opt;
    opt.command = "train";
    opt.config = root_ / "a" / "manifest.json";
    opt.run_dir = root_ / "b";
    std::ostringstream err;
    ASSERT_EQ(cli::run_command(opt, err), 0) << err.str();
    for (const char* f : {"weights.tmw", "history.csv", "report.json", "metrics.csv", "confusion.csv"})
        EXPECT_EQ(slurp(root_ / "a" / f), slurp(root_ / "b" / f)) << f;
    EXPECT_EQ(read_json(root_ / "a" / "manifest.json").at("config"), read_json(root_ / "b" / "manifest.json").at("config"));
}

TEST_F(CliTest, DefaultRunDirectoryNaming) {
    ASSERT_EQ(run("synth", fs::path()), 0) << last_error_;
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(root_ / "runs")) runs.push_back(e.path());
    ASSERT_EQ(runs.size(), 1u);
    const auto name = runs[0].filename().string();
    EXPECT_EQ(read_json(runs[0] / "manifest.json").at("run_id"), name);
    EXPECT_EQ(name.size(), 16u + 1u + 8u);
    EXPECT_EQ(name[8], 'T');
}
