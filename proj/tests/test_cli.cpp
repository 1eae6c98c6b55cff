#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "dynaclr/embedding_table.hpp"
#include "dynaclr/training.hpp"
#include "support.hpp"

#include <httplib.h>

using namespace dynaclr;
namespace dt = dynaclr::testing;
using dynaclr::testing::run_tool;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// One small end-to-end pipeline shared by the tests below.
class CliPipeline : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new dt::TempDir("dynaclr_cli");
        auto step = [](const std::vector<std::string>& args) {
            const auto r = run_tool(args);
            if (r.exit_code != 0) setup_error_ += args.front() + ": " + r.output + "\n";
        };
        step({"synth", "--out", p("ds"), "--fovs-per-condition", "1", "--cells-per-fov", "10", "--timepoints", "12",
              "--size", "128", "--seed", "3"});
        step({"train", "--data", p("ds"), "--out", p("run"), "--epochs", "2", "--batch-size", "4", "--max-batches", "2",
              "--checkpoint-every", "1", "--seed", "5"});
        step({"embed", "--checkpoint", p("run/model.ckpt"), "--data", p("ds"), "--out", p("emb")});
        step({"probe", "--emb", p("emb"), "--data", p("ds"), "--out", p("probe/infection.json"), "--seed", "2"});
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    void SetUp() override { ASSERT_TRUE(setup_error_.empty()) << setup_error_; }

    static std::string p(const std::string& rel) { return (dir_->path() / rel).string(); }

    static json replay(const std::string& manifest, int* code = nullptr) {
        const auto r = run_tool({"replay", manifest});
        if (code) *code = r.exit_code;
        const auto start = r.output.find('{');
        if (start == std::string::npos) return json::object();
        return json::parse(r.output.substr(start), nullptr, false);
    }

    static dt::TempDir* dir_;
    static std::string setup_error_;
};

dt::TempDir* CliPipeline::dir_ = nullptr;
std::string CliPipeline::setup_error_;

}  // namespace

TEST(Cli, UnknownFlagPrintsUsage) {
    const auto r = run_tool({"synth", "--bogus", "1"});
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("Usage"), std::string::npos) << r.output;
    EXPECT_EQ(run_tool({"frobnicate"}).exit_code, 1);
    EXPECT_EQ(run_tool({}).exit_code, 1);
}

TEST(Cli, HelpExitsZero) {
    const auto r = run_tool({"--help"});
    EXPECT_EQ(r.exit_code, 0);
    for (const char* cmd : {"synth", "train", "embed", "analyze", "probe", "attribute", "serve"})
        EXPECT_NE(r.output.find(cmd), std::string::npos) << cmd;
}

TEST(Cli, ValidationErrorsExitOne) {
    dt::TempDir dir;
    EXPECT_EQ(run_tool({"synth"}).exit_code, 1);  // missing --out
    EXPECT_EQ(run_tool({"synth", "--out", (dir / "d").string(), "--timepoints", "0"}).exit_code, 1);
    EXPECT_EQ(run_tool({"train", "--data", (dir / "missing").string(), "--out", (dir / "r").string()}).exit_code, 1);
    EXPECT_EQ(run_tool({"analyze", "rank", "--out", (dir / "a").string()}).exit_code, 1);
    write_text_file(dir / "bad.json", "{oops");
    EXPECT_EQ(run_tool({"synth", "--config", (dir / "bad.json").string(), "--out", (dir / "d").string()}).exit_code, 1);
}

TEST(Cli, InputErrorsExitOne) {
    dt::TempDir dir;
    const auto junk = dir / "junk.ckpt";
    write_text_file(junk, std::string(64, 'x'));
    const auto r = run_tool({"embed", "--checkpoint", junk.string(), "--data", dt::shared_small_dataset().string(),
                             "--out", (dir / "e").string()});
    EXPECT_EQ(r.exit_code, 1) << r.output;
    const std::vector<std::string> synth{"synth", "--out", (dir / "d").string(), "--fovs-per-condition", "1",
                                         "--cells-per-fov", "4", "--timepoints", "3", "--size", "128"};
    const auto s = run_tool(synth);
    ASSERT_EQ(s.exit_code, 0) << s.output;
    const auto again = run_tool(synth);
    EXPECT_EQ(again.exit_code, 1) << again.output;
}

TEST_F(CliPipeline, ManifestsRecordOutputs) {
    for (const auto& m : {p("ds/manifest.json"), p("run/manifest.json"), p("emb/manifest.json"),
                          p("probe/infection.manifest.json")}) {
        ASSERT_TRUE(fs::exists(m)) << m;
        const auto j = json::parse(dt::read_file(m));
        EXPECT_EQ(j.at("tool"), "dynaclr");
        EXPECT_TRUE(j.contains("config"));
        EXPECT_TRUE(j.contains("seed"));
        EXPECT_TRUE(j.contains("wall_seconds"));
        EXPECT_FALSE(j.at("outputs").empty()) << m;
        for (const auto& o : j.at("outputs")) EXPECT_TRUE(o.contains("checksum"));
    }
    EXPECT_TRUE(fs::exists(p("run/model.ckpt")));
    EXPECT_TRUE(fs::exists(p("probe/infection.probe.json")));
    EXPECT_TRUE(fs::exists(p("probe/infection.predictions.csv")));
    const auto ck = train::load_checkpoint(p("run/model.ckpt"));
    EXPECT_EQ(ck.epoch, 2);
}

TEST_F(CliPipeline, ReplayReproducesEveryCommand) {
    for (const auto& m : {p("ds/manifest.json"), p("run/manifest.json"), p("emb/manifest.json"),
                          p("probe/infection.manifest.json")}) {
        int code = -1;
        const auto r = replay(m, &code);
        EXPECT_EQ(code, 0) << m << "\n" << r.dump(2);
        EXPECT_TRUE(r.value("identical", false)) << m;
    }
}

TEST_F(CliPipeline, AnalysesAndReplay) {
    const std::vector<std::vector<std::string>> runs{
        {"analyze", "smoothness", "--emb", p("emb"), "--tau-max", "3", "--out", p("a/smooth")},
        {"analyze", "pca", "--emb", p("emb"), "--dims", "3", "--out", p("a/pca")},
        {"analyze", "rank", "--emb", p("emb"), "--out", p("a/rank")},
        {"analyze", "features", "--emb", p("emb"), "--data", p("ds"), "--dims", "2", "--out", p("a/features")},
        {"analyze", "fractions", "--data", p("ds"), "--out", p("a/fractions")},
        {"analyze", "fractions", "--data", p("ds"), "--predictions", p("probe/infection.predictions.csv"), "--out",
         p("a/fractions_pred")},
    };
    for (const auto& args : runs) {
        const auto r = run_tool(args);
        ASSERT_EQ(r.exit_code, 0) << args[1] << ": " << r.output;
        const auto m = args.back() + "/manifest.json";
        int code = -1;
        const auto rep = replay(m, &code);
        EXPECT_EQ(code, 0) << m << "\n" << rep.dump(2);
    }
    const auto rank = json::parse(dt::read_file(p("a/rank/rank.json")));
    EXPECT_GT(rank.at("rank").get<int>(), 0);
}

TEST_F(CliPipeline, AttributionsAndReplay) {
    const auto emb = load_embeddings(p("emb"));
    const auto k = emb.keys.at(emb.keys.size() / 2);
    const std::vector<std::string> node{"--checkpoint", p("run/model.ckpt"), "--probe", p("probe/infection.probe.json"),
                                        "--data",       p("ds"),            "--fov",   k.fov,
                                        "--track",      std::to_string(k.track), "--t", std::to_string(k.t)};
    for (const std::string method : {"occlusion", "ig"}) {
        std::vector<std::string> args{"attribute", method};
        args.insert(args.end(), node.begin(), node.end());
        if (method == "ig") args.insert(args.end(), {"--steps", "8"});
        args.insert(args.end(), {"--out", p("attr_" + method)});
        const auto r = run_tool(args);
        ASSERT_EQ(r.exit_code, 0) << r.output;
        EXPECT_TRUE(fs::exists(p("attr_" + method + "/map.bin")));
        EXPECT_TRUE(fs::exists(p("attr_" + method + "/panel.png")));
        int code = -1;
        const auto rep = replay(p("attr_" + method + "/manifest.json"), &code);
        EXPECT_EQ(code, 0) << rep.dump(2);
    }
    std::vector<std::string> bad{"attribute", "ig"};
    bad.insert(bad.end(), node.begin(), node.end());
    bad.insert(bad.end(), {"--steps", "1", "--out", p("attr_bad")});
    EXPECT_EQ(run_tool(bad).exit_code, 1);
}

TEST_F(CliPipeline, ResumeMatchesStraightRun) {
    const auto r = run_tool({"train", "--data", p("ds"), "--out", p("resumed"), "--epochs", "2", "--batch-size", "4",
                             "--max-batches", "2", "--seed", "5", "--resume", p("run/epoch_001.ckpt")});
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const auto a = train::load_checkpoint(p("run/model.ckpt"));
    const auto b = train::load_checkpoint(p("resumed/model.ckpt"));
    ASSERT_EQ(a.params.size(), b.params.size());
    double diff = 0;
    for (std::size_t i = 0; i < a.params.size(); ++i) diff = std::max(diff, double(std::abs(a.params[i] - b.params[i])));
    EXPECT_LE(diff, 1e-5);
}

TEST_F(CliPipeline, ServeErrors) {
    EXPECT_EQ(run_tool({"serve", "--emb", p("emb")}).exit_code, 1);
    httplib::Server blocker;
    const int port = blocker.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    const auto r = run_tool({"serve", "--data", p("ds"), "--emb", p("emb"), "--port", std::to_string(port)});
    EXPECT_EQ(r.exit_code, 2) << r.output;
}
