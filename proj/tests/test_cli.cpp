// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/cli.hpp>
#include <cpmtp/corpus.hpp>
#include <cpmtp/model.hpp>

#include <json.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace cpmtp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args)
{
    std::ostringstream out;
    std::ostringstream err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override
    {
        dir_ = fs::temp_directory_path() /
               ("cpmtp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    std::string corpus(const std::string& chain = "random", int length = 4000)
    {
        const auto r = cli({"gen-data", "--chain", chain, "--vocab", "6", "--length", std::to_string(length),
                            "--seed", "3", "--out", path("data.tok"), "--spec-out", path("spec.json")});
        EXPECT_EQ(r.code, kExitOk) << r.err;
        return path("data.tok");
    }

    std::vector<json> jsonl(const std::string& name) const
    {
        std::ifstream in(path(name));
        std::vector<json> rows;
        for (std::string line; std::getline(in, line);) {
            rows.push_back(json::parse(line));
        }
        return rows;
    }

    void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

    fs::path dir_;
};

} // namespace

TEST_F(Cli, UsageErrorsExitTwo)
{
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(cli({"train", "--data", "x"}).code, kExitUsage);
    EXPECT_EQ(cli({"gen-data", "--out", path("a"), "--vocab", "many"}).code, kExitUsage);
    const auto r = cli({"gen-data", "--out", path("a"), "--chain", "spiral"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_EQ(json::parse(r.err).at("error"), "usage");
    EXPECT_EQ(cli({"train", "--data", corpus(), "--out", path("m"), "--learning-rate", "-1"}).code, kExitUsage);
}

TEST_F(Cli, HelpExitsZero)
{
    const auto r = cli({"--help"});
    EXPECT_EQ(r.code, kExitOk);
    EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST_F(Cli, RuntimeFailuresExitOne)
{
    const auto r = cli({"sample", "--checkpoint", path("missing.ckpt"), "--prompt", "1"});
    EXPECT_EQ(r.code, kExitFailure);
    EXPECT_EQ(json::parse(r.err).at("error"), "runtime");
    write("empty.txt", "");
    EXPECT_EQ(cli({"gen-data", "--source", "text", "--input", path("empty.txt"), "--out", path("t.tok")}).code,
              kExitFailure);
}

TEST_F(Cli, GenDataWritesCorpusAndSpec)
{
    const auto tok = corpus("sparse", 3000);
    const Corpus c = read_token_file(tok);
    EXPECT_EQ(c.vocab, 6);
    EXPECT_EQ(c.total_tokens(), 3000u);
    const auto spec = json::parse(std::ifstream(path("spec.json"))).get<MarkovSpec>();
    EXPECT_EQ(spec.vocab, 6);
}

TEST_F(Cli, GenDataFromText)
{
    write("in.txt", "abba#cab#");
    const auto r = cli({"gen-data", "--source", "text", "--input", path("in.txt"), "--separator", "#", "--out",
                        path("t.tok"), "--vocab-out", path("v.json")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("boundary 3"), std::string::npos);
    const Corpus c = read_token_file(path("t.tok"), Token{3}, 0.0);
    EXPECT_EQ(c.documents, (std::vector<std::vector<Token>>{{0, 1, 1, 0}, {2, 0, 1}}));
}

TEST_F(Cli, GenDataReusesVocabAndMapsUnknownCharacters)
{
    write("train.txt", "abcabc");
    write("other.txt", "abz");
    ASSERT_EQ(cli({"gen-data", "--source", "text", "--input", path("train.txt"), "--unknown", "map", "--out",
                   path("a.tok"), "--vocab-out", path("v.json")})
                  .code,
              kExitOk);
    const auto vocab = json::parse(std::ifstream(path("v.json"))).get<Vocab>();
    ASSERT_TRUE(vocab.unknown.has_value());
    const auto r = cli({"gen-data", "--source", "text", "--input", path("other.txt"), "--vocab-in", path("v.json"),
                        "--unknown", "map", "--out", path("b.tok")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(read_token_file(path("b.tok")).documents[0], (std::vector<Token>{0, 1, *vocab.unknown}));
    EXPECT_EQ(cli({"gen-data", "--source", "text", "--input", path("other.txt"), "--vocab-in", path("v.json"),
                   "--out", path("c.tok")})
                  .code,
              kExitFailure);
    EXPECT_EQ(cli({"gen-data", "--source", "text", "--input", path("other.txt"), "--unknown", "drop", "--out",
                   path("c.tok")})
                  .code,
              kExitUsage);
}

TEST_F(Cli, ZeroStepTrainingWritesHeaderAndInitialModel)
{
    const auto data = corpus();
    const auto r = cli({"train", "--data", data, "--rank", "2", "--horizon", "2", "--embed", "8", "--steps", "0",
                        "--seed", "5", "--out", path("m.ckpt"), "--metrics", path("m.jsonl"), "--summary",
                        path("s.json"), "--spec", path("spec.json")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto rows = jsonl("m.jsonl");
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_TRUE(rows[0].at("header").get<bool>());
    EXPECT_EQ(rows[0].at("config").at("rank"), 2);
    const Model m = load_checkpoint(path("m.ckpt"));
    const Model init = make_scratch_model({{2, 2, 6, 8}, 0.7, 1.0}, 5);
    EXPECT_EQ(m.full_head().gate_weights, init.full_head().gate_weights);
    EXPECT_EQ(m.encoder.token_table, init.encoder.token_table);
    const auto summary = json::parse(std::ifstream(path("s.json")));
    EXPECT_TRUE(summary[0].contains("true_joint_nll"));
    EXPECT_TRUE(summary[0].contains("val_joint_nll"));
}

TEST_F(Cli, RankSweepWritesOneCheckpointPerRank)
{
    const auto data = corpus();
    const auto r = cli({"train", "--data", data, "--rank", "1,3", "--embed", "8", "--steps", "5", "--out",
                        path("m.ckpt"), "--metrics", path("m.jsonl")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(load_checkpoint(path("m.r1.ckpt")).dims().rank, 1);
    EXPECT_EQ(load_checkpoint(path("m.r3.ckpt")).dims().rank, 3);
    EXPECT_EQ(jsonl("m.r3.jsonl").size(), 6u);
    EXPECT_EQ(jsonl("m.r3.jsonl")[1].at("step"), 1);
}

TEST_F(Cli, ConfigFilePrecedence)
{
    const auto data = corpus();
    write("cfg.json", R"({"rank": 3, "steps": 0, "batch_size": 7, "embed": 8})");
    const auto r = cli({"train", "--config", path("cfg.json"), "--data", data, "--batch-size", "9", "--out",
                        path("m.ckpt"), "--metrics", path("m.jsonl")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json c = jsonl("m.jsonl")[0].at("config");
    EXPECT_EQ(c.at("rank"), 3);
    EXPECT_EQ(c.at("batch_size"), 9);
    EXPECT_EQ(c.at("horizon"), 2);
    EXPECT_EQ(c.at("embed"), 8);
}

TEST_F(Cli, ConfigFileRejectsUnknownKeys)
{
    write("cfg.json", R"({"rank": 3, "momentum": 0.9})");
    const auto r = cli({"train", "--config", path("cfg.json"), "--data", corpus(), "--out", path("m.ckpt")});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("momentum"), std::string::npos);
    write("bad.json", "{not json");
    EXPECT_EQ(cli({"verify", "--config", path("bad.json")}).code, kExitUsage);
}

TEST_F(Cli, ThreadsFallBackToEnvironment)
{
    const auto data = corpus();
    ::setenv("CP_SPEC_THREADS", "3", 1);
    auto r = cli({"train", "--data", data, "--embed", "8", "--steps", "0", "--out", path("a.ckpt"), "--metrics",
                  path("a.jsonl")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(jsonl("a.jsonl")[0].at("config").at("threads"), 3);
    r = cli({"train", "--data", data, "--embed", "8", "--steps", "0", "--threads", "2", "--out", path("b.ckpt"),
             "--metrics", path("b.jsonl")});
    EXPECT_EQ(jsonl("b.jsonl")[0].at("config").at("threads"), 2);
    ::unsetenv("CP_SPEC_THREADS");
    r = cli({"train", "--data", data, "--embed", "8", "--steps", "0", "--out", path("c.ckpt"), "--metrics",
             path("c.jsonl")});
    EXPECT_EQ(jsonl("c.jsonl")[0].at("config").at("threads"), 1);
}

TEST_F(Cli, FinetuneSampleAndBench)
{
    const auto data = corpus("random", 6000);
    ASSERT_EQ(cli({"train", "--data", data, "--rank", "1", "--horizon", "1", "--embed", "8", "--steps", "50",
                   "--out", path("base.ckpt")})
                  .code,
              kExitOk);
    const auto ft = cli({"finetune", "--data", data, "--base", path("base.ckpt"), "--rank", "2", "--horizon", "3",
                         "--steps", "50", "--out", path("ft.ckpt")});
    ASSERT_EQ(ft.code, kExitOk) << ft.err;
    EXPECT_EQ(load_checkpoint(path("ft.ckpt")).mode, Mode::Finetune);

    const auto s = cli({"sample", "--checkpoint", path("ft.ckpt"), "--prompt", "1,2", "--max-tokens", "10", "--mode",
                        "tree", "--branching", "2,2,1", "--out", path("sample.json")});
    ASSERT_EQ(s.code, kExitOk) << s.err;
    EXPECT_EQ(json::parse(s.out).size(), 12u);

    const auto b = cli({"bench", "--checkpoint", path("ft.ckpt"), "--data", data, "--prompts", "10",
                        "--max-tokens", "20", "--out", path("bench.json")});
    ASSERT_EQ(b.code, kExitOk) << b.err;
    const auto stats = json::parse(std::ifstream(path("bench.json")));
    EXPECT_GE(stats.at("average_accepted").get<double>(), 1.0);
    EXPECT_EQ(stats.at("lossless_mismatches"), 0);
}

TEST_F(Cli, VerifyPasses)
{
    const auto r = cli({"verify", "--dist-instances", "20", "--grad-instances", "5", "--sampler-draws", "100000",
                        "--lossless-prompts", "5", "--out", path("v.json")});
    EXPECT_EQ(r.code, kExitOk) << r.out;
    EXPECT_TRUE(json::parse(std::ifstream(path("v.json"))).at("passed").get<bool>());
}

TEST_F(Cli, BinaryExitCodes)
{
    const char* exe = std::getenv("CPMTP_CLI");
    if (exe == nullptr) {
        GTEST_SKIP() << "CPMTP_CLI not set";
    }
    const auto status = [&](const std::string& args) {
        const int s = std::system((std::string(exe) + " " + args + " >/dev/null 2>&1").c_str());
        return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
    };
    EXPECT_EQ(status("--help"), 0);
    EXPECT_EQ(status("bogus"), 2);
    EXPECT_EQ(status("sample --checkpoint " + path("none.ckpt") + " --prompt 0"), 1);
}
