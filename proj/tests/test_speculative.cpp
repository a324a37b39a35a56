// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/errors.hpp>
#include <cpmtp/oracles.hpp>
#include <cpmtp/speculative.hpp>

#include <gtest/gtest.h>

#include <map>
#include <numeric>

using namespace cpmtp;

namespace {

/// Rank-1 model whose embedding is positive for every context, so the base
/// model always predicts `base_token` and the head at position s >= 2
/// ranks tokens by `later[s - 2]` (largest first).
Model scripted_model(int horizon, int vocab, Token base_token, const std::vector<VectorXd>& later)
{
    Model m = make_scratch_model({{horizon, 1, vocab, 4}, 0.5, 1.0}, 1);
    m.encoder.token_table.setOnes();
    auto& h = m.full_head();
    h.factor_weights[0].setZero();
    h.factor_weights[0].row(base_token).setConstant(5.0);
    for (int s = 1; s < horizon; ++s) {
        h.factor_weights[static_cast<std::size_t>(s)] =
            later[static_cast<std::size_t>(s - 1)] * Eigen::RowVectorXd::Ones(4);
    }
    return m;
}

VectorXd peak(int vocab, const std::map<Token, double>& values)
{
    VectorXd v = VectorXd::Zero(vocab);
    for (const auto& [t, x] : values) {
        v(t) = x;
    }
    return v;
}

std::vector<Token> random_tokens(int count, int vocab, CounterRng& rng)
{
    std::vector<Token> x(static_cast<std::size_t>(count));
    for (auto& t : x) {
        t = static_cast<Token>(rng.uniform_index(static_cast<std::uint64_t>(vocab)));
    }
    return x;
}

} // namespace

TEST(GreedyStep, FullAcceptanceEmitsHorizonPlusOne)
{
    const Model m = scripted_model(3, 5, 2, {peak(5, {{2, 5.0}}), peak(5, {{2, 5.0}})});
    const auto r = spec_step_greedy(m, std::vector<Token>{0, 1});
    EXPECT_EQ(r.accepted, 3);
    EXPECT_EQ(r.tokens, (std::vector<Token>{2, 2, 2, 2}));
}

TEST(GreedyStep, WrongSecondDraftEmitsTwo)
{
    const Model m = scripted_model(3, 5, 2, {peak(5, {{4, 5.0}}), peak(5, {{2, 5.0}})});
    const auto r = spec_step_greedy(m, std::vector<Token>{3});
    EXPECT_EQ(r.accepted, 1);
    EXPECT_EQ(r.tokens, (std::vector<Token>{2, 2}));
}

TEST(GreedyStep, AlwaysAtLeastTwoTokensAndMatchesBase)
{
    CounterRng rng(2);
    const Model m = make_scratch_model({{4, 3, 8, 12}, 0.7, 1.5}, 3);
    for (int i = 0; i < 50; ++i) {
        const auto ctx = random_tokens(1 + static_cast<int>(rng.uniform_index(6)), 8, rng);
        const auto r = spec_step_greedy(m, ctx);
        EXPECT_GE(r.tokens.size(), 2u);
        EXPECT_EQ(static_cast<int>(r.tokens.size()), r.accepted + 1);
        const auto base = base_greedy_generate(m, ctx, static_cast<int>(r.tokens.size()));
        EXPECT_EQ(r.tokens, std::vector<Token>(base.begin() + static_cast<std::ptrdiff_t>(ctx.size()), base.end()));
    }
}

TEST(Generate, GreedyAndTreeAreLossless)
{
    CounterRng rng(4);
    const Model scratch = make_scratch_model({{3, 4, 10, 16}, 0.7, 1.5}, 5);
    const Model ft = make_finetune_model(make_scratch_model({{1, 1, 10, 16}, 0.7, 1.5}, 6), 3, 4, 7, 0.5);
    for (const Model* m : {&scratch, &ft}) {
        for (int i = 0; i < 20; ++i) {
            const auto prompt = random_tokens(1 + static_cast<int>(rng.uniform_index(8)), 10, rng);
            const auto expect = base_greedy_generate(*m, prompt, 50);
            EXPECT_EQ(generate(*m, prompt, 50, {DecodeMode::Greedy, 1.0, 0, {}}).tokens, expect);
            EXPECT_EQ(generate(*m, prompt, 50, {DecodeMode::Tree, 1.0, 0, {2, 3, 2}}).tokens, expect);
        }
    }
}

TEST(Generate, StochasticMatchesBaseSamplingLaw)
{
    const Model m = make_scratch_model({{3, 3, 4, 8}, 0.7, 2.0}, 8);
    const std::vector<Token> prompt{1, 3};
    VectorXd exact(64);
    for (int f = 0; f < 64; ++f) {
        std::vector<Token> x = prompt;
        double p = 1.0;
        for (int k = 0; k < 3; ++k) {
            const Token t = static_cast<Token>((f >> (2 * (2 - k))) & 3);
            const auto d = apply_temperature(base_next_token_dist(m, encode_last(m.encoder, x)), 0.8);
            p *= d.probs()(t);
            x.push_back(t);
        }
        exact(f) = p;
    }
    const int runs = 200000;
    VectorXd counts = VectorXd::Zero(64);
    for (int i = 0; i < runs; ++i) {
        const auto a = generate(m, prompt, 3, {DecodeMode::Stochastic, 0.8, static_cast<std::uint64_t>(i), {}}).tokens;
        counts(a[2] * 16 + a[3] * 4 + a[4]) += 1.0;
    }
    const double tv = oracle::total_variation(counts / runs, exact);
    std::printf("stochastic decoding TV to the base law over 3 tokens: %.4f\n", tv);
    EXPECT_LE(tv, 0.015);
}

TEST(Generate, StochasticIsSeeded)
{
    const Model m = make_scratch_model({{3, 3, 6, 8}, 0.7, 1.5}, 9);
    const DecodeConfig c{DecodeMode::Stochastic, 1.0, 42, {}};
    EXPECT_EQ(generate(m, std::vector<Token>{0}, 30, c).tokens, generate(m, std::vector<Token>{0}, 30, c).tokens);
}

TEST(TreeStep, ChainOfOnesEqualsGreedyStep)
{
    CounterRng rng(10);
    const Model m = make_scratch_model({{3, 3, 8, 12}, 0.7, 1.5}, 11);
    for (int i = 0; i < 50; ++i) {
        const auto ctx = random_tokens(3, 8, rng);
        const auto state = advance(m.encoder, EncoderState::initial(m.encoder), ctx);
        const auto a = spec_step_tree(m, state, {1, 1, 1});
        const auto b = spec_step_greedy(m, state);
        EXPECT_EQ(a.tokens, b.tokens);
        EXPECT_EQ(a.accepted, b.accepted);
    }
}

TEST(TreeStep, SecondChoiceReachesFullDepth)
{
    const Model m = scripted_model(2, 5, 1, {peak(5, {{3, 5.0}, {1, 4.0}})});
    const std::vector<Token> ctx{0};
    EXPECT_EQ(spec_step_greedy(m, ctx).accepted, 1);
    const auto state = advance(m.encoder, EncoderState::initial(m.encoder), ctx);
    const auto r = spec_step_tree(m, state, {2, 2});
    EXPECT_EQ(r.accepted, 2);
    EXPECT_EQ(r.tokens, (std::vector<Token>{1, 1, 1}));
}

TEST(TreeStep, WiderTreesNeverAcceptLess)
{
    CounterRng rng(12);
    const Model m = make_scratch_model({{3, 3, 8, 12}, 0.7, 1.5}, 13);
    int narrow = 0;
    int wide = 0;
    for (int i = 0; i < 200; ++i) {
        const auto state = advance(m.encoder, EncoderState::initial(m.encoder), random_tokens(4, 8, rng));
        const int a = spec_step_tree(m, state, {1, 1, 1}).accepted;
        const int b = spec_step_tree(m, state, {1, 5, 1}).accepted;
        EXPECT_GE(b, a);
        narrow += a;
        wide += b;
    }
    EXPECT_GT(wide, narrow);
}

TEST(TreeStep, RejectsBadBranching)
{
    const Model m = make_scratch_model({{2, 2, 4, 8}, 0.7, 1.0}, 14);
    const auto state = advance(m.encoder, EncoderState::initial(m.encoder), std::vector<Token>{1});
    EXPECT_THROW(spec_step_tree(m, state, {1, 1, 1}), ArgumentError);
    EXPECT_THROW(spec_step_tree(m, state, {9}), ArgumentError);
}

TEST(Generate, ZeroTokensAndStatsInvariants)
{
    const Model m = make_scratch_model({{3, 3, 6, 8}, 0.7, 1.5}, 15);
    const std::vector<Token> prompt{2, 4};
    const auto none = generate(m, prompt, 0, {});
    EXPECT_EQ(none.tokens, prompt);
    EXPECT_EQ(none.stats.steps, 0);

    const auto g = generate(m, prompt, 77, {});
    EXPECT_EQ(g.tokens.size(), prompt.size() + 77);
    const auto& s = g.stats;
    EXPECT_EQ(static_cast<std::size_t>(s.steps), s.accepted_per_step.size());
    const int accepted = std::accumulate(s.accepted_per_step.begin(), s.accepted_per_step.end(), 0);
    EXPECT_EQ(s.tokens_emitted, accepted + s.steps);
    EXPECT_GE(s.tokens_emitted, 77);
    EXPECT_NEAR(s.average_accepted, static_cast<double>(accepted) / s.steps, 1e-12);
    EXPECT_GE(s.average_accepted, 1.0);
    const nlohmann::json j = s;
    EXPECT_EQ(j.at("steps").get<int>(), s.steps);
}
