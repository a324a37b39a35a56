// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/errors.hpp>
#include <cpmtp/oracles.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace cpmtp;

namespace {

CPJointDistd zero_logits(int n, int v, int r)
{
    return from_logits(VectorXd::Zero(r), std::vector<MatrixXd>(static_cast<std::size_t>(n), MatrixXd::Zero(v, r)));
}

/// Factor logits that make column a of position s a (near) point mass on tokens[a].
MatrixXd point_masses(int v, const std::vector<Token>& tokens)
{
    MatrixXd m = MatrixXd::Constant(v, static_cast<Eigen::Index>(tokens.size()), -700.0);
    for (std::size_t a = 0; a < tokens.size(); ++a) {
        m(tokens[a], static_cast<Eigen::Index>(a)) = 700.0;
    }
    return m;
}

std::vector<Token> unflatten(std::size_t f, int n, int v)
{
    std::vector<Token> x(static_cast<std::size_t>(n));
    for (int s = n; s-- > 0;) {
        x[static_cast<std::size_t>(s)] = static_cast<Token>(f % static_cast<std::size_t>(v));
        f /= static_cast<std::size_t>(v);
    }
    return x;
}

} // namespace

TEST(FromLogits, ZeroLogitsGiveUniform)
{
    const auto d = zero_logits(2, 4, 3);
    for (int s = 0; s < 2; ++s) {
        EXPECT_TRUE(d.log_factor(s).isConstant(std::log(0.25), 1e-15));
    }
    EXPECT_TRUE(d.log_weights().isConstant(std::log(1.0 / 3.0), 1e-15));
}

TEST(FromLogits, ExtremeWeightLogits)
{
    VectorXd g(2);
    g << 10.0, -10.0;
    const auto d = from_logits(g, std::vector<MatrixXd>{MatrixXd::Zero(3, 2)});
    EXPECT_NEAR(d.log_weights()(0), -2.0611536e-9, 1e-15);
    EXPECT_NEAR(d.log_weights()(1), -20.0, 1e-8);
}

TEST(FromLogits, OutputsAreNormalized)
{
    CounterRng rng(11);
    for (int i = 0; i < 50; ++i) {
        const auto d = oracle::random_dist(3, 6, 4, rng, 50.0);
        EXPECT_NEAR(logsumexp(d.log_weights()), 0.0, 1e-12);
        for (int s = 0; s < 3; ++s) {
            for (int a = 0; a < 4; ++a) {
                EXPECT_NEAR(logsumexp(d.log_factor(s).col(a)), 0.0, 1e-12);
            }
        }
    }
}

TEST(FromLogits, RejectsBadInput)
{
    EXPECT_THROW(from_logits(VectorXd::Zero(2), std::vector<MatrixXd>{MatrixXd::Zero(4, 3)}), StructuralError);
    EXPECT_THROW(from_logits(VectorXd::Zero(2), std::vector<MatrixXd>{}), StructuralError);
    MatrixXd bad = MatrixXd::Zero(4, 2);
    bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(from_logits(VectorXd::Zero(2), std::vector<MatrixXd>{bad}), NumericError);
    VectorXd inf_gate = VectorXd::Zero(2);
    inf_gate(0) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(from_logits(inf_gate, std::vector<MatrixXd>{MatrixXd::Zero(4, 2)}), NumericError);
}

TEST(FromLogits, ClampsHugeLogits)
{
    MatrixXd f = MatrixXd::Zero(3, 1);
    f(0, 0) = 1e6;
    f(1, 0) = -1e6;
    const auto d = from_logits(VectorXd::Zero(1), std::vector<MatrixXd>{f});
    EXPECT_TRUE(d.log_factor(0).allFinite());
    EXPECT_NEAR(d.log_factor(0)(0, 0), 0.0, 1e-12);
    EXPECT_NEAR(d.log_factor(0)(1, 0), -1400.0, 1e-9);
}

TEST(LogProb, UniformIsProductOfUniforms)
{
    const auto d = zero_logits(2, 4, 3);
    for (Token a = 0; a < 4; ++a) {
        for (Token b = 0; b < 4; ++b) {
            EXPECT_NEAR(log_prob(d, std::vector<Token>{a, b}), 2.0 * std::log(0.25), 1e-12);
        }
    }
    EXPECT_NEAR(log_prob(d, std::vector<Token>{0, 3}), -2.77258872, 1e-8);
}

TEST(LogProb, SingleExpertReduction)
{
    CounterRng rng(3);
    std::vector<MatrixXd> logits{uniform_matrix<double>(5, 2, 2.0, rng), uniform_matrix<double>(5, 2, 2.0, rng)};
    VectorXd g(2);
    g << 0.0, -1e4;
    const auto d = from_logits(g, logits);
    const std::vector<Token> x{3, 1};
    EXPECT_NEAR(log_prob(d, x), d.log_factor(0)(3, 0) + d.log_factor(1)(1, 0), 1e-12);
}

TEST(LogProb, MatchesMaterializedEntry)
{
    CounterRng rng(7);
    const auto d = oracle::random_dist(3, 7, 4, rng);
    const auto t = materialize(d);
    for (std::size_t f = 0; f < static_cast<std::size_t>(t.values.size()); ++f) {
        const auto x = unflatten(f, 3, 7);
        EXPECT_NEAR(std::exp(log_prob(d, x)), t(x), 1e-9);
    }
}

TEST(LogProb, TokenOutOfRange)
{
    const auto d = zero_logits(2, 4, 2);
    EXPECT_THROW(log_prob(d, std::vector<Token>{0, 4}), IndexError);
    EXPECT_THROW(log_prob(d, std::vector<Token>{-1, 0}), IndexError);
    EXPECT_THROW(log_prob(d, std::vector<Token>{0}), StructuralError);
}

TEST(LogProb, TinyFactorProbabilitiesStayFinite)
{
    MatrixXd f = MatrixXd::Zero(2, 2);
    f(1, 0) = -699.0;
    f(1, 1) = -699.0;
    const auto d = from_logits(VectorXd::Zero(2), std::vector<MatrixXd>{f, f});
    const double lp = log_prob(d, std::vector<Token>{1, 1});
    EXPECT_TRUE(std::isfinite(lp));
    EXPECT_NEAR(lp, -2.0 * 699.0, 1e-9);
}

TEST(Materialize, RankOneIsOuterProduct)
{
    CounterRng rng(5);
    const auto d = oracle::random_dist(2, 4, 1, rng);
    const auto t = materialize(d);
    const VectorXd p0 = d.log_factor(0).col(0).array().exp();
    const VectorXd p1 = d.log_factor(1).col(0).array().exp();
    for (Token a = 0; a < 4; ++a) {
        for (Token b = 0; b < 4; ++b) {
            EXPECT_NEAR(t(std::vector<Token>{a, b}), p0(a) * p1(b), 1e-14);
        }
    }
}

TEST(Materialize, UniformThreeByThree)
{
    const auto t = materialize(zero_logits(2, 3, 2));
    ASSERT_EQ(t.values.size(), 9);
    EXPECT_TRUE(t.values.isConstant(1.0 / 9.0, 1e-15));
}

TEST(Materialize, SumsToOneAndRespectsLimit)
{
    CounterRng rng(9);
    const auto d = oracle::random_dist(3, 7, 5, rng);
    EXPECT_NEAR(materialize(d).values.sum(), 1.0, 1e-9);
    EXPECT_THROW(materialize(d, 100), CapacityError);
    EXPECT_NO_THROW(materialize(d, 343));
}

TEST(Marginal, PointMassExperts)
{
    std::vector<MatrixXd> logits{point_masses(4, {0, 1}), MatrixXd::Zero(4, 2)};
    const auto d = from_logits(VectorXd::Zero(2), logits);
    const VectorXd p = first_token_marginal(d).probs();
    EXPECT_NEAR(p(0), 0.5, 1e-12);
    EXPECT_NEAR(p(1), 0.5, 1e-12);
    EXPECT_NEAR(p(2), 0.0, 1e-12);
    EXPECT_NEAR(p(3), 0.0, 1e-12);
}

TEST(Marginal, RankOneIsFirstFactor)
{
    CounterRng rng(13);
    const auto d = oracle::random_dist(3, 5, 1, rng);
    EXPECT_TRUE(first_token_marginal(d).log_probs.isApprox(d.log_factor(0).col(0), 1e-15));
}

TEST(Marginal, MatchesAxisSum)
{
    CounterRng rng(17);
    const auto d = oracle::random_dist(3, 5, 3, rng);
    const auto dense = oracle::dense_joint(d);
    for (int pos = 0; pos < 3; ++pos) {
        const VectorXd expect = oracle::dense_conditional(dense, 3, 5, {}, pos);
        EXPECT_LE((marginal(d, pos).probs() - expect).cwiseAbs().maxCoeff(), 1e-9);
    }
    EXPECT_NEAR(logsumexp(first_token_marginal(d).log_probs), 0.0, 1e-12);
}

TEST(ConditionOn, RankOneLeavesFactorsAlone)
{
    CounterRng rng(19);
    const auto d = oracle::random_dist(3, 5, 1, rng);
    const auto c = condition_on(d, 0, 2);
    EXPECT_EQ(c.log_weights()(0), 0.0);
    EXPECT_TRUE(marginal(c, 1).log_probs.isApprox(marginal(d, 1).log_probs, 1e-15));
    EXPECT_TRUE(marginal(c, 2).log_probs.isApprox(marginal(d, 2).log_probs, 1e-15));
    EXPECT_EQ(c.shared_factors().get(), d.shared_factors().get());
}

TEST(ConditionOn, DisjointPointMassesGiveOneHotWeights)
{
    std::vector<MatrixXd> logits{point_masses(4, {0, 1}), MatrixXd::Zero(4, 2)};
    const auto d = from_logits(VectorXd::Zero(2), logits);
    const auto c = condition_on(d, 0, 1);
    EXPECT_NEAR(std::exp(c.log_weights()(1)), 1.0, 1e-12);
    EXPECT_LT(std::exp(c.log_weights()(0)), 1e-300);
    EXPECT_EQ(c.next_free_position(), 1);
}

TEST(ConditionOn, MatchesBruteForceSlice)
{
    CounterRng rng(23);
    for (int i = 0; i < 50; ++i) {
        const auto d = oracle::random_dist(3, 5, 3, rng);
        const auto dense = oracle::dense_joint(d);
        const Token x0 = static_cast<Token>(rng.uniform_index(5));
        const auto c = condition_on(d, 0, x0);
        const std::vector<Token> prefix{x0};
        EXPECT_LE((first_token_marginal(c).probs() - oracle::dense_conditional(dense, 3, 5, prefix, 1))
                      .cwiseAbs()
                      .maxCoeff(),
                  1e-9);
        EXPECT_NEAR(logsumexp(c.log_weights()), 0.0, 1e-12);
    }
}

TEST(ConditionOn, ChainRule)
{
    CounterRng rng(29);
    for (int i = 0; i < 30; ++i) {
        const auto d = oracle::random_dist(3, 6, 4, rng);
        std::vector<Token> x(3);
        for (auto& t : x) {
            t = static_cast<Token>(rng.uniform_index(6));
        }
        double sum = 0.0;
        CPJointDistd c = d;
        for (int s = 0; s < 3; ++s) {
            sum += first_token_marginal(c).log_probs(x[static_cast<std::size_t>(s)]);
            c = condition_on(c, s, x[static_cast<std::size_t>(s)]);
        }
        EXPECT_NEAR(sum, log_prob(d, x), 1e-9);
    }
}

TEST(ConditionOn, DoubleConditioningIsAStateError)
{
    const auto d = zero_logits(2, 3, 2);
    const auto c = condition_on(d, 0, 1);
    EXPECT_THROW(condition_on(c, 0, 2), StateError);
    EXPECT_THROW(condition_on(d, 0, 3), IndexError);
    EXPECT_THROW(condition_on(d, 2, 0), IndexError);
}

TEST(ConditionOn, LogProbSkipsConsumedPositions)
{
    CounterRng rng(31);
    const auto d = oracle::random_dist(2, 4, 3, rng);
    const auto c = condition_on(d, 0, 2);
    const std::vector<Token> x{2, 1};
    EXPECT_NEAR(log_prob(c, x), log_prob(d, x) - first_token_marginal(d).log_probs(2), 1e-12);
}
