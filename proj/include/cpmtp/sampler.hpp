// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/rng.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace cpmtp {

struct SampleConfig {
    double temperature = 1.0; ///< 0 means greedy
    std::uint64_t seed = 0;
    std::vector<int> branching; ///< draft-tree branching factor per level

    void check(int vocab) const;
};

/// Applies a temperature to a log-distribution and renormalizes. T = 0
/// yields a point mass on the argmax (lowest index on ties).
LogDistributiond apply_temperature(const LogDistributiond& dist, double temperature);

/// Counts the inner-loop work of the sequential sampler (expert-token
/// products touched), for cost assertions.
struct SamplerOps {
    std::uint64_t expert_token_products = 0;
};

/**
 * Sequential factor-space sampling. For each position in order: take the
 * marginal of the next free position of the (conditioned) distribution,
 * temper it, draw one token (one uniform from `rng`, inverse CDF), then
 * condition on that token. At T = 1 the output is an exact draw from the
 * CP joint.
 */
std::vector<Token> sample_sequence(const CPJointDistd& dist, double temperature, CounterRng& rng,
                                   SamplerOps* ops = nullptr);

/// Convenience overload seeded from config.seed.
std::vector<Token> sample_sequence(const CPJointDistd& dist, const SampleConfig& config);

/// Argmax at each step of the sequential procedure (lowest index on ties).
std::vector<Token> greedy_sequence(const CPJointDistd& dist);

/// Top-k token ids of a log-distribution ordered by probability, ties by
/// lowest index.
std::vector<Token> top_k(const LogDistributiond& dist, int k);

struct DraftNode {
    Token token = -1;        ///< -1 for the root
    int parent = -1;         ///< index into DraftTree::nodes, -1 for the root
    int depth = 0;           ///< 0 for the root
    double cumulative_log_prob = 0.0;
};

/// Static draft tree. nodes[0] is the root; children of a node appear in
/// decreasing conditional probability.
struct DraftTree {
    std::vector<DraftNode> nodes;
    std::vector<int> level_sizes; ///< node count per depth 1..L

    int depth() const { return static_cast<int>(level_sizes.size()); }
    std::vector<Token> path(int node) const;
    std::vector<int> leaves() const;
};

/// Level s holds, under every node of level s-1, the top-b_s tokens of the
/// conditional marginal given the path to that node. When `first_level` is
/// given it replaces the CP marginal for choosing level-1 candidates (the
/// CP distribution is still conditioned on them).
DraftTree build_draft_tree(const CPJointDistd& dist, const std::vector<int>& branching,
                           const std::optional<LogDistributiond>& first_level = std::nullopt);

} // namespace cpmtp
