// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/sampler.hpp>

#include <cpmtp/errors.hpp>

#include <algorithm>
#include <numeric>

namespace cpmtp {

void SampleConfig::check(int vocab) const
{
    if (!(temperature >= 0.0)) {
        throw ArgumentError("temperature must be >= 0");
    }
    for (int b : branching) {
        if (b < 1 || b > vocab) {
            throw ArgumentError("branching factor " + std::to_string(b) + " outside [1, V]");
        }
    }
}

LogDistributiond apply_temperature(const LogDistributiond& dist, double temperature)
{
    if (temperature < 0.0) {
        throw ArgumentError("temperature must be >= 0");
    }
    LogDistributiond out;
    if (temperature == 0.0) {
        out.log_probs = VectorXd::Constant(dist.size(), -std::numeric_limits<double>::infinity());
        out.log_probs(argmax_lowest(dist.log_probs)) = 0.0;
        return out;
    }
    if (temperature == 1.0) {
        return dist;
    }
    out.log_probs = log_normalize((dist.log_probs / temperature).eval());
    return out;
}

std::vector<Token> sample_sequence(const CPJointDistd& dist, double temperature, CounterRng& rng, SamplerOps* ops)
{
    CPJointDistd cur = dist;
    std::vector<Token> out;
    for (int s = cur.next_free_position(); s < cur.horizon(); s = cur.next_free_position()) {
        const auto m = first_token_marginal(cur);
        Token t;
        if (temperature == 0.0) {
            t = static_cast<Token>(argmax_lowest(m.log_probs));
        } else {
            t = static_cast<Token>(sample_categorical(apply_temperature(m, temperature).log_probs, rng));
        }
        if (ops) {
            ops->expert_token_products += static_cast<std::uint64_t>(cur.rank()) * cur.vocab();
        }
        out.push_back(t);
        cur = condition_on(cur, s, t);
    }
    return out;
}

std::vector<Token> sample_sequence(const CPJointDistd& dist, const SampleConfig& config)
{
    config.check(dist.vocab());
    CounterRng rng(config.seed);
    return sample_sequence(dist, config.temperature, rng);
}

std::vector<Token> greedy_sequence(const CPJointDistd& dist)
{
    CounterRng unused(0);
    return sample_sequence(dist, 0.0, unused);
}

std::vector<Token> top_k(const LogDistributiond& dist, int k)
{
    if (k < 1 || k > dist.size()) {
        throw ArgumentError("top_k: k = " + std::to_string(k) + " outside [1, V]");
    }
    std::vector<Token> ids(static_cast<std::size_t>(dist.size()));
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(),
                     [&](Token a, Token b) { return dist.log_probs(a) > dist.log_probs(b); });
    ids.resize(static_cast<std::size_t>(k));
    return ids;
}

std::vector<Token> DraftTree::path(int node) const
{
    std::vector<Token> out;
    for (int n = node; n > 0; n = nodes[static_cast<std::size_t>(n)].parent) {
        out.push_back(nodes[static_cast<std::size_t>(n)].token);
    }
    std::reverse(out.begin(), out.end());
    return out;
}

std::vector<int> DraftTree::leaves() const
{
    std::vector<bool> has_child(nodes.size(), false);
    for (const auto& n : nodes) {
        if (n.parent >= 0) {
            has_child[static_cast<std::size_t>(n.parent)] = true;
        }
    }
    std::vector<int> out;
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        if (!has_child[i]) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

DraftTree build_draft_tree(const CPJointDistd& dist, const std::vector<int>& branching,
                           const std::optional<LogDistributiond>& first_level)
{
    const auto free = dist.free_positions();
    if (branching.size() > free.size()) {
        throw ArgumentError("build_draft_tree: more levels than free positions");
    }
    for (int b : branching) {
        if (b < 1 || b > dist.vocab()) {
            throw ArgumentError("build_draft_tree: branching factor " + std::to_string(b) + " outside [1, V]");
        }
    }
    DraftTree tree;
    tree.nodes.push_back({});
    std::vector<std::pair<int, CPJointDistd>> frontier{{0, dist}};
    for (std::size_t level = 0; level < branching.size(); ++level) {
        const int s = free[level];
        std::vector<std::pair<int, CPJointDistd>> next;
        for (const auto& [node, cond] : frontier) {
            const LogDistributiond m = (level == 0 && first_level) ? *first_level : marginal(cond, s);
            const double base = tree.nodes[static_cast<std::size_t>(node)].cumulative_log_prob;
            for (Token t : top_k(m, branching[level])) {
                const int id = static_cast<int>(tree.nodes.size());
                tree.nodes.push_back({t, node, static_cast<int>(level) + 1, base + m.log_probs(t)});
                if (level + 1 < branching.size()) {
                    next.emplace_back(id, condition_on(cond, s, t));
                }
            }
        }
        tree.level_sizes.push_back(static_cast<int>(tree.nodes.size()) - 1 -
                                   std::accumulate(tree.level_sizes.begin(), tree.level_sizes.end(), 0));
        frontier = std::move(next);
    }
    return tree;
}

} // namespace cpmtp
