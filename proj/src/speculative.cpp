// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/speculative.hpp>

#include <cpmtp/errors.hpp>

#include <chrono>
#include <map>
#include <numeric>

namespace cpmtp {

namespace {

Token base_greedy(const Model& model, const EncoderState& state)
{
    return static_cast<Token>(argmax_lowest(base_next_token_dist(model, state.embedding()).log_probs));
}

EncoderState state_after(const Model& model, std::span<const Token> context)
{
    if (context.empty()) {
        throw ArgumentError("speculative decoding needs a non-empty context");
    }
    return advance(model.encoder, EncoderState::initial(model.encoder), context);
}

} // namespace

StepResult spec_step_greedy(const Model& model, const EncoderState& state)
{
    const int n = model.dims().horizon;
    StepResult out;

    // Position 1 of the draft coincides with the base model's greedy token.
    const Token first = base_greedy(model, state);
    ++out.base_evaluations;
    std::vector<Token> draft{first};
    if (n > 1) {
        const auto rest = greedy_sequence(condition_on(draft_dist(model, state.embedding()), 0, first));
        draft.insert(draft.end(), rest.begin(), rest.end());
    }

    EncoderState s = state;
    out.tokens.push_back(first);
    out.accepted = 1;
    for (int k = 1; k < n; ++k) {
        s = advance(model.encoder, s, draft[static_cast<std::size_t>(k - 1)]);
        const Token verified = base_greedy(model, s);
        ++out.base_evaluations;
        if (verified != draft[static_cast<std::size_t>(k)]) {
            out.tokens.push_back(verified);
            return out;
        }
        out.tokens.push_back(verified);
        ++out.accepted;
    }
    s = advance(model.encoder, s, draft.back());
    out.tokens.push_back(base_greedy(model, s));
    ++out.base_evaluations;
    return out;
}

StepResult spec_step_greedy(const Model& model, std::span<const Token> context)
{
    return spec_step_greedy(model, state_after(model, context));
}

StepResult spec_step_stochastic(const Model& model, const EncoderState& state, double temperature, CounterRng& rng)
{
    if (!(temperature > 0.0)) {
        throw ArgumentError("stochastic speculative decoding needs temperature > 0");
    }
    const int n = model.dims().horizon;
    StepResult out;

    const auto base1 = apply_temperature(base_next_token_dist(model, state.embedding()), temperature);
    ++out.base_evaluations;
    const auto first = static_cast<Token>(sample_categorical(base1.log_probs, rng));
    std::vector<Token> draft{first};
    std::vector<LogDistributiond> draft_probs{base1};
    CPJointDistd cond = condition_on(draft_dist(model, state.embedding()), 0, first);
    for (int k = 1; k < n; ++k) {
        auto m = apply_temperature(first_token_marginal(cond), temperature);
        const auto t = static_cast<Token>(sample_categorical(m.log_probs, rng));
        draft.push_back(t);
        draft_probs.push_back(std::move(m));
        cond = condition_on(cond, k, t);
    }

    out.tokens.push_back(first);
    out.accepted = 1;
    EncoderState s = state;
    for (int k = 1; k < n; ++k) {
        s = advance(model.encoder, s, draft[static_cast<std::size_t>(k - 1)]);
        const auto base = apply_temperature(base_next_token_dist(model, s.embedding()), temperature);
        ++out.base_evaluations;
        const Token t = draft[static_cast<std::size_t>(k)];
        const double p_base = std::exp(base.log_probs(t));
        const double p_draft = std::exp(draft_probs[static_cast<std::size_t>(k)].log_probs(t));
        if (rng.uniform() * p_draft < p_base) {
            out.tokens.push_back(t);
            ++out.accepted;
            continue;
        }
        const VectorXd residual =
            (base.probs() - draft_probs[static_cast<std::size_t>(k)].probs()).cwiseMax(0.0);
        const double mass = residual.sum();
        // A rejection implies p_base(t) < p_draft(t), so the residual has mass.
        const VectorXd log_res = mass > 0.0 ? VectorXd((residual / mass).array().log()) : base.log_probs;
        out.tokens.push_back(static_cast<Token>(sample_categorical(log_res, rng)));
        return out;
    }
    s = advance(model.encoder, s, draft.back());
    const auto bonus = apply_temperature(base_next_token_dist(model, s.embedding()), temperature);
    ++out.base_evaluations;
    out.tokens.push_back(static_cast<Token>(sample_categorical(bonus.log_probs, rng)));
    return out;
}

StepResult spec_step_tree(const Model& model, const EncoderState& state, const std::vector<int>& branching)
{
    const int n = model.dims().horizon;
    if (branching.empty() || static_cast<int>(branching.size()) > n) {
        throw ArgumentError("tree branching needs between 1 and n levels");
    }
    StepResult out;
    const auto base1 = base_next_token_dist(model, state.embedding());
    const auto tree = build_draft_tree(draft_dist(model, state.embedding()), branching, base1);

    // Base-model greedy token after each verified prefix, keyed by prefix.
    std::map<std::vector<Token>, std::pair<EncoderState, Token>> cache;
    cache.emplace(std::vector<Token>{}, std::make_pair(state, static_cast<Token>(argmax_lowest(base1.log_probs))));
    ++out.base_evaluations;
    auto lookup = [&](const std::vector<Token>& prefix) -> const std::pair<EncoderState, Token>& {
        if (auto it = cache.find(prefix); it != cache.end()) {
            return it->second;
        }
        std::vector<Token> parent(prefix.begin(), prefix.end() - 1);
        const EncoderState s = advance(model.encoder, cache.at(parent).first, prefix.back());
        ++out.base_evaluations;
        return cache.emplace(prefix, std::make_pair(s, base_greedy(model, s))).first->second;
    };

    std::vector<Token> best;
    for (int leaf : tree.leaves()) {
        const auto path = tree.path(leaf);
        std::vector<Token> prefix;
        for (Token t : path) {
            if (lookup(prefix).second != t) {
                break;
            }
            prefix.push_back(t);
        }
        if (prefix.size() > best.size()) {
            best = prefix;
        }
    }
    out.tokens = best;
    out.accepted = static_cast<int>(best.size());
    out.tokens.push_back(lookup(best).second);
    return out;
}

void SpecDecodeStats::record(const StepResult& r, double wall_ms, bool warmup)
{
    ++steps;
    tokens_emitted += static_cast<std::int64_t>(r.tokens.size());
    accepted_per_step.push_back(r.accepted);
    base_evaluations += r.base_evaluations;
    if (!warmup) {
        wall_ms_total += wall_ms;
        timed_tokens_ += static_cast<std::int64_t>(r.tokens.size());
    }
}

void SpecDecodeStats::finalize()
{
    average_accepted = accepted_per_step.empty()
                           ? 0.0
                           : static_cast<double>(std::accumulate(accepted_per_step.begin(), accepted_per_step.end(),
                                                                 std::int64_t{0})) /
                                 static_cast<double>(accepted_per_step.size());
    wall_ms_per_token = timed_tokens_ > 0 ? wall_ms_total / static_cast<double>(timed_tokens_) : 0.0;
}

void to_json(nlohmann::json& j, const SpecDecodeStats& s)
{
    j = nlohmann::json{{"steps", s.steps},
                       {"tokens_emitted", s.tokens_emitted},
                       {"accepted_per_step", s.accepted_per_step},
                       {"average_accepted", s.average_accepted},
                       {"wall_ms_total", s.wall_ms_total},
                       {"wall_ms_per_token", s.wall_ms_per_token},
                       {"base_evaluations", s.base_evaluations}};
}

GenerateResult generate(const Model& model, std::span<const Token> prompt, int max_tokens, const DecodeConfig& config)
{
    if (prompt.empty()) {
        throw ArgumentError("generate: prompt must be non-empty");
    }
    if (max_tokens < 0) {
        throw ArgumentError("generate: max_tokens must be >= 0");
    }
    GenerateResult out;
    out.tokens.assign(prompt.begin(), prompt.end());
    EncoderState state = state_after(model, prompt);
    CounterRng rng(config.seed);
    const std::size_t target = prompt.size() + static_cast<std::size_t>(max_tokens);
    while (out.tokens.size() < target) {
        const auto t0 = std::chrono::steady_clock::now();
        StepResult r;
        switch (config.mode) {
        case DecodeMode::Greedy:
            r = spec_step_greedy(model, state);
            break;
        case DecodeMode::Stochastic:
            r = spec_step_stochastic(model, state, config.temperature, rng);
            break;
        case DecodeMode::Tree:
            r = spec_step_tree(model, state, config.branching);
            break;
        }
        state = advance(model.encoder, state, r.tokens);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        out.stats.record(r, ms, out.stats.steps == 0);
        out.tokens.insert(out.tokens.end(), r.tokens.begin(), r.tokens.end());
    }
    out.tokens.resize(target);
    out.stats.finalize();
    return out;
}

std::vector<Token> base_greedy_generate(const Model& model, std::span<const Token> prompt, int max_tokens)
{
    std::vector<Token> out(prompt.begin(), prompt.end());
    EncoderState s = state_after(model, prompt);
    for (int i = 0; i < max_tokens; ++i) {
        const Token t = base_greedy(model, s);
        out.push_back(t);
        s = advance(model.encoder, s, t);
    }
    return out;
}

std::vector<Token> base_sample_generate(const Model& model, std::span<const Token> prompt, int max_tokens,
                                        double temperature, CounterRng& rng)
{
    std::vector<Token> out(prompt.begin(), prompt.end());
    EncoderState s = state_after(model, prompt);
    for (int i = 0; i < max_tokens; ++i) {
        const auto d = apply_temperature(base_next_token_dist(model, s.embedding()), temperature);
        const auto t = static_cast<Token>(sample_categorical(d.log_probs, rng));
        out.push_back(t);
        s = advance(model.encoder, s, t);
    }
    return out;
}

} // namespace cpmtp
