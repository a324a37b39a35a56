// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/encoder.hpp>
#include <cpmtp/model.hpp>
#include <cpmtp/rng.hpp>
#include <cpmtp/sampler.hpp>

#include <json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace cpmtp {

struct StepResult {
    std::vector<Token> tokens; ///< accepted draft tokens followed by one base token
    int accepted = 0;          ///< accepted draft tokens
    int base_evaluations = 0;  ///< base-model next-token distributions computed
};

/**
 * Greedy draft-then-verify step from the encoder state after the context.
 *
 * Draft: the base model's greedy token at position 1 (in scratch mode this
 * is exactly the CP marginal's argmax), then greedy continuation from the
 * CP distribution conditioned on it. Verify: the base model's greedy token
 * at every drafted prefix. Emits the longest agreeing prefix plus the base
 * token that follows it, so at least two tokens per step.
 */
StepResult spec_step_greedy(const Model& model, const EncoderState& state);
StepResult spec_step_greedy(const Model& model, std::span<const Token> context);

/**
 * Stochastic step at temperature T > 0. Draft token 1 is drawn from the
 * base distribution, later tokens sequentially from the conditioned CP
 * distribution. Token k >= 2 is accepted with probability
 * min(1, p_base / p_draft); on the first rejection a replacement is drawn
 * from normalize(max(0, p_base - p_draft)), otherwise a bonus token from
 * the base model. RNG draw order: n - 1 draft draws (after the first
 * base draw), then one uniform per verified token, then one draw for the
 * replacement or bonus token.
 */
StepResult spec_step_stochastic(const Model& model, const EncoderState& state, double temperature, CounterRng& rng);

/// Static-tree greedy step. Every root-to-leaf path is verified on its own
/// (encoder states shared through a prefix-keyed cache) and the deepest
/// agreeing path wins. Level-1 candidates come from the base distribution.
StepResult spec_step_tree(const Model& model, const EncoderState& state, const std::vector<int>& branching);

enum class DecodeMode { Greedy, Stochastic, Tree };

struct DecodeConfig {
    DecodeMode mode = DecodeMode::Greedy;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::vector<int> branching; ///< tree mode only
};

struct SpecDecodeStats {
    int steps = 0;
    std::int64_t tokens_emitted = 0; ///< sum over steps of accepted + 1
    std::vector<int> accepted_per_step;
    double average_accepted = 0.0;
    double wall_ms_total = 0.0;      ///< excluding the warmup (first) step
    double wall_ms_per_token = 0.0;  ///< over tokens of non-warmup steps
    std::int64_t base_evaluations = 0;

    void record(const StepResult& r, double wall_ms, bool warmup);
    void finalize();

private:
    std::int64_t timed_tokens_ = 0;
};

void to_json(nlohmann::json& j, const SpecDecodeStats& s);

struct GenerateResult {
    std::vector<Token> tokens; ///< prompt followed by max_tokens new tokens
    SpecDecodeStats stats;
};

/// Repeats speculative steps until max_tokens new tokens exist; the output
/// is truncated to exactly max_tokens (stats count every emitted token).
GenerateResult generate(const Model& model, std::span<const Token> prompt, int max_tokens, const DecodeConfig& config);

/// Plain autoregressive decoding with the base model only (greedy).
std::vector<Token> base_greedy_generate(const Model& model, std::span<const Token> prompt, int max_tokens);

/// Plain ancestral sampling from the base model at a temperature.
std::vector<Token> base_sample_generate(const Model& model, std::span<const Token> prompt, int max_tokens,
                                        double temperature, CounterRng& rng);

} // namespace cpmtp
