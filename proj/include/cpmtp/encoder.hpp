// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/log_space.hpp>
#include <cpmtp/rng.hpp>

#include <span>
#include <vector>

namespace cpmtp {

/// Context embedding e_t for one position.
using Embedding = VectorXd;

/**
 * Causal decayed-sum encoder:
 *
 *     h_t = decay * h_{t-1} + (1 - decay) * token_table.row(x_t),  h_0 = 0
 *     e_t = tanh(h_t)
 *
 * so e_t depends on x_1..x_t only and every entry lies in (-1, 1).
 */
struct EncoderParams {
    MatrixXd token_table; ///< V x E
    double decay = 0.7;
    bool trainable = true;

    int vocab() const { return static_cast<int>(token_table.rows()); }
    int embed() const { return static_cast<int>(token_table.cols()); }

    void check() const;

    /// Table entries ~ U(-scale, scale).
    static EncoderParams random(int vocab, int embed, double decay, CounterRng& rng, double scale = 1.0);
};

/// Running recurrence state; the analogue of a KV cache for this encoder.
struct EncoderState {
    VectorXd hidden;

    static EncoderState initial(const EncoderParams& params) { return {VectorXd::Zero(params.embed())}; }
    Embedding embedding() const { return hidden.array().tanh().matrix(); }
};

EncoderState advance(const EncoderParams& params, const EncoderState& state, Token token);
EncoderState advance(const EncoderParams& params, const EncoderState& state, std::span<const Token> tokens);

/// Embeddings e_1..e_T for a non-empty token sequence.
std::vector<Embedding> encode(const EncoderParams& params, std::span<const Token> tokens);

/// Embedding of the last position only.
Embedding encode_last(const EncoderParams& params, std::span<const Token> tokens);

/// Gradient w.r.t. token_table given dL/de_t for every position (exact
/// backpropagation through tanh and the recurrence).
MatrixXd encode_grad(const EncoderParams& params, std::span<const Token> tokens,
                     std::span<const VectorXd> upstream);

/// Same, with a single upstream gradient at the last position.
MatrixXd encode_grad_last(const EncoderParams& params, std::span<const Token> tokens, const VectorXd& upstream);

/// Accumulating form of encode_grad_last: adds into `grad` only the rows touched.
void accumulate_encode_grad_last(const EncoderParams& params, std::span<const Token> tokens,
                                 const VectorXd& upstream, MatrixXd& grad);

} // namespace cpmtp
