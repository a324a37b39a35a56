// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/encoder.hpp>

#include <cpmtp/errors.hpp>

#include <string>

namespace cpmtp {

void EncoderParams::check() const
{
    if (!(decay > 0.0 && decay < 1.0)) {
        throw ArgumentError("encoder decay must lie in (0, 1), got " + std::to_string(decay));
    }
    if (token_table.rows() < 1 || token_table.cols() < 1) {
        throw StructuralError("encoder token table must be non-empty");
    }
    if (!token_table.allFinite()) {
        throw NumericError("encoder token table has non-finite entries");
    }
}

EncoderParams EncoderParams::random(int vocab, int embed, double decay, CounterRng& rng, double scale)
{
    EncoderParams p;
    p.token_table = uniform_matrix<double>(vocab, embed, scale, rng);
    p.decay = decay;
    p.check();
    return p;
}

EncoderState advance(const EncoderParams& params, const EncoderState& state, Token token)
{
    detail::check_token(token, params.vocab());
    EncoderState next;
    next.hidden = params.decay * state.hidden + (1.0 - params.decay) * params.token_table.row(token).transpose();
    return next;
}

EncoderState advance(const EncoderParams& params, const EncoderState& state, std::span<const Token> tokens)
{
    EncoderState s = state;
    for (Token t : tokens) {
        s = advance(params, s, t);
    }
    return s;
}

std::vector<Embedding> encode(const EncoderParams& params, std::span<const Token> tokens)
{
    if (tokens.empty()) {
        throw ArgumentError("encode: empty token sequence");
    }
    std::vector<Embedding> out;
    out.reserve(tokens.size());
    EncoderState s = EncoderState::initial(params);
    for (Token t : tokens) {
        s = advance(params, s, t);
        out.push_back(s.embedding());
    }
    return out;
}

Embedding encode_last(const EncoderParams& params, std::span<const Token> tokens)
{
    if (tokens.empty()) {
        throw ArgumentError("encode: empty token sequence");
    }
    return advance(params, EncoderState::initial(params), tokens).embedding();
}

MatrixXd encode_grad(const EncoderParams& params, std::span<const Token> tokens, std::span<const VectorXd> upstream)
{
    if (upstream.size() != tokens.size()) {
        throw StructuralError("encode_grad: need one upstream gradient per position");
    }
    const auto embeddings = encode(params, tokens);
    MatrixXd grad = MatrixXd::Zero(params.vocab(), params.embed());
    VectorXd dh = VectorXd::Zero(params.embed());
    for (std::size_t t = tokens.size(); t-- > 0;) {
        if (upstream[t].size() != params.embed()) {
            throw StructuralError("encode_grad: upstream gradient must have length E");
        }
        // dL/dh_t = (1 - e_t^2) * g_t + decay * dL/dh_{t+1}
        dh = (1.0 - embeddings[t].array().square()).matrix().cwiseProduct(upstream[t]) + params.decay * dh;
        grad.row(tokens[t]) += (1.0 - params.decay) * dh.transpose();
    }
    return grad;
}

void accumulate_encode_grad_last(const EncoderParams& params, std::span<const Token> tokens,
                                 const VectorXd& upstream, MatrixXd& grad)
{
    if (tokens.empty()) {
        throw ArgumentError("encode_grad: empty token sequence");
    }
    const Embedding e = encode_last(params, tokens);
    VectorXd dh = (1.0 - e.array().square()).matrix().cwiseProduct(upstream);
    for (std::size_t t = tokens.size(); t-- > 0;) {
        grad.row(tokens[t]) += (1.0 - params.decay) * dh.transpose();
        dh *= params.decay;
    }
}

MatrixXd encode_grad_last(const EncoderParams& params, std::span<const Token> tokens, const VectorXd& upstream)
{
    MatrixXd grad = MatrixXd::Zero(params.vocab(), params.embed());
    accumulate_encode_grad_last(params, tokens, upstream, grad);
    return grad;
}

} // namespace cpmtp
