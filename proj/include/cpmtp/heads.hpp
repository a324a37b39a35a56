// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/errors.hpp>
#include <cpmtp/log_space.hpp>
#include <cpmtp/rng.hpp>

#include <cmath>
#include <memory>
#include <vector>

namespace cpmtp {

struct HeadDims {
    int horizon = 1; ///< n
    int rank = 1;    ///< r
    int vocab = 1;   ///< V
    int embed = 1;   ///< E

    friend bool operator==(const HeadDims&, const HeadDims&) = default;
};

inline void validate(const HeadDims& d)
{
    if (d.horizon < 1 || d.rank < 1 || d.vocab < 1 || d.embed < 1) {
        throw StructuralError("head dimensions must all be >= 1");
    }
}

/// Gate logits plus one V x r factor-logit matrix per position.
template <typename Scalar>
struct HeadLogits {
    Vector<Scalar> gate;
    std::vector<Matrix<Scalar>> factors;
};

/// One V x E matrix per (position, expert), plus the r x E gate.
template <typename Scalar>
struct FullHeadParams {
    HeadDims dims;
    std::vector<Matrix<Scalar>> factor_weights; ///< index s * rank + a
    Matrix<Scalar> gate_weights;

    Matrix<Scalar>& factor(int s, int a) { return factor_weights[static_cast<std::size_t>(s * dims.rank + a)]; }
    const Matrix<Scalar>& factor(int s, int a) const
    {
        return factor_weights[static_cast<std::size_t>(s * dims.rank + a)];
    }

    void check() const
    {
        validate(dims);
        if (factor_weights.size() != static_cast<std::size_t>(dims.horizon * dims.rank)) {
            throw StructuralError("FullHeadParams: need horizon * rank factor matrices");
        }
        for (const auto& w : factor_weights) {
            if (w.rows() != dims.vocab || w.cols() != dims.embed) {
                throw StructuralError("FullHeadParams: factor matrix must be V x E");
            }
            if (!w.allFinite()) {
                throw NumericError("FullHeadParams: non-finite factor weight");
            }
        }
        if (gate_weights.rows() != dims.rank || gate_weights.cols() != dims.embed) {
            throw StructuralError("FullHeadParams: gate must be r x E");
        }
        if (!gate_weights.allFinite()) {
            throw NumericError("FullHeadParams: non-finite gate weight");
        }
    }

    static FullHeadParams zeros(const HeadDims& d)
    {
        validate(d);
        FullHeadParams p;
        p.dims = d;
        p.factor_weights.assign(static_cast<std::size_t>(d.horizon * d.rank), Matrix<Scalar>::Zero(d.vocab, d.embed));
        p.gate_weights = Matrix<Scalar>::Zero(d.rank, d.embed);
        return p;
    }

    /// Entries ~ U(-1/sqrt(E), 1/sqrt(E)).
    static FullHeadParams random(const HeadDims& d, CounterRng& rng)
    {
        FullHeadParams p = zeros(d);
        const double bound = 1.0 / std::sqrt(static_cast<double>(d.embed));
        for (auto& w : p.factor_weights) {
            w = uniform_matrix<Scalar>(d.vocab, d.embed, bound, rng);
        }
        p.gate_weights = uniform_matrix<Scalar>(d.rank, d.embed, bound, rng);
        return p;
    }
};

/**
 * Fine-tuning head: every factor matrix is W * A(s, a) with a frozen,
 * shared V x E output matrix W and small trainable E x E adapters.
 */
template <typename Scalar>
struct ReducedHeadParams {
    HeadDims dims;
    std::shared_ptr<const Matrix<Scalar>> shared_head; ///< frozen W
    std::vector<Matrix<Scalar>> adapters;              ///< index s * rank + a
    Matrix<Scalar> gate_weights;

    Matrix<Scalar>& adapter(int s, int a) { return adapters[static_cast<std::size_t>(s * dims.rank + a)]; }
    const Matrix<Scalar>& adapter(int s, int a) const { return adapters[static_cast<std::size_t>(s * dims.rank + a)]; }

    void check() const
    {
        validate(dims);
        if (!shared_head || shared_head->rows() != dims.vocab || shared_head->cols() != dims.embed) {
            throw StructuralError("ReducedHeadParams: shared head must be V x E");
        }
        if (adapters.size() != static_cast<std::size_t>(dims.horizon * dims.rank)) {
            throw StructuralError("ReducedHeadParams: need horizon * rank adapters");
        }
        for (const auto& a : adapters) {
            if (a.rows() != dims.embed || a.cols() != dims.embed) {
                throw StructuralError("ReducedHeadParams: adapter must be E x E");
            }
            if (!a.allFinite()) {
                throw NumericError("ReducedHeadParams: non-finite adapter weight");
            }
        }
        if (gate_weights.rows() != dims.rank || gate_weights.cols() != dims.embed) {
            throw StructuralError("ReducedHeadParams: gate must be r x E");
        }
    }

    /// Identity adapters (plus optional U(-noise, noise) perturbation) and a
    /// U(-1/sqrt(E), 1/sqrt(E)) gate. With noise = 0 every factor starts out
    /// exactly at the shared head.
    static ReducedHeadParams warm_start(const HeadDims& d, std::shared_ptr<const Matrix<Scalar>> shared,
                                        CounterRng& rng, double noise = 0.0)
    {
        validate(d);
        ReducedHeadParams p;
        p.dims = d;
        p.shared_head = std::move(shared);
        p.adapters.reserve(static_cast<std::size_t>(d.horizon * d.rank));
        for (int i = 0; i < d.horizon * d.rank; ++i) {
            Matrix<Scalar> a = Matrix<Scalar>::Identity(d.embed, d.embed);
            if (noise > 0.0) {
                a += uniform_matrix<Scalar>(d.embed, d.embed, noise, rng);
            }
            p.adapters.push_back(std::move(a));
        }
        p.gate_weights = uniform_matrix<Scalar>(d.rank, d.embed, 1.0 / std::sqrt(static_cast<double>(d.embed)), rng);
        p.check();
        return p;
    }

    static ReducedHeadParams random(const HeadDims& d, std::shared_ptr<const Matrix<Scalar>> shared, CounterRng& rng)
    {
        validate(d);
        ReducedHeadParams p;
        p.dims = d;
        p.shared_head = std::move(shared);
        const double bound = 1.0 / std::sqrt(static_cast<double>(d.embed));
        for (int i = 0; i < d.horizon * d.rank; ++i) {
            p.adapters.push_back(uniform_matrix<Scalar>(d.embed, d.embed, bound, rng));
        }
        p.gate_weights = uniform_matrix<Scalar>(d.rank, d.embed, bound, rng);
        p.check();
        return p;
    }
};

using FullHeadParamsd = FullHeadParams<double>;
using ReducedHeadParamsd = ReducedHeadParams<double>;

namespace detail {

template <typename Scalar>
void check_embedding(const Vector<Scalar>& e, int embed)
{
    if (e.size() != embed) {
        throw StructuralError("embedding length " + std::to_string(e.size()) + " != E = " + std::to_string(embed));
    }
}

} // namespace detail

template <typename Scalar>
HeadLogits<Scalar> head_logits(const FullHeadParams<Scalar>& params, const Vector<Scalar>& e)
{
    detail::check_embedding(e, params.dims.embed);
    const auto& d = params.dims;
    HeadLogits<Scalar> out;
    out.gate = params.gate_weights * e;
    out.factors.assign(static_cast<std::size_t>(d.horizon), Matrix<Scalar>(d.vocab, d.rank));
    for (int s = 0; s < d.horizon; ++s) {
        for (int a = 0; a < d.rank; ++a) {
            out.factors[s].col(a).noalias() = params.factor(s, a) * e;
        }
    }
    return out;
}

/// Reduced head logits. The adapter product A e (length E) is formed first
/// and then mapped through W; the V x E product W A is never built.
template <typename Scalar>
HeadLogits<Scalar> head_logits(const ReducedHeadParams<Scalar>& params, const Vector<Scalar>& e)
{
    detail::check_embedding(e, params.dims.embed);
    const auto& d = params.dims;
    HeadLogits<Scalar> out;
    out.gate = params.gate_weights * e;
    out.factors.assign(static_cast<std::size_t>(d.horizon), Matrix<Scalar>(d.vocab, d.rank));
    Vector<Scalar> u(d.embed);
    for (int s = 0; s < d.horizon; ++s) {
        for (int a = 0; a < d.rank; ++a) {
            u.noalias() = params.adapter(s, a) * e;
            out.factors[s].col(a).noalias() = (*params.shared_head) * u;
        }
    }
    return out;
}

template <typename Scalar>
CPJointDist<Scalar> to_distribution(const HeadLogits<Scalar>& logits)
{
    return from_logits(logits.gate, std::span<const Matrix<Scalar>>(logits.factors));
}

template <typename Scalar>
CPJointDist<Scalar> forward_full(const FullHeadParams<Scalar>& params, const Vector<Scalar>& e)
{
    return to_distribution(head_logits(params, e));
}

template <typename Scalar>
CPJointDist<Scalar> forward_reduced(const ReducedHeadParams<Scalar>& params, const Vector<Scalar>& e)
{
    return to_distribution(head_logits(params, e));
}

/// Explicitly composes W * A(s, a) into full-head matrices.
template <typename Scalar>
FullHeadParams<Scalar> compose(const ReducedHeadParams<Scalar>& params)
{
    params.check();
    FullHeadParams<Scalar> out = FullHeadParams<Scalar>::zeros(params.dims);
    for (int s = 0; s < params.dims.horizon; ++s) {
        for (int a = 0; a < params.dims.rank; ++a) {
            out.factor(s, a) = (*params.shared_head) * params.adapter(s, a);
        }
    }
    out.gate_weights = params.gate_weights;
    return out;
}

} // namespace cpmtp
