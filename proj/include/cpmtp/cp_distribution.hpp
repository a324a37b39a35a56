// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/errors.hpp>
#include <cpmtp/log_space.hpp>

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cpmtp {

using Token = int;

/// A normalized distribution over the vocabulary, stored as log-probabilities.
template <typename Scalar>
struct LogDistribution {
    Vector<Scalar> log_probs;

    Eigen::Index size() const { return log_probs.size(); }
    Vector<Scalar> probs() const { return log_probs.array().exp().matrix(); }
};

/// Dense probability tensor over the unconsumed positions of a CPJointDist.
/// Entry order is row-major with the earliest position most significant.
template <typename Scalar>
struct ProbTensor {
    std::vector<int> positions;
    int vocab = 0;
    Vector<Scalar> values;

    std::size_t flat_index(std::span<const Token> tokens) const
    {
        std::size_t idx = 0;
        for (Token t : tokens) {
            idx = idx * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(t);
        }
        return idx;
    }

    Scalar operator()(std::span<const Token> tokens) const
    {
        return values(static_cast<Eigen::Index>(flat_index(tokens)));
    }
};

inline constexpr std::size_t kDefaultMaterializeLimit = 1'000'000;

/**
 * Rank-r canonical polyadic (CP) joint distribution over the next n tokens.
 *
 * The joint is a mixture of r rank-1 terms,
 *
 *     P(x_1..x_n) = sum_a w_a prod_s P^(s)(x_s | a),
 *
 * held entirely in log space. `log_factors()[s]` is a V x r matrix whose
 * column a is log P^(s)(. | a). Positions that have been observed through
 * condition_on() are marked consumed; their factors stay in place so that
 * indices keep lining up with head outputs, and the observation is folded
 * into the mixture weights instead.
 */
template <typename Scalar>
class CPJointDist {
public:
    using VectorType = Vector<Scalar>;
    using MatrixType = Matrix<Scalar>;

    CPJointDist() = default;

    /// Validates shapes and normalization of already log-normalized parameters.
    CPJointDist(VectorType log_weights, std::vector<MatrixType> log_factors,
                std::vector<bool> consumed = {}, Scalar tolerance = Scalar(1e-9))
        : CPJointDist(std::move(log_weights),
                      std::make_shared<const std::vector<MatrixType>>(std::move(log_factors)),
                      std::move(consumed), tolerance)
    {
    }

    /// Shares an existing factor array (conditioning never copies factors).
    CPJointDist(VectorType log_weights, std::shared_ptr<const std::vector<MatrixType>> log_factors,
                std::vector<bool> consumed, Scalar tolerance, bool validate_factors = true)
        : log_weights_(std::move(log_weights)), factors_(std::move(log_factors)),
          consumed_(std::move(consumed))
    {
        if (!factors_ || factors_->empty()) {
            throw StructuralError("CPJointDist: horizon must be >= 1");
        }
        if (log_weights_.size() < 1) {
            throw StructuralError("CPJointDist: rank must be >= 1");
        }
        if (consumed_.empty()) {
            consumed_.assign(factors_->size(), false);
        }
        if (consumed_.size() != factors_->size()) {
            throw StructuralError("CPJointDist: consumed mask length != horizon");
        }
        const Eigen::Index v = factors_->front().rows();
        if (v < 1) {
            throw StructuralError("CPJointDist: vocabulary must be >= 1");
        }
        for (const auto& f : *factors_) {
            if (f.rows() != v || f.cols() != log_weights_.size()) {
                throw StructuralError("CPJointDist: factor matrix must be V x r for every position");
            }
            for (Eigen::Index a = 0; validate_factors && a < f.cols(); ++a) {
                if (std::abs(logsumexp(f.col(a))) > tolerance) {
                    throw NumericError("CPJointDist: factor column is not normalized");
                }
            }
        }
        if (std::abs(logsumexp(log_weights_)) > tolerance) {
            throw NumericError("CPJointDist: mixture weights are not normalized");
        }
    }

    int horizon() const { return static_cast<int>(factors_->size()); }
    int vocab() const { return static_cast<int>(factors_->front().rows()); }
    int rank() const { return static_cast<int>(log_weights_.size()); }

    const VectorType& log_weights() const { return log_weights_; }
    const std::vector<MatrixType>& log_factors() const { return *factors_; }
    const MatrixType& log_factor(int position) const { return factors_->at(position); }
    const std::shared_ptr<const std::vector<MatrixType>>& shared_factors() const { return factors_; }

    bool consumed(int position) const { return consumed_.at(position); }
    const std::vector<bool>& consumed_mask() const { return consumed_; }

    /// First position not yet conditioned on, or horizon() if all are.
    int next_free_position() const
    {
        for (int s = 0; s < horizon(); ++s) {
            if (!consumed_[s]) {
                return s;
            }
        }
        return horizon();
    }

    std::vector<int> free_positions() const
    {
        std::vector<int> out;
        for (int s = 0; s < horizon(); ++s) {
            if (!consumed_[s]) {
                out.push_back(s);
            }
        }
        return out;
    }

private:
    VectorType log_weights_;
    std::shared_ptr<const std::vector<MatrixType>> factors_;
    std::vector<bool> consumed_;
};

using CPJointDistd = CPJointDist<double>;
using LogDistributiond = LogDistribution<double>;

namespace detail {

inline void check_token(Token token, int vocab)
{
    if (token < 0 || token >= vocab) {
        throw IndexError("token " + std::to_string(token) + " outside [0, " + std::to_string(vocab) + ")");
    }
}

template <typename Scalar>
void check_position(const CPJointDist<Scalar>& dist, int position)
{
    if (position < 0 || position >= dist.horizon()) {
        throw IndexError("position " + std::to_string(position) + " outside [0, " +
                         std::to_string(dist.horizon()) + ")");
    }
}

} // namespace detail

/// Builds a CP distribution from unnormalized gate logits (length r) and one
/// V x r logit matrix per position.
template <typename Scalar>
CPJointDist<Scalar> from_logits(const Vector<Scalar>& weight_logits,
                                std::span<const Matrix<Scalar>> factor_logits)
{
    const Eigen::Index r = weight_logits.size();
    if (r < 1 || factor_logits.empty()) {
        throw StructuralError("from_logits: need rank >= 1 and horizon >= 1");
    }
    const Eigen::Index v = factor_logits.front().rows();
    if (!weight_logits.allFinite()) {
        throw NumericError("from_logits: non-finite weight logit");
    }
    std::vector<Matrix<Scalar>> log_factors;
    log_factors.reserve(factor_logits.size());
    for (const auto& z : factor_logits) {
        if (z.rows() != v || z.cols() != r || v < 1) {
            throw StructuralError("from_logits: factor logits must be V x r at every position");
        }
        if (!z.allFinite()) {
            throw NumericError("from_logits: non-finite factor logit");
        }
        Matrix<Scalar> lf(v, r);
        for (Eigen::Index a = 0; a < r; ++a) {
            lf.col(a) = log_softmax(z.col(a));
        }
        log_factors.push_back(std::move(lf));
    }
    return CPJointDist<Scalar>(log_softmax(weight_logits), std::move(log_factors));
}

template <typename Scalar>
CPJointDist<Scalar> from_logits(const Vector<Scalar>& weight_logits,
                                const std::vector<Matrix<Scalar>>& factor_logits)
{
    return from_logits(weight_logits, std::span<const Matrix<Scalar>>(factor_logits));
}

template <typename Derived>
CPJointDist<typename Derived::Scalar> from_logits(const Eigen::MatrixBase<Derived>& weight_logits,
                                                  const std::vector<Matrix<typename Derived::Scalar>>& factor_logits)
{
    using Scalar = typename Derived::Scalar;
    return from_logits(Vector<Scalar>(weight_logits), std::span<const Matrix<Scalar>>(factor_logits));
}

/// Per-expert terms log w_a + sum_s log P^(s)(tokens[s] | a) over the free
/// positions. Consumed positions are skipped: their evidence already lives
/// in the weights.
template <typename Scalar>
Vector<Scalar> expert_log_terms(const CPJointDist<Scalar>& dist, std::span<const Token> tokens)
{
    if (static_cast<int>(tokens.size()) != dist.horizon()) {
        throw StructuralError("expert_log_terms: need one token per position");
    }
    Vector<Scalar> terms = dist.log_weights();
    for (int s = 0; s < dist.horizon(); ++s) {
        detail::check_token(tokens[s], dist.vocab());
        if (dist.consumed(s)) {
            continue;
        }
        terms += dist.log_factor(s).row(tokens[s]).transpose();
    }
    return terms;
}

/// Log-probability of `tokens` (one per position). For a conditioned
/// distribution this is the conditional log-probability of the free
/// positions; entries at consumed positions are ignored.
template <typename Scalar>
Scalar log_prob(const CPJointDist<Scalar>& dist, std::span<const Token> tokens)
{
    return logsumexp(expert_log_terms(dist, tokens));
}

template <typename Scalar>
Scalar log_prob(const CPJointDist<Scalar>& dist, const std::vector<Token>& tokens)
{
    return log_prob(dist, std::span<const Token>(tokens));
}

/// Brute-force dense tensor over the free positions. Meant for oracles and
/// tests; throws CapacityError when V^k exceeds `limit`.
template <typename Scalar>
ProbTensor<Scalar> materialize(const CPJointDist<Scalar>& dist,
                               std::size_t limit = kDefaultMaterializeLimit)
{
    ProbTensor<Scalar> out;
    out.positions = dist.free_positions();
    out.vocab = dist.vocab();
    std::size_t size = 1;
    for (std::size_t i = 0; i < out.positions.size(); ++i) {
        size *= static_cast<std::size_t>(dist.vocab());
        if (size > limit) {
            throw CapacityError("materialize: tensor size exceeds limit " + std::to_string(limit));
        }
    }
    const Vector<Scalar> weights = dist.log_weights().array().exp().matrix();
    std::vector<Matrix<Scalar>> factors;
    for (int s : out.positions) {
        factors.push_back(dist.log_factor(s).array().exp().matrix());
    }
    out.values.setZero(static_cast<Eigen::Index>(size));
    // Accumulate one rank-1 term at a time; the running per-expert product
    // over a mixed-radix counter.
    const std::size_t k = out.positions.size();
    for (int a = 0; a < dist.rank(); ++a) {
        std::vector<int> digits(k, 0);
        for (std::size_t flat = 0; flat < size; ++flat) {
            Scalar p = weights(a);
            for (std::size_t j = 0; j < k; ++j) {
                p *= factors[j](digits[j], a);
            }
            out.values(static_cast<Eigen::Index>(flat)) += p;
            for (std::size_t j = k; j-- > 0;) {
                if (++digits[j] < dist.vocab()) {
                    break;
                }
                digits[j] = 0;
            }
        }
    }
    return out;
}

/// Marginal of a free position under the current (possibly conditioned) mixture.
template <typename Scalar>
LogDistribution<Scalar> marginal(const CPJointDist<Scalar>& dist, int position)
{
    detail::check_position(dist, position);
    if (dist.consumed(position)) {
        throw StateError("marginal: position " + std::to_string(position) + " already conditioned on");
    }
    const Matrix<Scalar>& lf = dist.log_factor(position);
    LogDistribution<Scalar> out;
    out.log_probs.resize(lf.rows());
    Vector<Scalar> buf(dist.rank());
    for (Eigen::Index v = 0; v < lf.rows(); ++v) {
        buf = dist.log_weights() + lf.row(v).transpose();
        out.log_probs(v) = logsumexp(buf);
    }
    return out;
}

/// Marginal of the next unobserved token: sum_a w_a P^(s)(. | a) for the
/// first free position s.
template <typename Scalar>
LogDistribution<Scalar> first_token_marginal(const CPJointDist<Scalar>& dist)
{
    const int s = dist.next_free_position();
    if (s == dist.horizon()) {
        throw StateError("first_token_marginal: every position is already conditioned on");
    }
    return marginal(dist, s);
}

/// Observes `token` at `position`: folds log P^(s)(token | a) into the
/// expert weights and renormalizes. Factors are left untouched.
template <typename Scalar>
CPJointDist<Scalar> condition_on(const CPJointDist<Scalar>& dist, int position, Token token)
{
    detail::check_position(dist, position);
    detail::check_token(token, dist.vocab());
    if (dist.consumed(position)) {
        throw StateError("condition_on: position " + std::to_string(position) + " already conditioned on");
    }
    Vector<Scalar> lw = dist.log_weights() + dist.log_factor(position).row(token).transpose();
    if (!std::isfinite(logsumexp(lw))) {
        throw NumericError("condition_on: observation has zero probability");
    }
    std::vector<bool> consumed = dist.consumed_mask();
    consumed[position] = true;
    return CPJointDist<Scalar>(log_normalize(lw), dist.shared_factors(), std::move(consumed),
                               Scalar(1e-9), /*validate_factors=*/false);
}

} // namespace cpmtp
