// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace cpmtp {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vector<double>;
using MatrixXd = Matrix<double>;

/// Logits are clamped to this magnitude before exponentiation.
inline constexpr double kLogitClamp = 700.0;

template <typename Derived>
typename Derived::Scalar logsumexp(const Eigen::MatrixBase<Derived>& x)
{
    using Scalar = typename Derived::Scalar;
    if (x.size() == 0) {
        return -std::numeric_limits<Scalar>::infinity();
    }
    const Scalar m = x.maxCoeff();
    if (!std::isfinite(m)) {
        return m;
    }
    return m + std::log((x.array() - m).exp().sum());
}

/// log-softmax with inputs clamped to [-kLogitClamp, kLogitClamp].
template <typename Derived>
Vector<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits)
{
    using Scalar = typename Derived::Scalar;
    const Scalar c = static_cast<Scalar>(kLogitClamp);
    Vector<Scalar> z = logits.derived().cwiseMax(-c).cwiseMin(c);
    const Scalar lse = logsumexp(z);
    z.array() -= lse;
    return z;
}

template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits)
{
    return log_softmax(logits).array().exp().matrix();
}

/// Renormalize a vector of (possibly unnormalized) log-weights.
template <typename Derived>
Vector<typename Derived::Scalar> log_normalize(const Eigen::MatrixBase<Derived>& log_weights)
{
    Vector<typename Derived::Scalar> out = log_weights;
    out.array() -= logsumexp(out);
    return out;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x)
{
    return x.allFinite();
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax_lowest(const Eigen::MatrixBase<Derived>& x)
{
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < x.size(); ++i) {
        if (x(i) > x(best)) {
            best = i;
        }
    }
    return best;
}

} // namespace cpmtp
