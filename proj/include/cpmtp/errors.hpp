// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cpmtp {

/// Shapes or dimensions that do not agree.
class StructuralError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN / infinite values where finite ones are required.
class NumericError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Token id or position outside its valid range.
class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Requested object would exceed a configured size limit.
class CapacityError : public std::length_error {
public:
    using std::length_error::length_error;
};

/// Operation is invalid for the current state of the object.
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Bad argument value (range, empty input, inconsistent options).
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File contents that cannot be parsed.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace cpmtp
