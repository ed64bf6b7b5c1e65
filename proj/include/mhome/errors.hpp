// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mhome {

/// Operand shapes are incompatible with the operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller violated an API precondition (non-scalar loss, double backward, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Reduction over an axis of length zero.
class EmptyReductionError : public ContractError {
public:
    using ContractError::ContractError;
};

/// NaN/Inf produced from finite inputs, or a NaN loss during training.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Softmax slice whose entries are all -inf.
class DegenerateSliceError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Invalid configuration (schedules, extents, unknown keys).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Metric undefined for the given inputs (empty structure, zero denominator).
class MetricError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Missing, truncated or inconsistent files (checkpoints, volumes).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace mhome
