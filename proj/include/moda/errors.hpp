// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moda {

// One exception type per failure mode so tests and the CLI can tell them
// apart without string matching.

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct AllMaskedRow : std::runtime_error {
    explicit AllMaskedRow(const std::string& what) : std::runtime_error(what) {}
};

struct NonFiniteEntry : std::runtime_error {
    explicit NonFiniteEntry(const std::string& what) : std::runtime_error(what) {}
};

struct UnknownModality : std::runtime_error {
    explicit UnknownModality(const std::string& what) : std::runtime_error(what) {}
};

struct DimMismatch : std::runtime_error {
    explicit DimMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct DuplicateModality : std::runtime_error {
    explicit DuplicateModality(const std::string& what) : std::runtime_error(what) {}
};

struct DegenerateGram : std::runtime_error {
    explicit DegenerateGram(const std::string& what) : std::runtime_error(what) {}
};

struct RankExceedsDim : std::runtime_error {
    explicit RankExceedsDim(const std::string& what) : std::runtime_error(what) {}
};

struct InvalidDecay : std::runtime_error {
    explicit InvalidDecay(const std::string& what) : std::runtime_error(what) {}
};

struct BothZero : std::runtime_error {
    explicit BothZero(const std::string& what) : std::runtime_error(what) {}
};

struct NonPositiveSeries : std::runtime_error {
    explicit NonPositiveSeries(const std::string& what) : std::runtime_error(what) {}
};

struct IoFailure : std::runtime_error {
    explicit IoFailure(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DivergedLoss : std::runtime_error {
    explicit DivergedLoss(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace moda
