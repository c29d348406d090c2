// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moda/errors.hpp"
#include "moda/matrix.hpp"
#include "moda/modality.hpp"

namespace moda {

enum class MaskVariant { Inf, Fix, Learn, SpecialToken, Pseudo };

inline std::string mask_variant_name(MaskVariant v) {
    switch (v) {
        case MaskVariant::Inf: return "inf";
        case MaskVariant::Fix: return "fix";
        case MaskVariant::Learn: return "learn";
        case MaskVariant::SpecialToken: return "special_token";
        case MaskVariant::Pseudo: return "pseudo";
    }
    return "?";
}

// Declarative mask description; compiled into logit matrices below.
struct MaskSpec {
    MaskVariant variant = MaskVariant::Inf;
    double beta = 0.1;          // pseudo-score decay per column step
    double p_base = 0.0;        // first pseudo score in each row
    double fixed_value = -10.0; // Fix variant: additive penalty at blocked positions
    std::size_t n = 1;          // sequence length for single-sequence compiles
};

// A compiled attention mask.
//
// Position semantics:
//   - regular position: logits(i,j) is ADDED to the raw score q_i.k_j/tau
//   - pseudo position:  logits(i,j) REPLACES the raw score, and the position
//     reads no value row (it only competes for softmax mass)
// Column semantics:
//   - value_participation[j] == false marks a sink column with no value row
//     behind it (SpecialToken); participating columns map to V rows in order.
struct CompiledMask {
    MaskVariant variant = MaskVariant::Inf;
    Matrix logits;                                   // n_q x n_cols
    std::vector<std::uint8_t> pseudo;                // per position, row-major
    std::vector<std::uint8_t> value_participation;   // per column
    // Trainable positions (Learn variant), in row-major scan order. The
    // stored logits are the initial values; apply_mask_params overwrites them.
    std::vector<std::pair<std::size_t, std::size_t>> param_positions;

    std::size_t query_count() const { return logits.rows(); }
    std::size_t column_count() const { return logits.cols(); }

    bool is_pseudo(std::size_t i, std::size_t j) const {
        return pseudo[i * logits.cols() + j] != 0;
    }

    std::size_t pseudo_count(std::size_t row) const {
        std::size_t c = 0;
        for (std::size_t j = 0; j < logits.cols(); ++j)
            if (is_pseudo(row, j)) ++c;
        return c;
    }

    std::size_t value_column_count() const {
        std::size_t c = 0;
        for (auto v : value_participation) c += (v != 0);
        return c;
    }

    std::size_t param_count() const { return param_positions.size(); }
};

namespace detail {

inline CompiledMask blank_mask(MaskVariant variant, std::size_t n_q, std::size_t n_cols) {
    CompiledMask m;
    m.variant = variant;
    m.logits = Matrix(n_q, n_cols, 0.0);
    m.pseudo.assign(n_q * n_cols, 0);
    m.value_participation.assign(n_cols, 1);
    return m;
}

inline void set_pseudo(CompiledMask& m, std::size_t i, std::size_t j, double logit) {
    m.logits(i, j) = logit;
    m.pseudo[i * m.logits.cols() + j] = 1;
}

// Fill the blocked positions of a mask according to the base spec. `blocked`
// answers whether (query, key) is outside the causal region. Pseudo scores
// run p_base, p_base - beta, p_base - 2*beta, ... left to right over each
// row's blocked positions.
template <typename BlockedFn>
inline CompiledMask compile_region(const MaskSpec& base, std::size_t n_q, std::size_t n_k,
                                   BlockedFn blocked) {
    if (base.beta < 0.0)
        throw InvalidDecay("pseudo decay beta must be >= 0");
    const bool sink = base.variant == MaskVariant::SpecialToken;
    CompiledMask m = blank_mask(base.variant, n_q, n_k + (sink ? 1 : 0));
    for (std::size_t i = 0; i < n_q; ++i) {
        std::size_t pseudo_rank = 0;  // j in p_ij = p_base - (j-1)*beta, 1-based
        for (std::size_t j = 0; j < n_k; ++j) {
            if (!blocked(i, j)) continue;
            switch (base.variant) {
                case MaskVariant::Inf:
                case MaskVariant::SpecialToken:
                    m.logits(i, j) = kNegInf;
                    break;
                case MaskVariant::Fix:
                    m.logits(i, j) = base.fixed_value;
                    break;
                case MaskVariant::Pseudo:
                case MaskVariant::Learn: {
                    const double p = base.p_base - static_cast<double>(pseudo_rank) * base.beta;
                    set_pseudo(m, i, j, p);
                    if (base.variant == MaskVariant::Learn)
                        m.param_positions.emplace_back(i, j);
                    ++pseudo_rank;
                    break;
                }
            }
        }
    }
    if (sink) {
        // Always-visible sink column: logit 0, no value row behind it.
        m.value_participation[n_k] = 0;
        for (std::size_t i = 0; i < n_q; ++i) m.logits(i, n_k) = 0.0;
    }
    return m;
}

}  // namespace detail

namespace detail {

inline void check_mask_length(std::size_t n) {
    if (n < 1)
        throw ShapeMismatch("mask length must be >= 1");
}

}  // namespace detail

// Standard causal mask: -inf strictly above the diagonal.
inline CompiledMask build_causal_inf_mask(std::size_t n) {
    detail::check_mask_length(n);
    MaskSpec spec;
    spec.variant = MaskVariant::Inf;
    return detail::compile_region(spec, n, n, [](std::size_t i, std::size_t j) { return j > i; });
}

// Pseudo-score mask: row i keeps its i+1 real scores and carries n-i-1
// pseudo scores over the blocked tail, decaying by beta per step.
inline CompiledMask build_pseudo_mask(std::size_t n, double beta, double p_base) {
    detail::check_mask_length(n);
    MaskSpec spec;
    spec.variant = MaskVariant::Pseudo;
    spec.beta = beta;
    spec.p_base = p_base;
    return detail::compile_region(spec, n, n, [](std::size_t i, std::size_t j) { return j > i; });
}

// Learnable mask: pseudo layout whose blocked-position logits are trainable,
// initialized exactly like build_pseudo_mask.
inline CompiledMask build_learnable_mask(std::size_t n, std::uint64_t seed, double beta = 0.1,
                                         double p_base = 0.0) {
    detail::check_mask_length(n);
    (void)seed;  // initialization is the deterministic pseudo schedule
    MaskSpec spec;
    spec.variant = MaskVariant::Learn;
    spec.beta = beta;
    spec.p_base = p_base;
    return detail::compile_region(spec, n, n, [](std::size_t i, std::size_t j) { return j > i; });
}

// Causal mask plus one always-visible sink column that absorbs attention
// mass without contributing a value row.
inline CompiledMask build_special_token_mask(std::size_t n) {
    detail::check_mask_length(n);
    MaskSpec spec;
    spec.variant = MaskVariant::SpecialToken;
    return detail::compile_region(spec, n, n, [](std::size_t i, std::size_t j) { return j > i; });
}

// Single-sequence compile of a MaskSpec.
inline CompiledMask compile_mask(const MaskSpec& spec) {
    switch (spec.variant) {
        case MaskVariant::Inf: return build_causal_inf_mask(spec.n);
        case MaskVariant::Fix: {
            MaskSpec s = spec;
            return detail::compile_region(s, spec.n, spec.n,
                                          [](std::size_t i, std::size_t j) { return j > i; });
        }
        case MaskVariant::Pseudo: return build_pseudo_mask(spec.n, spec.beta, spec.p_base);
        case MaskVariant::Learn: return build_learnable_mask(spec.n, 0, spec.beta, spec.p_base);
        case MaskVariant::SpecialToken: return build_special_token_mask(spec.n);
    }
    throw ConfigError("unknown mask variant");
}

// Wrap a raw additive logit matrix (finite or -inf entries) as a compiled
// mask with no pseudo structure.
inline CompiledMask additive_mask(const Matrix& logits) {
    CompiledMask m = detail::blank_mask(MaskVariant::Inf, logits.rows(), logits.cols());
    m.logits = logits;
    return m;
}

struct ModalMasks {
    CompiledMask self;   // N_m x N_m (+ sink)
    CompiledMask cross;  // N_m x N_mbar (+ sink)
};

// Per-modality mask pair for focus m. Self attention is causal within the
// modality block; cross attention may reach any rest token that precedes the
// query in full sequence order. Blocked positions follow the base variant,
// with pseudo scores laid out independently inside each mask.
inline ModalMasks build_modal_masks(const ModalSequence& seq, const ModalityPair& pair,
                                    const MaskSpec& base) {
    const Segment& focus = seq.segment_info(pair.focus);

    // Global positions of the rest tokens, in stacking order.
    std::vector<std::size_t> rest_pos;
    for (const auto& s : seq.segments()) {
        if (s.modality == pair.focus) continue;
        bool in_rest = false;
        for (ModalityId id : pair.rest) in_rest |= (id == s.modality);
        if (!in_rest)
            throw UnknownModality("segment modality " + std::to_string(s.modality) +
                                  " missing from pair");
        for (std::size_t i = 0; i < s.length; ++i) rest_pos.push_back(s.start + i);
    }

    ModalMasks out;
    out.self = detail::compile_region(base, focus.length, focus.length,
                                      [](std::size_t i, std::size_t j) { return j > i; });
    out.cross = detail::compile_region(
        base, focus.length, rest_pos.size(), [&](std::size_t i, std::size_t j) {
            return rest_pos[j] >= focus.start + i;  // only strictly earlier tokens visible
        });
    return out;
}

// Overwrite the trainable positions of a Learn mask with parameter values.
inline void apply_mask_params(CompiledMask& mask, const std::vector<double>& params) {
    if (params.size() != mask.param_positions.size())
        throw ShapeMismatch("mask parameter count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto [i, j] = mask.param_positions[k];
        mask.logits(i, j) = params[k];
    }
}

// Initial parameter vector of a Learn mask (the pseudo schedule).
inline std::vector<double> initial_mask_params(const CompiledMask& mask) {
    std::vector<double> out;
    out.reserve(mask.param_positions.size());
    for (const auto& [i, j] : mask.param_positions) out.push_back(mask.logits(i, j));
    return out;
}

}  // namespace moda
