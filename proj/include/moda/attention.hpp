// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moda/errors.hpp"
#include "moda/masks.hpp"
#include "moda/matrix.hpp"
#include "moda/modality.hpp"

namespace moda {

struct AttentionConfig {
    double tau = 1.0;          // score temperature
    std::size_t head_dim = 1;  // d

    static AttentionConfig scaled(std::size_t d) {
        AttentionConfig cfg;
        cfg.head_dim = d;
        cfg.tau = std::sqrt(static_cast<double>(d));
        return cfg;
    }
};

struct ProjectionSet {
    Matrix wq, wk, wv;  // d x d each
};

struct Projected {
    Matrix q, k, v;
};

inline Projected project(const Matrix& tokens, const ProjectionSet& proj) {
    if (tokens.cols() != proj.wq.rows())
        throw ShapeMismatch("project: tokens " + shape_str(tokens) + " vs wq " +
                            shape_str(proj.wq));
    return {matmul(tokens, proj.wq), matmul(tokens, proj.wk), matmul(tokens, proj.wv)};
}

// ---------------------------------------------------------------------------
// Attention engine over a CompiledMask.
//
// Score assembly for query i, mask column j:
//   sink column        -> logits(i,j)                 (no key behind it)
//   pseudo position    -> logits(i,j)                 (replaces the raw score)
//   regular position   -> q_i . k_j / tau + logits(i,j)
// The softmax runs over all columns; pseudo and sink positions absorb mass
// but read no value row, so O = A_value . V with their weights zeroed.
// ---------------------------------------------------------------------------

struct AttnResult {
    Matrix scores;    // assembled S, n_q x n_cols (-inf allowed)
    Matrix weights;   // softmax rows over all columns; dead rows all 0
    Matrix output;    // n_q x d
    std::vector<std::uint8_t> live_rows;
};

struct AttnGrads {
    Matrix dq, dk, dv;
    Matrix dscores;  // dL/dS over all mask columns; additive-mask and
                     // learnable-pseudo gradients are read off this
};

namespace detail {

// Map mask columns to key/value rows: participating columns in order.
inline std::vector<std::ptrdiff_t> key_of_column(const CompiledMask& mask) {
    std::vector<std::ptrdiff_t> idx(mask.column_count(), -1);
    std::ptrdiff_t next = 0;
    for (std::size_t j = 0; j < mask.column_count(); ++j)
        if (mask.value_participation[j]) idx[j] = next++;
    return idx;
}

}  // namespace detail

// `lenient` controls rows whose every score is -inf: they yield all-zero
// weight and output rows instead of an error (needed by causal cross-modal
// masks where early queries have no visible keys).
inline AttnResult compiled_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                     const CompiledMask& mask, const AttentionConfig& cfg,
                                     bool lenient = false) {
    if (!(cfg.tau > 0.0)) throw std::invalid_argument("attention: tau must be > 0");
    if (q.cols() != k.cols())
        throw ShapeMismatch("attention: q " + shape_str(q) + " vs k " + shape_str(k));
    if (k.rows() != v.rows())
        throw ShapeMismatch("attention: k " + shape_str(k) + " vs v " + shape_str(v));
    if (mask.query_count() != q.rows() || mask.value_column_count() != k.rows())
        throw ShapeMismatch("attention: mask " + shape_str(mask.logits) + " vs q " +
                            shape_str(q) + ", k " + shape_str(k));

    const std::size_t n_q = q.rows();
    const std::size_t n_cols = mask.column_count();
    const auto key_idx = detail::key_of_column(mask);

    AttnResult res;
    res.scores = Matrix(n_q, n_cols);
    res.weights = Matrix(n_q, n_cols);
    res.output = Matrix(n_q, v.cols());
    res.live_rows.assign(n_q, 1);

    for (std::size_t i = 0; i < n_q; ++i) {
        double mx = kNegInf;
        for (std::size_t j = 0; j < n_cols; ++j) {
            double s;
            if (key_idx[j] < 0 || mask.is_pseudo(i, j)) {
                s = mask.logits(i, j);
            } else {
                double raw = 0.0;
                const std::size_t kr = static_cast<std::size_t>(key_idx[j]);
                for (std::size_t t = 0; t < q.cols(); ++t) raw += q(i, t) * k(kr, t);
                s = raw / cfg.tau + mask.logits(i, j);
            }
            res.scores(i, j) = s;
            mx = std::max(mx, s);
        }
        if (mx == kNegInf) {
            if (!lenient)
                throw AllMaskedRow("attention: row " + std::to_string(i) + " fully masked");
            res.live_rows[i] = 0;
            continue;  // weights and output stay zero
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < n_cols; ++j) {
            const double s = res.scores(i, j);
            const double e = (s == kNegInf) ? 0.0 : std::exp(s - mx);
            res.weights(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n_cols; ++j) {
            res.weights(i, j) /= sum;
            if (key_idx[j] >= 0 && !mask.is_pseudo(i, j)) {
                const std::size_t kr = static_cast<std::size_t>(key_idx[j]);
                const double w = res.weights(i, j);
                if (w != 0.0)
                    for (std::size_t t = 0; t < v.cols(); ++t)
                        res.output(i, t) += w * v(kr, t);
            }
        }
    }
    return res;
}

inline AttnGrads compiled_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                             const CompiledMask& mask, const AttentionConfig& cfg,
                                             const AttnResult& res, const Matrix& d_output) {
    const std::size_t n_q = q.rows();
    const std::size_t n_cols = mask.column_count();
    const auto key_idx = detail::key_of_column(mask);

    AttnGrads g;
    g.dq = Matrix(q.rows(), q.cols());
    g.dk = Matrix(k.rows(), k.cols());
    g.dv = Matrix(v.rows(), v.cols());
    g.dscores = Matrix(n_q, n_cols);

    for (std::size_t i = 0; i < n_q; ++i) {
        if (!res.live_rows[i]) continue;

        // dL/dA: value path exists only at regular positions.
        std::vector<double> da(n_cols, 0.0);
        for (std::size_t j = 0; j < n_cols; ++j) {
            if (key_idx[j] < 0 || mask.is_pseudo(i, j)) continue;
            const std::size_t kr = static_cast<std::size_t>(key_idx[j]);
            double acc = 0.0;
            for (std::size_t t = 0; t < v.cols(); ++t) acc += d_output(i, t) * v(kr, t);
            da[j] = acc;
            // dV accumulates the weight-scaled upstream gradient.
            const double w = res.weights(i, j);
            if (w != 0.0)
                for (std::size_t t = 0; t < v.cols(); ++t)
                    g.dv(kr, t) += w * d_output(i, t);
        }

        // Softmax backward: dS = A * (dA - <A, dA>).
        double rho = 0.0;
        for (std::size_t j = 0; j < n_cols; ++j) rho += res.weights(i, j) * da[j];
        for (std::size_t j = 0; j < n_cols; ++j) {
            const double ds = res.weights(i, j) * (da[j] - rho);
            g.dscores(i, j) = ds;
            if (key_idx[j] < 0 || mask.is_pseudo(i, j) || ds == 0.0) continue;
            const std::size_t kr = static_cast<std::size_t>(key_idx[j]);
            const double c = ds / cfg.tau;
            for (std::size_t t = 0; t < q.cols(); ++t) {
                g.dq(i, t) += c * k(kr, t);
                g.dk(kr, t) += c * q(i, t);
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Public masked attention over a raw additive logit matrix.
// ---------------------------------------------------------------------------

inline AttnResult masked_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                   const Matrix& mask, const AttentionConfig& cfg) {
    if (mask.rows() != q.rows() || mask.cols() != k.rows())
        throw ShapeMismatch("masked_attention: mask " + shape_str(mask) + " vs q " +
                            shape_str(q) + ", k " + shape_str(k));
    return compiled_attention(q, k, v, additive_mask(mask), cfg, /*lenient=*/false);
}

// Gradients of <d_output, O> with respect to q, k, v and the finite mask
// entries (dscores doubles as dmask for additive masks).
inline AttnGrads masked_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                           const Matrix& mask, const AttentionConfig& cfg,
                                           const Matrix& d_output) {
    const CompiledMask cm = additive_mask(mask);
    const AttnResult res = compiled_attention(q, k, v, cm, cfg, false);
    return compiled_attention_backward(q, k, v, cm, cfg, res, d_output);
}

// ---------------------------------------------------------------------------
// Self-/cross-modal split attention: queries of the focus modality attend its
// own block and the rest blocks through two independent softmaxes.
// ---------------------------------------------------------------------------

struct SplitAttnResult {
    Matrix o_self, o_cross;
    Matrix a_self, a_cross;  // weight matrices for diagnostics capture
};

inline SplitAttnResult split_modal_attention(const ModalSequence& seq, const ProjectionSet& proj,
                                             const ModalityPair& pair, const Matrix& mask_self,
                                             const Matrix& mask_cross,
                                             const AttentionConfig& cfg) {
    const Segment& focus = seq.segment_info(pair.focus);
    const Projected p = project(seq.tokens(), proj);

    const Matrix q_m = p.q.slice_rows(focus.start, focus.length);
    const Matrix k_m = p.k.slice_rows(focus.start, focus.length);
    const Matrix v_m = p.v.slice_rows(focus.start, focus.length);

    SplitAttnResult out;
    {
        const AttnResult self = masked_attention(q_m, k_m, v_m, mask_self, cfg);
        out.o_self = self.output;
        out.a_self = self.weights;
    }

    // Stack rest-modality keys/values in sequence order.
    std::size_t n_rest = 0;
    for (const auto& s : seq.segments())
        if (s.modality != pair.focus) n_rest += s.length;
    if (n_rest == 0) {
        out.o_cross = Matrix(focus.length, 0);
        out.a_cross = Matrix(focus.length, 0);
        return out;
    }
    Matrix k_r(n_rest, seq.width()), v_r(n_rest, seq.width());
    std::size_t r = 0;
    for (const auto& s : seq.segments()) {
        if (s.modality == pair.focus) continue;
        for (std::size_t i = 0; i < s.length; ++i, ++r)
            for (std::size_t j = 0; j < seq.width(); ++j) {
                k_r(r, j) = p.k(s.start + i, j);
                v_r(r, j) = p.v(s.start + i, j);
            }
    }
    const AttnResult cross = masked_attention(q_m, k_r, v_r, mask_cross, cfg);
    out.o_cross = cross.output;
    out.a_cross = cross.weights;
    return out;
}

struct SplitAttnGrads {
    Matrix dtokens;
    Matrix dwq, dwk, dwv;
    Matrix dmask_self, dmask_cross;
};

inline SplitAttnGrads split_modal_attention_backward(
    const ModalSequence& seq, const ProjectionSet& proj, const ModalityPair& pair,
    const Matrix& mask_self, const Matrix& mask_cross, const AttentionConfig& cfg,
    const Matrix& d_o_self, const Matrix& d_o_cross) {
    const Segment& focus = seq.segment_info(pair.focus);
    const Matrix& x = seq.tokens();
    const Projected p = project(x, proj);

    const Matrix q_m = p.q.slice_rows(focus.start, focus.length);
    const Matrix k_m = p.k.slice_rows(focus.start, focus.length);
    const Matrix v_m = p.v.slice_rows(focus.start, focus.length);

    Matrix dq_full(x.rows(), x.cols());
    Matrix dk_full(x.rows(), x.cols());
    Matrix dv_full(x.rows(), x.cols());

    SplitAttnGrads g;
    {
        const AttnGrads gs =
            masked_attention_backward(q_m, k_m, v_m, mask_self, cfg, d_o_self);
        g.dmask_self = gs.dscores;
        for (std::size_t i = 0; i < focus.length; ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) {
                dq_full(focus.start + i, j) += gs.dq(i, j);
                dk_full(focus.start + i, j) += gs.dk(i, j);
                dv_full(focus.start + i, j) += gs.dv(i, j);
            }
    }

    std::size_t n_rest = 0;
    for (const auto& s : seq.segments())
        if (s.modality != pair.focus) n_rest += s.length;
    if (n_rest > 0) {
        Matrix k_r(n_rest, x.cols()), v_r(n_rest, x.cols());
        std::vector<std::size_t> rest_rows;
        rest_rows.reserve(n_rest);
        for (const auto& s : seq.segments()) {
            if (s.modality == pair.focus) continue;
            for (std::size_t i = 0; i < s.length; ++i) rest_rows.push_back(s.start + i);
        }
        for (std::size_t i = 0; i < n_rest; ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) {
                k_r(i, j) = p.k(rest_rows[i], j);
                v_r(i, j) = p.v(rest_rows[i], j);
            }
        const AttnGrads gc =
            masked_attention_backward(q_m, k_r, v_r, mask_cross, cfg, d_o_cross);
        g.dmask_cross = gc.dscores;
        for (std::size_t i = 0; i < focus.length; ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) dq_full(focus.start + i, j) += gc.dq(i, j);
        for (std::size_t i = 0; i < n_rest; ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) {
                dk_full(rest_rows[i], j) += gc.dk(i, j);
                dv_full(rest_rows[i], j) += gc.dv(i, j);
            }
    } else {
        g.dmask_cross = Matrix(focus.length, 0);
    }

    g.dwq = matmul(transpose(x), dq_full);
    g.dwk = matmul(transpose(x), dk_full);
    g.dwv = matmul(transpose(x), dv_full);
    g.dtokens = add(add(matmul(dq_full, transpose(proj.wq)), matmul(dk_full, transpose(proj.wk))),
                    matmul(dv_full, transpose(proj.wv)));
    return g;
}

}  // namespace moda
