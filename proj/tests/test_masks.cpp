// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "moda/attention.hpp"
#include "moda/masks.hpp"
#include "moda/modality.hpp"
#include "moda/rng.hpp"

using namespace moda;

TEST_CASE("causal inf mask shapes") {
    const CompiledMask m1 = build_causal_inf_mask(1);
    REQUIRE(m1.logits.rows() == 1);
    REQUIRE(m1.logits(0, 0) == 0.0);

    const CompiledMask m2 = build_causal_inf_mask(2);
    REQUIRE(m2.logits(0, 0) == 0.0);
    REQUIRE(m2.logits(0, 1) == kNegInf);
    REQUIRE(m2.logits(1, 0) == 0.0);
    REQUIRE(m2.logits(1, 1) == 0.0);

    const CompiledMask m3 = build_causal_inf_mask(3);
    int masked = 0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) masked += (m3.logits(i, j) == kNegInf);
    REQUIRE(masked == 3);
    REQUIRE(m3.pseudo_count(0) == 0);
}

TEST_CASE("pseudo mask with zero decay") {
    const CompiledMask m = build_pseudo_mask(4, 0.0, 0.0);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            REQUIRE(m.is_pseudo(i, j) == (j > i));
            if (j > i) REQUIRE(m.logits(i, j) == 0.0);
        }
}

TEST_CASE("pseudo mask decay schedule n=3 beta=0.1") {
    const CompiledMask m = build_pseudo_mask(3, 0.1, 0.0);
    REQUIRE(m.pseudo_count(0) == 2);
    REQUIRE(m.logits(0, 1) == 0.0);
    REQUIRE(m.logits(0, 2) == -0.1);
    REQUIRE(m.pseudo_count(1) == 1);
    REQUIRE(m.logits(1, 2) == 0.0);
    REQUIRE(m.pseudo_count(2) == 0);
}

TEST_CASE("pseudo mask per-row counts n=4") {
    const CompiledMask m = build_pseudo_mask(4, 0.5, 0.0);
    REQUIRE(m.pseudo_count(0) == 3);
    REQUIRE(m.pseudo_count(1) == 2);
    REQUIRE(m.pseudo_count(2) == 1);
    REQUIRE(m.pseudo_count(3) == 0);
}

TEST_CASE("pseudo mask rejects negative decay") {
    REQUIRE_THROWS_AS(build_pseudo_mask(3, -0.5, 0.0), InvalidDecay);
}

TEST_CASE("pseudo-count law and monotone decay") {
    Rng rng(3);
    for (std::size_t n = 1; n <= 32; ++n) {
        const double beta = rng.uniform();
        const double p_base = rng.normal();
        const CompiledMask m = build_pseudo_mask(n, beta, p_base);
        std::size_t total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE(m.pseudo_count(i) == n - i - 1);
            total += m.pseudo_count(i);
            std::size_t rank = 0;
            double prev = p_base;
            for (std::size_t j = 0; j < n; ++j) {
                if (!m.is_pseudo(i, j)) continue;
                REQUIRE(m.logits(i, j) == p_base - static_cast<double>(rank) * beta);
                REQUIRE(m.logits(i, j) <= prev);  // non-increasing left to right
                prev = m.logits(i, j);
                ++rank;
            }
        }
        REQUIRE(total == n * (n - 1) / 2);
    }
}

TEST_CASE("learnable mask equals pseudo mask at initialization") {
    const CompiledMask learn = build_learnable_mask(5, 123, 0.2, 0.0);
    const CompiledMask pseudo = build_pseudo_mask(5, 0.2, 0.0);
    REQUIRE(learn.param_count() == 10);
    for (std::size_t i = 0; i < learn.logits.size(); ++i)
        REQUIRE(learn.logits.data()[i] == pseudo.logits.data()[i]);
    for (std::size_t i = 0; i < 5; ++i)
        REQUIRE(learn.pseudo_count(i) == pseudo.pseudo_count(i));

    // Parameter round-trip: writing the initial values back changes nothing.
    CompiledMask copy = learn;
    apply_mask_params(copy, initial_mask_params(learn));
    for (std::size_t i = 0; i < learn.logits.size(); ++i)
        REQUIRE(copy.logits.data()[i] == learn.logits.data()[i]);

    std::vector<double> wrong(learn.param_count() + 1, 0.0);
    REQUIRE_THROWS_AS(apply_mask_params(copy, wrong), ShapeMismatch);
}

TEST_CASE("special token mask appends a sink column") {
    const CompiledMask m1 = build_special_token_mask(1);
    REQUIRE(m1.logits.rows() == 1);
    REQUIRE(m1.logits.cols() == 2);
    REQUIRE(m1.logits(0, 0) == 0.0);
    REQUIRE(m1.logits(0, 1) == 0.0);
    REQUIRE(m1.value_participation[0] == 1);
    REQUIRE(m1.value_participation[1] == 0);

    const CompiledMask m = build_special_token_mask(4);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(m.logits(i, 4) == 0.0);
    REQUIRE(m.value_column_count() == 4);
}

TEST_CASE("sink column takes mass away from real keys") {
    Rng rng(5);
    const std::size_t n = 4, d = 3;
    Matrix q(n, d), k(n, d), v(n, d);
    for (double& x : q.data()) x = rng.normal();
    for (double& x : k.data()) x = rng.normal();
    for (double& x : v.data()) x = rng.normal();
    const CompiledMask mask = build_special_token_mask(n);
    const AttnResult res = compiled_attention(q, k, v, mask, AttentionConfig::scaled(d));
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0, real = 0.0;
        for (std::size_t j = 0; j <= n; ++j) total += res.weights(i, j);
        for (std::size_t j = 0; j < n; ++j) real += res.weights(i, j);
        REQUIRE(std::abs(total - 1.0) <= 1e-12);
        REQUIRE(real < 1.0);
        REQUIRE(res.weights(i, n) > 0.0);
    }

    // Sink conservation: output equals the real-key weighted value sum.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < d; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += res.weights(i, j) * v(j, t);
            REQUIRE(res.output(i, t) == Catch::Approx(acc).margin(1e-14));
        }
}

TEST_CASE("modal masks single modality degenerate") {
    const ModalSequence seq = concat({{0, Matrix(3, 2, 1.0)}});
    const ModalityPair pair = make_modality_pair(seq, 0);
    MaskSpec base;
    base.variant = MaskVariant::Inf;
    const ModalMasks masks = build_modal_masks(seq, pair, base);
    REQUIRE(masks.cross.logits.cols() == 0);
    const CompiledMask causal = build_causal_inf_mask(3);
    for (std::size_t i = 0; i < causal.logits.size(); ++i)
        REQUIRE(masks.self.logits.data()[i] == causal.logits.data()[i]);
}

TEST_CASE("modal masks follow full-sequence causality") {
    // Visual block rows 0..2, text block rows 3..4.
    const ModalSequence seq = concat({{0, Matrix(3, 2)}, {1, Matrix(2, 2)}});
    MaskSpec base;
    base.variant = MaskVariant::Inf;

    const ModalMasks text = build_modal_masks(seq, make_modality_pair(seq, 1), base);
    // Text query 0 (global row 3) sees all three visual keys.
    for (std::size_t j = 0; j < 3; ++j) REQUIRE(text.cross.logits(0, j) == 0.0);

    const ModalMasks vis = build_modal_masks(seq, make_modality_pair(seq, 0), base);
    // Visual queries precede every text key: nothing visible.
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) REQUIRE(vis.cross.logits(i, j) == kNegInf);
}

TEST_CASE("modal masks with pseudo base match position enumeration") {
    const std::size_t nv = 2, nt = 2;
    const double beta = 0.1, p_base = 0.0;
    const ModalSequence seq = concat({{0, Matrix(nv, 2)}, {1, Matrix(nt, 2)}});
    MaskSpec base;
    base.variant = MaskVariant::Pseudo;
    base.beta = beta;
    base.p_base = p_base;

    for (ModalityId focus : {0, 1}) {
        const ModalMasks masks = build_modal_masks(seq, make_modality_pair(seq, focus), base);
        const std::size_t focus_start = focus == 0 ? 0 : nv;
        const std::size_t n_focus = focus == 0 ? nv : nt;
        const std::size_t n_rest = focus == 0 ? nt : nv;
        const std::size_t rest_start = focus == 0 ? nv : 0;

        // Independent enumeration of every (query, key) position.
        for (std::size_t i = 0; i < n_focus; ++i) {
            std::size_t rank = 0;
            for (std::size_t j = 0; j < n_focus; ++j) {
                const bool blocked = j > i;
                REQUIRE(masks.self.is_pseudo(i, j) == blocked);
                if (blocked) {
                    REQUIRE(masks.self.logits(i, j) ==
                            p_base - static_cast<double>(rank) * beta);
                    ++rank;
                }
            }
            rank = 0;
            for (std::size_t j = 0; j < n_rest; ++j) {
                const bool blocked = rest_start + j >= focus_start + i;
                REQUIRE(masks.cross.is_pseudo(i, j) == blocked);
                if (blocked) {
                    REQUIRE(masks.cross.logits(i, j) ==
                            p_base - static_cast<double>(rank) * beta);
                    ++rank;
                } else {
                    REQUIRE(masks.cross.logits(i, j) == 0.0);
                }
            }
        }
    }
}

TEST_CASE("fix variant adds a finite penalty") {
    MaskSpec spec;
    spec.variant = MaskVariant::Fix;
    spec.fixed_value = -10.0;
    spec.n = 3;
    const CompiledMask m = compile_mask(spec);
    REQUIRE(m.logits(0, 2) == -10.0);
    REQUIRE(m.logits(2, 0) == 0.0);
    REQUIRE(m.pseudo_count(0) == 0);  // additive, values still participate
}
