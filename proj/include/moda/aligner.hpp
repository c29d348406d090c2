// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "moda/errors.hpp"
#include "moda/matrix.hpp"
#include "moda/modality.hpp"
#include "moda/rng.hpp"

namespace moda {

// Probe used by the complexity tests: one Gram build per modality per layer
// per forward pass.
inline std::atomic<long>& gram_build_count() {
    static std::atomic<long> count{0};
    return count;
}

// Per-modality key-space Gram matrix G = K^T K with its Frobenius norm.
struct GramMatrix {
    ModalityId modality = 0;
    Matrix g;                 // d x d, symmetric PSD
    double norm_value = 0.0;  // ||G||_F
};

inline GramMatrix gram_matrix(const Matrix& keys, ModalityId modality = 0) {
    if (keys.rows() < 1)
        throw ShapeMismatch("gram_matrix: empty key matrix");
    if (!keys.all_finite())
        throw NonFiniteEntry("gram_matrix: non-finite key entry");
    gram_build_count().fetch_add(1, std::memory_order_relaxed);
    GramMatrix gm;
    gm.modality = modality;
    gm.g = matmul(transpose(keys), keys);
    gm.norm_value = frobenius_norm(gm.g);
    if (gm.norm_value < 1e-12)
        throw DegenerateGram("gram_matrix: all-zero keys");
    return gm;
}

inline Matrix normalize_gram(const GramMatrix& gm) {
    if (!(gm.norm_value > 0.0))
        throw DegenerateGram("normalize_gram: zero norm");
    return scale(gm.g, 1.0 / gm.norm_value);
}

// Cross-modal token transfer: rest-modality keys mapped through the focus
// modality's normalized Gram. Shape preserving, one d x d product per token.
inline Matrix align_tokens(const Matrix& other_keys, const Matrix& normalized_gram) {
    if (normalized_gram.rows() != normalized_gram.cols())
        throw ShapeMismatch("align_tokens: gram must be square");
    if (other_keys.cols() != normalized_gram.rows())
        throw ShapeMismatch("align_tokens: keys " + shape_str(other_keys) + " vs gram " +
                            shape_str(normalized_gram));
    return matmul(other_keys, normalized_gram);
}

// Backward of normalize_gram: with n = ||G||_F and Ghat = G/n,
// dG = (dGhat - <dGhat, Ghat> Ghat) / n.
inline Matrix normalize_gram_backward(const GramMatrix& gm, const Matrix& d_normalized) {
    const double n = gm.norm_value;
    double inner = 0.0;
    for (std::size_t i = 0; i < gm.g.size(); ++i)
        inner += d_normalized.data()[i] * gm.g.data()[i] / n;
    Matrix dg(gm.g.rows(), gm.g.cols());
    for (std::size_t i = 0; i < gm.g.size(); ++i)
        dg.data()[i] = (d_normalized.data()[i] - inner * gm.g.data()[i] / n) / n;
    return dg;
}

// Backward of G = K^T K: dK = K (dG + dG^T).
inline Matrix gram_backward(const Matrix& keys, const Matrix& dg) {
    return matmul(keys, add(dg, transpose(dg)));
}

// ---------------------------------------------------------------------------
// Aligner variants.
// ---------------------------------------------------------------------------

enum class AlignerVariant { Mlp, Mlp2, MlpGelu, Cov };

inline std::string aligner_variant_name(AlignerVariant v) {
    switch (v) {
        case AlignerVariant::Mlp: return "mlp";
        case AlignerVariant::Mlp2: return "mlp2";
        case AlignerVariant::MlpGelu: return "mlp_gelu";
        case AlignerVariant::Cov: return "cov";
    }
    return "?";
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

// Parameters of one aligner direction (rest -> focus). w2/b2 exist for the
// two-layer variants only.
struct AlignerParams {
    AlignerVariant kind = AlignerVariant::Mlp;
    Matrix w1, b1;  // d x d, 1 x d
    Matrix w2, b2;
};

inline bool aligner_has_second_layer(AlignerVariant v) {
    return v == AlignerVariant::Mlp2 || v == AlignerVariant::MlpGelu;
}

// Near-identity initialization keeps early training close to the plain
// key space while leaving every weight trainable.
inline AlignerParams make_aligner_params(AlignerVariant kind, std::size_t d, Rng rng) {
    AlignerParams p;
    p.kind = kind;
    const double s = 0.05 / std::sqrt(static_cast<double>(d));
    p.w1 = add(Matrix::identity(d), rng.gaussian_matrix(d, d, s));
    p.b1 = Matrix(1, d);
    if (aligner_has_second_layer(kind)) {
        p.w2 = add(Matrix::identity(d), rng.gaussian_matrix(d, d, s));
        p.b2 = Matrix(1, d);
    }
    return p;
}

inline Matrix add_row_bias(const Matrix& x, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != x.cols())
        throw ShapeMismatch("bias shape " + shape_str(bias) + " vs " + shape_str(x));
    Matrix out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += bias(0, j);
    return out;
}

struct AlignerCache {
    Matrix x;    // input tokens
    Matrix h1;   // first affine output (pre-activation)
    Matrix a1;   // activation output (MlpGelu)
};

// Apply an aligner to rest-modality tokens. Cov composes the focus
// modality's normalized Gram after the learned affine map and is the only
// variant that reads `normalized_gram`.
inline Matrix apply_aligner(const AlignerParams& p, const Matrix& x,
                            const Matrix* normalized_gram = nullptr,
                            AlignerCache* cache = nullptr) {
    Matrix h1 = add_row_bias(matmul(x, p.w1), p.b1);
    Matrix out;
    Matrix a1;
    switch (p.kind) {
        case AlignerVariant::Mlp:
            out = h1;
            break;
        case AlignerVariant::Mlp2:
            out = add_row_bias(matmul(h1, p.w2), p.b2);
            break;
        case AlignerVariant::MlpGelu: {
            a1 = h1;
            for (double& v : a1.data()) v = gelu(v);
            out = add_row_bias(matmul(a1, p.w2), p.b2);
            break;
        }
        case AlignerVariant::Cov: {
            if (!normalized_gram)
                throw ShapeMismatch("cov aligner needs a normalized gram");
            out = align_tokens(h1, *normalized_gram);
            break;
        }
    }
    if (cache) {
        cache->x = x;
        cache->h1 = h1;
        cache->a1 = a1;
    }
    return out;
}

struct AlignerGrads {
    Matrix dx;
    Matrix dw1, db1, dw2, db2;
    Matrix dngram;  // Cov only
};

inline Matrix column_sums(const Matrix& m) {
    Matrix out(1, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(0, j) += m(i, j);
    return out;
}

inline AlignerGrads aligner_backward(const AlignerParams& p, const AlignerCache& cache,
                                     const Matrix* normalized_gram, const Matrix& d_out) {
    AlignerGrads g;
    Matrix dh1;
    switch (p.kind) {
        case AlignerVariant::Mlp:
            dh1 = d_out;
            break;
        case AlignerVariant::Mlp2:
            g.dw2 = matmul(transpose(cache.h1), d_out);
            g.db2 = column_sums(d_out);
            dh1 = matmul(d_out, transpose(p.w2));
            break;
        case AlignerVariant::MlpGelu: {
            g.dw2 = matmul(transpose(cache.a1), d_out);
            g.db2 = column_sums(d_out);
            Matrix da1 = matmul(d_out, transpose(p.w2));
            dh1 = da1;
            for (std::size_t i = 0; i < dh1.size(); ++i)
                dh1.data()[i] *= gelu_grad(cache.h1.data()[i]);
            break;
        }
        case AlignerVariant::Cov: {
            if (!normalized_gram)
                throw ShapeMismatch("cov aligner backward needs a normalized gram");
            dh1 = matmul(d_out, transpose(*normalized_gram));
            g.dngram = matmul(transpose(cache.h1), d_out);
            break;
        }
    }
    g.dw1 = matmul(transpose(cache.x), dh1);
    g.db1 = column_sums(dh1);
    g.dx = matmul(dh1, transpose(p.w1));
    return g;
}

// Spec-level convenience: an aligner as a closure. Cov binds the normalized
// Gram of the target modality at build time.
inline std::function<Matrix(const Matrix&)> build_aligner(AlignerVariant variant, std::size_t d,
                                                          std::uint64_t seed,
                                                          const Matrix* normalized_gram = nullptr) {
    AlignerParams params = make_aligner_params(variant, d, Rng(seed));
    if (variant == AlignerVariant::Cov) {
        if (!normalized_gram)
            throw ShapeMismatch("build_aligner: cov variant needs a normalized gram");
        Matrix ng = *normalized_gram;
        return [params, ng](const Matrix& x) { return apply_aligner(params, x, &ng); };
    }
    return [params](const Matrix& x) { return apply_aligner(params, x, nullptr); };
}

// ---------------------------------------------------------------------------
// Fuser: merge aligned tokens with the originals.
// ---------------------------------------------------------------------------

enum class FuserMode { SelfOnly, AlignedOnly, Concat, Add };

inline std::string fuser_mode_name(FuserMode m) {
    switch (m) {
        case FuserMode::SelfOnly: return "self_only";
        case FuserMode::AlignedOnly: return "aligned_only";
        case FuserMode::Concat: return "concat";
        case FuserMode::Add: return "add";
    }
    return "?";
}

struct FuserState {
    FuserMode mode = FuserMode::Concat;
    std::size_t rank = 0;
    Matrix adapter_down;  // d x r (Add)
    Matrix adapter_up;    // r x d (Add), zero-initialized
    Matrix proj;          // 2d x d (Concat)
};

// rank == 0 selects the default d/4 (at least 1). The up-projection starts at
// zero and the concat projection at [I; 0], so a fresh fuser passes originals
// through unchanged.
inline FuserState make_fuser_state(FuserMode mode, std::size_t d, std::size_t rank, Rng rng) {
    FuserState f;
    f.mode = mode;
    if (mode == FuserMode::Add) {
        f.rank = rank == 0 ? std::max<std::size_t>(1, d / 4) : rank;
        if (f.rank > d)
            throw RankExceedsDim("adapter rank " + std::to_string(f.rank) + " > d = " +
                                 std::to_string(d));
        f.adapter_down = rng.gaussian_matrix(d, f.rank, 1.0 / std::sqrt(static_cast<double>(d)));
        f.adapter_up = Matrix(f.rank, d);
    } else if (mode == FuserMode::Concat) {
        f.proj = Matrix(2 * d, d);
        for (std::size_t i = 0; i < d; ++i) f.proj(i, i) = 1.0;
    }
    return f;
}

struct FuseCache {
    Matrix original, aligned;
    Matrix low;  // aligned . adapter_down (Add)
};

inline Matrix fuse(const Matrix& original, const Matrix& aligned, const FuserState& fuser,
                   FuseCache* cache = nullptr) {
    if (!original.same_shape(aligned))
        throw ShapeMismatch("fuse: original " + shape_str(original) + " vs aligned " +
                            shape_str(aligned));
    if (cache) {
        cache->original = original;
        cache->aligned = aligned;
    }
    switch (fuser.mode) {
        case FuserMode::SelfOnly:
            return original;
        case FuserMode::AlignedOnly:
            return aligned;
        case FuserMode::Add: {
            Matrix low = matmul(aligned, fuser.adapter_down);
            if (cache) cache->low = low;
            return add(original, matmul(low, fuser.adapter_up));
        }
        case FuserMode::Concat:
            return matmul(hcat(original, aligned), fuser.proj);
    }
    throw ConfigError("unknown fuser mode");
}

struct FuseGrads {
    Matrix d_original, d_aligned;
    Matrix d_down, d_up, d_proj;
};

inline FuseGrads fuse_backward(const FuserState& fuser, const FuseCache& cache,
                               const Matrix& d_out) {
    FuseGrads g;
    const std::size_t d = cache.original.cols();
    switch (fuser.mode) {
        case FuserMode::SelfOnly:
            g.d_original = d_out;
            g.d_aligned = Matrix(cache.aligned.rows(), cache.aligned.cols());
            break;
        case FuserMode::AlignedOnly:
            g.d_aligned = d_out;
            g.d_original = Matrix(cache.original.rows(), cache.original.cols());
            break;
        case FuserMode::Add: {
            g.d_original = d_out;
            g.d_up = matmul(transpose(cache.low), d_out);
            Matrix dlow = matmul(d_out, transpose(fuser.adapter_up));
            g.d_down = matmul(transpose(cache.aligned), dlow);
            g.d_aligned = matmul(dlow, transpose(fuser.adapter_down));
            break;
        }
        case FuserMode::Concat: {
            Matrix cat = hcat(cache.original, cache.aligned);
            g.d_proj = matmul(transpose(cat), d_out);
            Matrix dcat = matmul(d_out, transpose(fuser.proj));
            g.d_original = Matrix(cache.original.rows(), d);
            g.d_aligned = Matrix(cache.aligned.rows(), d);
            for (std::size_t i = 0; i < dcat.rows(); ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    g.d_original(i, j) = dcat(i, j);
                    g.d_aligned(i, j) = dcat(i, d + j);
                }
            break;
        }
    }
    return g;
}

}  // namespace moda
