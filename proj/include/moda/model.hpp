// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moda/aligner.hpp"
#include "moda/attention.hpp"
#include "moda/diagnostics.hpp"
#include "moda/errors.hpp"
#include "moda/masks.hpp"
#include "moda/matrix.hpp"
#include "moda/modality.hpp"
#include "moda/rng.hpp"
#include "moda/synthetic.hpp"

namespace moda {

enum class AttentionKind { BaselineJoint, Moda };
enum class CombineMode { ConcatProject, Sum };

inline std::string attention_kind_name(AttentionKind k) {
    return k == AttentionKind::BaselineJoint ? "baseline" : "moda";
}

inline std::string combine_mode_name(CombineMode c) {
    return c == CombineMode::ConcatProject ? "concat" : "sum";
}

// Configuration of one transformer block. The stack is homogeneous: ablation
// rows swap the whole block configuration.
struct BlockConfig {
    std::size_t d = 32;
    AttentionKind attention_kind = AttentionKind::Moda;
    bool use_mdm = true;  // modular masks on the self/cross split
    bool use_daa = true;  // duplex aligner on cross-modal keys
    MaskSpec mask_spec{MaskVariant::Learn, 0.1, 0.0, -10.0, 1};
    AlignerVariant aligner_variant = AlignerVariant::Cov;
    FuserMode fuser_mode = FuserMode::Concat;
    std::size_t adapter_rank = 0;  // 0 -> d/4
    CombineMode combine = CombineMode::ConcatProject;

    void validate() const {
        if (attention_kind == AttentionKind::Moda && !use_mdm && !use_daa)
            throw ConfigError("moda blocks need at least one of use_mdm/use_daa");
        if (d < 1) throw ConfigError("block width must be >= 1");
    }
};

struct ModelConfig {
    std::size_t n_blocks = 2;
    BlockConfig block;
    SyntheticTask task;
    std::size_t n_classes = 2;
    std::uint64_t seed = 0;
    // Text-dominant initialization: text embeddings start with much larger
    // norms than visual ones, which biases a joint softmax toward text keys.
    double visual_embed_scale = 0.12;
    double text_embed_scale = 1.0;
    double pos_embed_scale = 0.12;

    std::size_t token_count() const { return task.n_visual + task.n_text; }

    void validate() const {
        block.validate();
        task.validate();
        if (block.d != task.d)
            throw ConfigError("block width and task width must match");
        if (n_classes < 2) throw ConfigError("need at least two classes");
    }
};

struct Tensor {
    std::string name;
    Matrix value;
    Matrix grad;
};

inline Tensor make_tensor(std::string name, Matrix value) {
    Matrix grad(value.rows(), value.cols());
    return Tensor{std::move(name), std::move(value), std::move(grad)};
}

struct AlignerTensors {
    Tensor w1, b1, w2, b2;
};

struct FuserTensors {
    Tensor down, up, proj;
};

struct BlockParams {
    Tensor wq, wk, wv;
    Tensor wo;      // baseline output projection
    Tensor w_comb;  // moda concat-combine projection (2d x d)
    std::array<AlignerTensors, 2> aligners;  // indexed by focus modality
    std::array<FuserTensors, 2> fusers;
    std::array<Tensor, 2> mask_self_params;   // learnable logits, 1 x K
    std::array<Tensor, 2> mask_cross_params;
};

struct ModelState {
    ModelConfig cfg;
    Tensor embed_v, embed_t, pos;
    std::vector<BlockParams> blocks;
    Tensor head_w, head_b;
    // Mask structure is fixed by the task shape; Learn values are reapplied
    // from the parameter tensors each forward pass.
    std::array<ModalMasks, 2> modal_masks;  // per focus modality
    CompiledMask joint_mask;                // baseline causal mask

    bool is_moda() const { return cfg.block.attention_kind == AttentionKind::Moda; }
    bool learnable_masks() const {
        return is_moda() && cfg.block.use_mdm && cfg.block.mask_spec.variant == MaskVariant::Learn;
    }
};

namespace detail {

inline ModalSequence prototype_sequence(const SyntheticTask& task) {
    return concat({{kVisualModality, Matrix(task.n_visual, task.d)},
                   {kTextModality, Matrix(task.n_text, task.d)}});
}

inline FuserState fuser_state_view(const FuserTensors& t, FuserMode mode, std::size_t rank) {
    FuserState f;
    f.mode = mode;
    f.rank = rank;
    f.adapter_down = t.down.value;
    f.adapter_up = t.up.value;
    f.proj = t.proj.value;
    return f;
}

inline AlignerParams aligner_params_view(const AlignerTensors& t, AlignerVariant kind) {
    AlignerParams p;
    p.kind = kind;
    p.w1 = t.w1.value;
    p.b1 = t.b1.value;
    p.w2 = t.w2.value;
    p.b2 = t.b2.value;
    return p;
}

}  // namespace detail

inline ModelState init_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelState m;
    m.cfg = cfg;
    const std::size_t d = cfg.block.d;
    const std::size_t n = cfg.token_count();
    Rng root(cfg.seed);
    Rng init = root.split("model_init");

    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(d));
    m.embed_v = make_tensor("embed_v",
                            init.split("embed_v").gaussian_matrix(d, d, cfg.visual_embed_scale));
    m.embed_t = make_tensor("embed_t",
                            init.split("embed_t").gaussian_matrix(d, d, cfg.text_embed_scale));
    m.pos = make_tensor("pos", init.split("pos").gaussian_matrix(n, d, cfg.pos_embed_scale));

    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        BlockParams blk;
        const std::string prefix = "block" + std::to_string(b) + ".";
        Rng brng = init.split(b + 1000);
        blk.wq = make_tensor(prefix + "wq", brng.split("wq").gaussian_matrix(d, d, proj_scale));
        blk.wk = make_tensor(prefix + "wk", brng.split("wk").gaussian_matrix(d, d, proj_scale));
        blk.wv = make_tensor(prefix + "wv", brng.split("wv").gaussian_matrix(d, d, proj_scale));
        if (cfg.block.attention_kind == AttentionKind::BaselineJoint) {
            blk.wo = make_tensor(prefix + "wo",
                                 brng.split("wo").gaussian_matrix(d, d, proj_scale));
        } else {
            if (cfg.block.combine == CombineMode::ConcatProject) {
                // [0.5 I; 0.5 I]: self and cross outputs start on equal footing.
                Matrix comb(2 * d, d);
                for (std::size_t i = 0; i < d; ++i) {
                    comb(i, i) = 0.5;
                    comb(d + i, i) = 0.5;
                }
                blk.w_comb = make_tensor(prefix + "w_comb", comb);
            }
            for (int f = 0; f < 2; ++f) {
                const std::string fp = prefix + "f" + std::to_string(f) + ".";
                if (cfg.block.use_daa) {
                    const AlignerParams ap = make_aligner_params(
                        cfg.block.aligner_variant, d, brng.split(100 + f));
                    blk.aligners[f].w1 = make_tensor(fp + "aligner.w1", ap.w1);
                    blk.aligners[f].b1 = make_tensor(fp + "aligner.b1", ap.b1);
                    if (aligner_has_second_layer(cfg.block.aligner_variant)) {
                        blk.aligners[f].w2 = make_tensor(fp + "aligner.w2", ap.w2);
                        blk.aligners[f].b2 = make_tensor(fp + "aligner.b2", ap.b2);
                    }
                    const FuserState fs = make_fuser_state(cfg.block.fuser_mode, d,
                                                           cfg.block.adapter_rank,
                                                           brng.split(200 + f));
                    blk.fusers[f].down = make_tensor(fp + "fuser.down", fs.adapter_down);
                    blk.fusers[f].up = make_tensor(fp + "fuser.up", fs.adapter_up);
                    blk.fusers[f].proj = make_tensor(fp + "fuser.proj", fs.proj);
                }
            }
        }
        m.blocks.push_back(std::move(blk));
    }

    m.head_w = make_tensor("head.w", init.split("head_w").gaussian_matrix(
                                          d, cfg.n_classes, proj_scale));
    m.head_b = make_tensor("head.b", Matrix(1, cfg.n_classes));

    // Compile mask structure once. Learn masks also produce parameter
    // tensors, shared across blocks? No: per block, initialized identically.
    const ModalSequence proto = detail::prototype_sequence(cfg.task);
    if (m.is_moda()) {
        MaskSpec spec = cfg.block.use_mdm ? cfg.block.mask_spec : MaskSpec{};
        if (!cfg.block.use_mdm) spec.variant = MaskVariant::Inf;
        for (int f = 0; f < 2; ++f)
            m.modal_masks[f] = build_modal_masks(proto, make_modality_pair(proto, f), spec);
        if (m.learnable_masks()) {
            for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
                const std::string prefix = "block" + std::to_string(b) + ".";
                for (int f = 0; f < 2; ++f) {
                    const std::vector<double> self_init =
                        initial_mask_params(m.modal_masks[f].self);
                    const std::vector<double> cross_init =
                        initial_mask_params(m.modal_masks[f].cross);
                    Matrix sp(1, self_init.size());
                    sp.data() = self_init;
                    Matrix cp(1, cross_init.size());
                    cp.data() = cross_init;
                    m.blocks[b].mask_self_params[f] = make_tensor(
                        prefix + "mask_self" + std::to_string(f), sp);
                    m.blocks[b].mask_cross_params[f] = make_tensor(
                        prefix + "mask_cross" + std::to_string(f), cp);
                }
            }
        }
    } else {
        m.joint_mask = build_causal_inf_mask(cfg.token_count());
    }
    return m;
}

struct ParamRef {
    Tensor* tensor = nullptr;
};

inline std::vector<ParamRef> parameters(ModelState& m) {
    std::vector<ParamRef> out;
    const auto push = [&out](Tensor& t) {
        if (t.value.size() > 0) out.push_back(ParamRef{&t});
    };
    push(m.embed_v);
    push(m.embed_t);
    push(m.pos);
    for (auto& blk : m.blocks) {
        push(blk.wq);
        push(blk.wk);
        push(blk.wv);
        push(blk.wo);
        push(blk.w_comb);
        for (int f = 0; f < 2; ++f) {
            push(blk.aligners[f].w1);
            push(blk.aligners[f].b1);
            push(blk.aligners[f].w2);
            push(blk.aligners[f].b2);
            push(blk.fusers[f].down);
            push(blk.fusers[f].up);
            push(blk.fusers[f].proj);
            push(blk.mask_self_params[f]);
            push(blk.mask_cross_params[f]);
        }
    }
    push(m.head_w);
    push(m.head_b);
    return out;
}

inline void zero_grads(ModelState& m) {
    for (const ParamRef& p : parameters(m))
        for (double& g : p.tensor->grad.data()) g = 0.0;
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

struct FocusCache {
    Matrix q, k_self, v_self, k_rest, v_rest;
    bool has_gram = false;
    GramMatrix gram;  // of the focus modality's keys (Cov aligner)
    Matrix ngram;
    AlignerCache aligner_cache;
    Matrix aligned;
    FuseCache fuse_cache;
    Matrix k_rest_fused;
    CompiledMask self_mask, cross_mask;
    AttnResult self_attn, cross_attn;
    Matrix cat;  // [o_self | o_cross] for the concat combine
};

struct BlockCache {
    Matrix x_in;
    Projected p;
    AttnResult joint;
    std::array<FocusCache, 2> focus;
};

struct ForwardCache {
    Matrix vis_onehot, txt_onehot;
    Matrix x0;
    std::vector<BlockCache> blocks;
    Matrix x_final;
    Matrix head_in;  // 1 x d
};

namespace detail {

inline std::array<Segment, 2> model_segments(const ModelConfig& cfg) {
    return {Segment{kVisualModality, 0, cfg.task.n_visual},
            Segment{kTextModality, cfg.task.n_visual, cfg.task.n_text}};
}

// Attention mass landing on real keys (pseudo and sink positions excluded)
// for one query row.
inline double real_key_mass(const AttnResult& attn, const CompiledMask& mask, std::size_t row) {
    double mass = 0.0;
    for (std::size_t j = 0; j < mask.column_count(); ++j) {
        if (!mask.value_participation[j] || mask.is_pseudo(row, j)) continue;
        mass += attn.weights(row, j);
    }
    return mass;
}

// Add one part's renormalized real-key distribution into a trace row.
inline void fold_trace_row(Matrix& target, std::size_t target_row, const AttnResult& attn,
                           const CompiledMask& mask, std::size_t attn_row,
                           const std::vector<std::size_t>& token_of_column, double weight,
                           double mass) {
    std::size_t col = 0;
    for (std::size_t j = 0; j < mask.column_count(); ++j) {
        if (!mask.value_participation[j]) continue;
        const std::size_t token = token_of_column[col++];
        if (mask.is_pseudo(attn_row, j)) continue;
        target(target_row, token) += weight * attn.weights(attn_row, j) / mass;
    }
}

}  // namespace detail

// Embedding: one-hot rows through the per-modality tables, stacked.
inline Matrix embed_tokens(const Matrix& vis_onehot, const Matrix& txt_onehot,
                           const ModelState& m) {
    const Matrix ev = matmul(vis_onehot, m.embed_v.value);
    const Matrix et = matmul(txt_onehot, m.embed_t.value);
    Matrix out(ev.rows() + et.rows(), ev.cols());
    for (std::size_t i = 0; i < ev.rows(); ++i)
        for (std::size_t j = 0; j < ev.cols(); ++j) out(i, j) = ev(i, j);
    for (std::size_t i = 0; i < et.rows(); ++i)
        for (std::size_t j = 0; j < et.cols(); ++j) out(ev.rows() + i, j) = et(i, j);
    return out;
}

// Forward pass over one sequence. Returns the class logits (1 x C); the
// attention trace and the cache for backward are filled when requested.
inline Matrix model_forward(const ModelState& m, const ModalSequence& seq,
                            ForwardCache* cache = nullptr, AttentionTrace* trace = nullptr) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t d = cfg.block.d;
    const std::size_t nv = cfg.task.n_visual, nt = cfg.task.n_text;
    const std::size_t n = nv + nt;
    if (seq.width() != d)
        throw ShapeMismatch("sequence width " + std::to_string(seq.width()) + " vs model d " +
                            std::to_string(d));
    if (seq.token_count() != n)
        throw ShapeMismatch("sequence length mismatch");

    const Matrix vis = seq.tokens().slice_rows(0, nv);
    const Matrix txt = seq.tokens().slice_rows(nv, nt);
    Matrix x = add(embed_tokens(vis, txt, m), m.pos.value);

    if (cache) {
        cache->vis_onehot = vis;
        cache->txt_onehot = txt;
        cache->x0 = x;
        cache->blocks.clear();
        cache->blocks.reserve(cfg.n_blocks);
    }

    const AttentionConfig attn_cfg = AttentionConfig::scaled(d);
    const auto segs = detail::model_segments(cfg);

    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const BlockParams& blk = m.blocks[b];
        BlockCache bc;
        bc.x_in = x;
        const ProjectionSet proj{blk.wq.value, blk.wk.value, blk.wv.value};
        bc.p = project(x, proj);

        Matrix attn_out(n, d);
        Matrix trace_rows(n, n);

        if (!m.is_moda()) {
            bc.joint = compiled_attention(bc.p.q, bc.p.k, bc.p.v, m.joint_mask, attn_cfg);
            attn_out = matmul(bc.joint.output, blk.wo.value);
            trace_rows = bc.joint.weights;
        } else {
            for (int f = 0; f < 2; ++f) {
                FocusCache& fc = bc.focus[f];
                const Segment& sf = segs[f];
                const Segment& sr = segs[1 - f];
                fc.q = bc.p.q.slice_rows(sf.start, sf.length);
                fc.k_self = bc.p.k.slice_rows(sf.start, sf.length);
                fc.v_self = bc.p.v.slice_rows(sf.start, sf.length);
                fc.k_rest = bc.p.k.slice_rows(sr.start, sr.length);
                fc.v_rest = bc.p.v.slice_rows(sr.start, sr.length);

                // Correct-after-align: cross-modal keys are aligned into the
                // focus space and fused before any attention runs.
                if (cfg.block.use_daa) {
                    const Matrix* ngram_ptr = nullptr;
                    if (cfg.block.aligner_variant == AlignerVariant::Cov) {
                        fc.gram = gram_matrix(fc.k_self, f);
                        fc.ngram = normalize_gram(fc.gram);
                        fc.has_gram = true;
                        ngram_ptr = &fc.ngram;
                    }
                    const AlignerParams ap = detail::aligner_params_view(
                        blk.aligners[f], cfg.block.aligner_variant);
                    fc.aligned = apply_aligner(ap, fc.k_rest, ngram_ptr, &fc.aligner_cache);
                    const FuserState fs = detail::fuser_state_view(
                        blk.fusers[f], cfg.block.fuser_mode,
                        blk.fusers[f].down.value.cols());
                    fc.k_rest_fused = fuse(fc.k_rest, fc.aligned, fs, &fc.fuse_cache);
                } else {
                    fc.k_rest_fused = fc.k_rest;
                }

                fc.self_mask = m.modal_masks[f].self;
                fc.cross_mask = m.modal_masks[f].cross;
                if (m.learnable_masks()) {
                    apply_mask_params(fc.self_mask, blk.mask_self_params[f].value.data());
                    apply_mask_params(fc.cross_mask, blk.mask_cross_params[f].value.data());
                }

                fc.self_attn = compiled_attention(fc.q, fc.k_self, fc.v_self, fc.self_mask,
                                                  attn_cfg, /*lenient=*/true);
                fc.cross_attn = compiled_attention(fc.q, fc.k_rest_fused, fc.v_rest,
                                                   fc.cross_mask, attn_cfg, /*lenient=*/true);

                Matrix out_f;
                if (cfg.block.combine == CombineMode::ConcatProject) {
                    fc.cat = hcat(fc.self_attn.output, fc.cross_attn.output);
                    out_f = matmul(fc.cat, blk.w_comb.value);
                } else {
                    out_f = add(fc.self_attn.output, fc.cross_attn.output);
                }
                for (std::size_t i = 0; i < sf.length; ++i)
                    for (std::size_t j = 0; j < d; ++j) attn_out(sf.start + i, j) = out_f(i, j);

                if (trace) {
                    // Each query row mixes its live parts equally; dead parts
                    // (no visible real key) are skipped so rows still sum to 1.
                    std::vector<std::size_t> self_cols(sf.length), cross_cols(sr.length);
                    for (std::size_t i = 0; i < sf.length; ++i) self_cols[i] = sf.start + i;
                    for (std::size_t i = 0; i < sr.length; ++i) cross_cols[i] = sr.start + i;
                    for (std::size_t i = 0; i < sf.length; ++i) {
                        const double self_mass = detail::real_key_mass(fc.self_attn, fc.self_mask, i);
                        const double cross_mass =
                            detail::real_key_mass(fc.cross_attn, fc.cross_mask, i);
                        const int live = (self_mass > 0.0) + (cross_mass > 0.0);
                        if (live == 0) continue;
                        const double w = 1.0 / live;
                        if (self_mass > 0.0)
                            detail::fold_trace_row(trace_rows, sf.start + i, fc.self_attn,
                                                   fc.self_mask, i, self_cols, w, self_mass);
                        if (cross_mass > 0.0)
                            detail::fold_trace_row(trace_rows, sf.start + i, fc.cross_attn,
                                                   fc.cross_mask, i, cross_cols, w, cross_mass);
                    }
                }
            }
        }

        x = add(bc.x_in, attn_out);
        if (trace) {
            TraceLayer layer;
            layer.layer_index = b;
            layer.weights = trace_rows;
            layer.segmentation = {segs[0], segs[1]};
            trace->append(std::move(layer));
        }
        if (cache) cache->blocks.push_back(std::move(bc));
    }

    Matrix head_in = x.slice_rows(n - 1, 1);  // final text position
    Matrix logits = add(matmul(head_in, m.head_w.value), m.head_b.value);
    if (cache) {
        cache->x_final = x;
        cache->head_in = head_in;
    }
    return logits;
}

// Embedding: one-hot rows through the per-modality tables, stacked.
inline Matrix hstack_embed(const Matrix& vis_onehot, const Matrix& txt_onehot,
                           const ModelState& m) {
    const Matrix ev = matmul(vis_onehot, m.embed_v.value);
    const Matrix et = matmul(txt_onehot, m.embed_t.value);
    Matrix out(ev.rows() + et.rows(), ev.cols());
    for (std::size_t i = 0; i < ev.rows(); ++i)
        for (std::size_t j = 0; j < ev.cols(); ++j) out(i, j) = ev(i, j);
    for (std::size_t i = 0; i < et.rows(); ++i)
        for (std::size_t j = 0; j < et.cols(); ++j) out(ev.rows() + i, j) = et(i, j);
    return out;
}

// ---------------------------------------------------------------------------
// Backward pass. Accumulates into the model's gradient buffers.
// ---------------------------------------------------------------------------

inline void model_backward(ModelState& m, const ForwardCache& cache, const Matrix& dlogits) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t d = cfg.block.d;
    const std::size_t nv = cfg.task.n_visual, nt = cfg.task.n_text;
    const std::size_t n = nv + nt;
    const AttentionConfig attn_cfg = AttentionConfig::scaled(d);
    const auto segs = detail::model_segments(cfg);

    // Head.
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t c = 0; c < cfg.n_classes; ++c)
            m.head_w.grad(i, c) += cache.head_in(0, i) * dlogits(0, c);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) m.head_b.grad(0, c) += dlogits(0, c);

    Matrix dx(n, d);
    {
        const Matrix dhead = matmul(dlogits, transpose(m.head_w.value));
        for (std::size_t j = 0; j < d; ++j) dx(n - 1, j) = dhead(0, j);
    }

    for (std::size_t b = cfg.n_blocks; b-- > 0;) {
        const BlockCache& bc = cache.blocks[b];
        BlockParams& blk = m.blocks[b];
        const Matrix d_attn_out = dx;  // residual: dx flows to both branches

        Matrix dq_full(n, d), dk_full(n, d), dv_full(n, d);

        if (!m.is_moda()) {
            for (std::size_t i = 0; i < bc.joint.output.rows(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    for (std::size_t t = 0; t < d; ++t)
                        blk.wo.grad(j, t) += bc.joint.output(i, j) * d_attn_out(i, t);
            const Matrix d_joint = matmul(d_attn_out, transpose(blk.wo.value));
            const AttnGrads g = compiled_attention_backward(bc.p.q, bc.p.k, bc.p.v, m.joint_mask,
                                                            attn_cfg, bc.joint, d_joint);
            dq_full = g.dq;
            dk_full = g.dk;
            dv_full = g.dv;
        } else {
            for (int f = 0; f < 2; ++f) {
                const FocusCache& fc = bc.focus[f];
                const Segment& sf = segs[f];
                const Segment& sr = segs[1 - f];

                Matrix d_out_f(sf.length, d);
                for (std::size_t i = 0; i < sf.length; ++i)
                    for (std::size_t j = 0; j < d; ++j) d_out_f(i, j) = d_attn_out(sf.start + i, j);

                Matrix d_o_self, d_o_cross;
                if (cfg.block.combine == CombineMode::ConcatProject) {
                    for (std::size_t i = 0; i < fc.cat.rows(); ++i)
                        for (std::size_t j = 0; j < 2 * d; ++j)
                            for (std::size_t t = 0; t < d; ++t)
                                blk.w_comb.grad(j, t) += fc.cat(i, j) * d_out_f(i, t);
                    const Matrix dcat = matmul(d_out_f, transpose(blk.w_comb.value));
                    d_o_self = Matrix(sf.length, d);
                    d_o_cross = Matrix(sf.length, d);
                    for (std::size_t i = 0; i < sf.length; ++i)
                        for (std::size_t j = 0; j < d; ++j) {
                            d_o_self(i, j) = dcat(i, j);
                            d_o_cross(i, j) = dcat(i, d + j);
                        }
                } else {
                    d_o_self = d_out_f;
                    d_o_cross = d_out_f;
                }

                const AttnGrads gs = compiled_attention_backward(
                    fc.q, fc.k_self, fc.v_self, fc.self_mask, attn_cfg, fc.self_attn, d_o_self);
                const AttnGrads gc = compiled_attention_backward(
                    fc.q, fc.k_rest_fused, fc.v_rest, fc.cross_mask, attn_cfg, fc.cross_attn,
                    d_o_cross);

                if (m.learnable_masks()) {
                    Tensor& sp = blk.mask_self_params[f];
                    for (std::size_t idx = 0; idx < fc.self_mask.param_positions.size(); ++idx) {
                        const auto [pi, pj] = fc.self_mask.param_positions[idx];
                        sp.grad(0, idx) += gs.dscores(pi, pj);
                    }
                    Tensor& cp = blk.mask_cross_params[f];
                    for (std::size_t idx = 0; idx < fc.cross_mask.param_positions.size(); ++idx) {
                        const auto [pi, pj] = fc.cross_mask.param_positions[idx];
                        cp.grad(0, idx) += gc.dscores(pi, pj);
                    }
                }

                Matrix dk_self = gs.dk;
                Matrix dk_rest(sr.length, d);

                if (cfg.block.use_daa) {
                    const FuserState fs = detail::fuser_state_view(
                        blk.fusers[f], cfg.block.fuser_mode, blk.fusers[f].down.value.cols());
                    const FuseGrads fg = fuse_backward(fs, fc.fuse_cache, gc.dk);
                    if (fs.mode == FuserMode::Add) {
                        for (std::size_t i = 0; i < fg.d_down.size(); ++i)
                            blk.fusers[f].down.grad.data()[i] += fg.d_down.data()[i];
                        for (std::size_t i = 0; i < fg.d_up.size(); ++i)
                            blk.fusers[f].up.grad.data()[i] += fg.d_up.data()[i];
                    } else if (fs.mode == FuserMode::Concat) {
                        for (std::size_t i = 0; i < fg.d_proj.size(); ++i)
                            blk.fusers[f].proj.grad.data()[i] += fg.d_proj.data()[i];
                    }
                    dk_rest = fg.d_original;

                    const AlignerParams ap = detail::aligner_params_view(
                        blk.aligners[f], cfg.block.aligner_variant);
                    const Matrix* ngram_ptr = fc.has_gram ? &fc.ngram : nullptr;
                    const AlignerGrads ag =
                        aligner_backward(ap, fc.aligner_cache, ngram_ptr, fg.d_aligned);
                    dk_rest = add(dk_rest, ag.dx);
                    blk.aligners[f].w1.grad = add(blk.aligners[f].w1.grad, ag.dw1);
                    blk.aligners[f].b1.grad = add(blk.aligners[f].b1.grad, ag.db1);
                    if (aligner_has_second_layer(cfg.block.aligner_variant)) {
                        blk.aligners[f].w2.grad = add(blk.aligners[f].w2.grad, ag.dw2);
                        blk.aligners[f].b2.grad = add(blk.aligners[f].b2.grad, ag.db2);
                    }
                    if (fc.has_gram) {
                        const Matrix dg = normalize_gram_backward(fc.gram, ag.dngram);
                        dk_self = add(dk_self, gram_backward(fc.k_self, dg));
                    }
                } else {
                    dk_rest = gc.dk;
                }

                for (std::size_t i = 0; i < sf.length; ++i)
                    for (std::size_t j = 0; j < d; ++j) {
                        dq_full(sf.start + i, j) += gs.dq(i, j) + gc.dq(i, j);
                        dk_full(sf.start + i, j) += dk_self(i, j);
                        dv_full(sf.start + i, j) += gs.dv(i, j);
                    }
                for (std::size_t i = 0; i < sr.length; ++i)
                    for (std::size_t j = 0; j < d; ++j) {
                        dk_full(sr.start + i, j) += dk_rest(i, j);
                        dv_full(sr.start + i, j) += gc.dv(i, j);
                    }
            }
        }

        // Projection backward.
        const Matrix xt = transpose(bc.x_in);
        blk.wq.grad = add(blk.wq.grad, matmul(xt, dq_full));
        blk.wk.grad = add(blk.wk.grad, matmul(xt, dk_full));
        blk.wv.grad = add(blk.wv.grad, matmul(xt, dv_full));
        Matrix dx_proj = matmul(dq_full, transpose(blk.wq.value));
        dx_proj = add(dx_proj, matmul(dk_full, transpose(blk.wk.value)));
        dx_proj = add(dx_proj, matmul(dv_full, transpose(blk.wv.value)));
        dx = add(dx, dx_proj);  // residual skip + attention branch
    }

    // Embeddings.
    m.pos.grad = add(m.pos.grad, dx);
    const Matrix dx_v = dx.slice_rows(0, nv);
    const Matrix dx_t = dx.slice_rows(nv, nt);
    m.embed_v.grad = add(m.embed_v.grad, matmul(transpose(cache.vis_onehot), dx_v));
    m.embed_t.grad = add(m.embed_t.grad, matmul(transpose(cache.txt_onehot), dx_t));
}

// Spec-level wrapper: run forward for the input, then accumulate gradients
// for the upstream logit gradient.
inline void backward(ModelState& m, const ModalSequence& seq, const Matrix& dlogits) {
    ForwardCache cache;
    model_forward(m, seq, &cache);
    model_backward(m, cache, dlogits);
}

// Softmax cross entropy over the class logits; fills dlogits when given.
inline double cross_entropy(const Matrix& logits, int label, Matrix* dlogits = nullptr) {
    const std::size_t c = logits.cols();
    double mx = logits(0, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(0, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(logits(0, j) - mx);
    const double log_denom = std::log(denom) + mx;
    const double loss = log_denom - logits(0, label);
    if (dlogits) {
        *dlogits = Matrix(1, c);
        for (std::size_t j = 0; j < c; ++j)
            (*dlogits)(0, j) = std::exp(logits(0, j) - log_denom) - (j == static_cast<std::size_t>(label) ? 1.0 : 0.0);
    }
    return loss;
}

inline int argmax_class(const Matrix& logits) {
    int best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
        if (logits(0, j) > logits(0, best)) best = static_cast<int>(j);
    return best;
}

// ---------------------------------------------------------------------------
// Checkpoint (versioned JSON; float64 payloads round-trip exactly).
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const MaskSpec& s) {
    return {{"variant", mask_variant_name(s.variant)}, {"beta", s.beta},
            {"p_base", s.p_base},                      {"fixed_value", s.fixed_value},
            {"n", s.n}};
}

inline MaskVariant mask_variant_from_name(const std::string& name) {
    if (name == "inf") return MaskVariant::Inf;
    if (name == "fix") return MaskVariant::Fix;
    if (name == "learn") return MaskVariant::Learn;
    if (name == "special_token") return MaskVariant::SpecialToken;
    if (name == "pseudo") return MaskVariant::Pseudo;
    throw ConfigError("unknown mask variant: " + name);
}

inline AlignerVariant aligner_variant_from_name(const std::string& name) {
    if (name == "mlp") return AlignerVariant::Mlp;
    if (name == "mlp2") return AlignerVariant::Mlp2;
    if (name == "mlp_gelu") return AlignerVariant::MlpGelu;
    if (name == "cov") return AlignerVariant::Cov;
    throw ConfigError("unknown aligner variant: " + name);
}

inline FuserMode fuser_mode_from_name(const std::string& name) {
    if (name == "self_only") return FuserMode::SelfOnly;
    if (name == "aligned_only") return FuserMode::AlignedOnly;
    if (name == "concat") return FuserMode::Concat;
    if (name == "add") return FuserMode::Add;
    throw ConfigError("unknown fuser mode: " + name);
}

inline MaskSpec mask_spec_from_json(const nlohmann::json& j) {
    MaskSpec s;
    s.variant = mask_variant_from_name(j.at("variant").get<std::string>());
    s.beta = j.at("beta").get<double>();
    s.p_base = j.at("p_base").get<double>();
    s.fixed_value = j.at("fixed_value").get<double>();
    s.n = j.at("n").get<std::size_t>();
    return s;
}

inline nlohmann::json to_json(const ModelConfig& cfg) {
    return {{"n_blocks", cfg.n_blocks},
            {"n_classes", cfg.n_classes},
            {"seed", cfg.seed},
            {"visual_embed_scale", cfg.visual_embed_scale},
            {"text_embed_scale", cfg.text_embed_scale},
            {"pos_embed_scale", cfg.pos_embed_scale},
            {"block",
             {{"d", cfg.block.d},
              {"attention_kind", attention_kind_name(cfg.block.attention_kind)},
              {"use_mdm", cfg.block.use_mdm},
              {"use_daa", cfg.block.use_daa},
              {"mask_spec", to_json(cfg.block.mask_spec)},
              {"aligner_variant", aligner_variant_name(cfg.block.aligner_variant)},
              {"fuser_mode", fuser_mode_name(cfg.block.fuser_mode)},
              {"adapter_rank", cfg.block.adapter_rank},
              {"combine", combine_mode_name(cfg.block.combine)}}},
            {"task",
             {{"seed", cfg.task.seed},
              {"n_visual", cfg.task.n_visual},
              {"n_text", cfg.task.n_text},
              {"d", cfg.task.d},
              {"visual_vocab", cfg.task.visual_vocab},
              {"text_vocab", cfg.task.text_vocab},
              {"pattern", pattern_name(cfg.task.pattern)},
              {"anchor_index", cfg.task.anchor_index}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.n_blocks = j.at("n_blocks").get<std::size_t>();
    cfg.n_classes = j.at("n_classes").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.visual_embed_scale = j.at("visual_embed_scale").get<double>();
    cfg.text_embed_scale = j.at("text_embed_scale").get<double>();
    cfg.pos_embed_scale = j.at("pos_embed_scale").get<double>();
    const auto& b = j.at("block");
    cfg.block.d = b.at("d").get<std::size_t>();
    cfg.block.attention_kind = b.at("attention_kind").get<std::string>() == "baseline"
                                   ? AttentionKind::BaselineJoint
                                   : AttentionKind::Moda;
    cfg.block.use_mdm = b.at("use_mdm").get<bool>();
    cfg.block.use_daa = b.at("use_daa").get<bool>();
    cfg.block.mask_spec = mask_spec_from_json(b.at("mask_spec"));
    cfg.block.aligner_variant = aligner_variant_from_name(b.at("aligner_variant").get<std::string>());
    cfg.block.fuser_mode = fuser_mode_from_name(b.at("fuser_mode").get<std::string>());
    cfg.block.adapter_rank = b.at("adapter_rank").get<std::size_t>();
    cfg.block.combine = b.at("combine").get<std::string>() == "sum" ? CombineMode::Sum
                                                                    : CombineMode::ConcatProject;
    const auto& t = j.at("task");
    cfg.task.seed = t.at("seed").get<std::uint64_t>();
    cfg.task.n_visual = t.at("n_visual").get<std::size_t>();
    cfg.task.n_text = t.at("n_text").get<std::size_t>();
    cfg.task.d = t.at("d").get<std::size_t>();
    cfg.task.visual_vocab = t.at("visual_vocab").get<std::size_t>();
    cfg.task.text_vocab = t.at("text_vocab").get<std::size_t>();
    cfg.task.pattern = t.at("pattern").get<std::string>() == "anchor" ? PatternKind::Anchor
                                                                      : PatternKind::ParitySum;
    cfg.task.anchor_index = t.at("anchor_index").get<std::size_t>();
    return cfg;
}

inline nlohmann::json save_checkpoint(ModelState& m) {
    nlohmann::json params = nlohmann::json::array();
    for (const ParamRef& p : parameters(m))
        params.push_back({{"name", p.tensor->name},
                          {"rows", p.tensor->value.rows()},
                          {"cols", p.tensor->value.cols()},
                          {"data", p.tensor->value.data()}});
    return {{"schema_version", 1}, {"config", to_json(m.cfg)}, {"params", params}};
}

inline ModelState load_checkpoint(const nlohmann::json& j) {
    if (j.at("schema_version").get<int>() != 1)
        throw ConfigError("unsupported checkpoint schema version");
    ModelState m = init_model(model_config_from_json(j.at("config")));
    std::vector<ParamRef> refs = parameters(m);
    for (const auto& pj : j.at("params")) {
        const std::string name = pj.at("name").get<std::string>();
        bool found = false;
        for (ParamRef& r : refs) {
            if (r.tensor->name != name) continue;
            const auto data = pj.at("data").get<std::vector<double>>();
            if (data.size() != r.tensor->value.size())
                throw ConfigError("checkpoint size mismatch for " + name);
            r.tensor->value.data() = data;
            found = true;
            break;
        }
        if (!found) throw ConfigError("checkpoint parameter " + name + " not in model");
    }
    return m;
}

}  // namespace moda
