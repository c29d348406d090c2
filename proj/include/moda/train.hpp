// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moda/diagnostics.hpp"
#include "moda/errors.hpp"
#include "moda/model.hpp"
#include "moda/synthetic.hpp"

namespace moda {

struct TrainConfig {
    double lr = 2e-3;
    std::size_t steps = 2000;
    std::size_t batch = 16;
    std::size_t eval_every = 100;
    double weight_decay = 0.0;
    double warmup_frac = 0.03;
    std::size_t eval_samples = 200;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Cosine decay with linear warmup.
inline double cosine_lr(std::size_t step, std::size_t total, double base_lr, double warmup_frac) {
    if (total == 0) return base_lr;
    const std::size_t warmup = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                            warmup_frac * static_cast<double>(total)));
    if (step < warmup)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double progress = static_cast<double>(step - warmup) /
                            std::max(1.0, static_cast<double>(total - warmup));
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Decoupled weight decay Adam. Moment slots follow the parameter order of
// parameters(model), which is fixed for a given configuration.
class AdamW {
  public:
    AdamW(const std::vector<ParamRef>& params, double beta1, double beta2, double eps)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const ParamRef& p : params) {
            m_.emplace_back(p.tensor->value.rows(), p.tensor->value.cols());
            v_.emplace_back(p.tensor->value.rows(), p.tensor->value.cols());
        }
    }

    void step(std::vector<ParamRef>& params, double lr, double weight_decay) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            Matrix& value = params[p].tensor->value;
            const Matrix& grad = params[p].tensor->grad;
            Matrix& m = m_[p];
            Matrix& v = v_[p];
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = grad.data()[i];
                m.data()[i] = beta1_ * m.data()[i] + (1.0 - beta1_) * g;
                v.data()[i] = beta2_ * v.data()[i] + (1.0 - beta2_) * g * g;
                const double mhat = m.data()[i] / bc1;
                const double vhat = v.data()[i] / bc2;
                value.data()[i] -=
                    lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * value.data()[i]);
            }
        }
    }

  private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

struct EvalResult {
    double accuracy = 0.0;
    // Text-focus activation statistics per layer, aggregated over samples.
    std::vector<double> layer_self;
    std::vector<double> layer_cross;
    std::vector<double> layer_disparity;
    double mean_disparity = 0.0;
    AttentionTrace mean_trace;  // per-layer average attention maps
};

inline EvalResult evaluate(const ModelState& model, const std::vector<Sample>& samples) {
    EvalResult out;
    const std::size_t layers = model.cfg.n_blocks;
    out.layer_self.assign(layers, 0.0);
    out.layer_cross.assign(layers, 0.0);

    std::vector<Matrix> weight_sums;
    std::vector<std::vector<Segment>> segs(layers);
    std::size_t correct = 0;

    for (const Sample& s : samples) {
        AttentionTrace trace;
        const Matrix logits = model_forward(model, s.seq, nullptr, &trace);
        if (argmax_class(logits) == s.label) ++correct;
        for (std::size_t l = 0; l < layers; ++l) {
            ModalityPair pair;
            pair.focus = kTextModality;
            pair.rest = {kVisualModality};
            const Activation a = modality_activation(trace.layers[l], pair);
            out.layer_self[l] += a.self_mean;
            out.layer_cross[l] += a.cross_mean;
            if (weight_sums.size() <= l) {
                weight_sums.push_back(trace.layers[l].weights);
                segs[l] = trace.layers[l].segmentation;
            } else {
                weight_sums[l] = add(weight_sums[l], trace.layers[l].weights);
            }
        }
    }

    const double inv = samples.empty() ? 0.0 : 1.0 / static_cast<double>(samples.size());
    out.accuracy = static_cast<double>(correct) * inv;
    double disp_sum = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
        out.layer_self[l] *= inv;
        out.layer_cross[l] *= inv;
        const double d = (out.layer_self[l] == 0.0 && out.layer_cross[l] == 0.0)
                             ? 0.0
                             : disparity(out.layer_self[l], out.layer_cross[l]);
        out.layer_disparity.push_back(d);
        disp_sum += d;
    }
    out.mean_disparity = layers ? disp_sum / static_cast<double>(layers) : 0.0;

    for (std::size_t l = 0; l < weight_sums.size(); ++l) {
        TraceLayer layer;
        layer.layer_index = l;
        layer.weights = scale(weight_sums[l], inv);
        layer.segmentation = segs[l];
        out.mean_trace.append(std::move(layer));
    }
    return out;
}

struct MetricRow {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double accuracy = 0.0;
    double mean_disparity = 0.0;
    std::vector<double> layer_disparity;
};

struct TrainResult {
    std::vector<MetricRow> history;
    EvalResult final_eval;
};

// Minibatch AdamW training with a cosine schedule. Deterministic for a fixed
// (config, seed): sampling order, initialization, and arithmetic are all
// seeded, single-threaded, and platform-stable.
inline TrainResult train(ModelState& model, const std::vector<Sample>& dataset,
                         const TrainConfig& cfg) {
    if (dataset.empty())
        throw ConfigError("train: dataset must not be empty");
    std::vector<ParamRef> params = parameters(model);
    AdamW opt(params, cfg.beta1, cfg.beta2, cfg.eps);
    Rng batch_rng = Rng(cfg.seed).split("batches");

    const std::vector<Sample> eval_set =
        gen_synthetic_dataset(model.cfg.task, cfg.eval_samples, "eval");

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();  // forces a shuffle on first use

    TrainResult result;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        zero_grads(model);
        double loss_sum = 0.0;
        for (std::size_t k = 0; k < cfg.batch; ++k) {
            if (cursor >= order.size()) {
                for (std::size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[batch_rng.below(i)]);
                cursor = 0;
            }
            const Sample& s = dataset[order[cursor++]];
            try {
                ForwardCache fwd;
                const Matrix logits = model_forward(model, s.seq, &fwd);
                Matrix dlogits;
                loss_sum += cross_entropy(logits, s.label, &dlogits);
                model_backward(model, fwd, dlogits);
            } catch (const NonFiniteEntry&) {
                // Parameters already blew up; surface it as divergence.
                throw DivergedLoss("non-finite forward pass at step " + std::to_string(step));
            }
        }
        const double loss = loss_sum / static_cast<double>(cfg.batch);
        if (!std::isfinite(loss))
            throw DivergedLoss("loss diverged at step " + std::to_string(step));

        const double inv_batch = 1.0 / static_cast<double>(cfg.batch);
        for (const ParamRef& p : params)
            for (double& g : p.tensor->grad.data()) g *= inv_batch;

        const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        opt.step(params, lr, cfg.weight_decay);

        if (cfg.eval_every > 0 &&
            ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
            const EvalResult ev = evaluate(model, eval_set);
            MetricRow row;
            row.step = step + 1;
            row.lr = lr;
            row.loss = loss;
            row.accuracy = ev.accuracy;
            row.mean_disparity = ev.mean_disparity;
            row.layer_disparity = ev.layer_disparity;
            result.history.push_back(std::move(row));
        }
    }
    result.final_eval = evaluate(model, eval_set);
    return result;
}

// ---------------------------------------------------------------------------
// Ablation grids.
// ---------------------------------------------------------------------------

struct AblateRow {
    std::string label;
    double accuracy = 0.0;
    double mean_disparity = 0.0;
    double gamma = std::numeric_limits<double>::quiet_NaN();
};

// One grid row per configuration, trained and evaluated under identical
// seeds. gamma is the decay fit over the per-layer cross-modal activation.
inline std::vector<AblateRow> ablate(const ModelConfig& base,
                                     const std::vector<std::pair<std::string, BlockConfig>>& grid,
                                     const std::vector<Sample>& dataset, const TrainConfig& tc) {
    if (grid.empty())
        throw ConfigError("ablate: empty grid");
    std::vector<AblateRow> rows;
    for (const auto& [label, block] : grid) {
        ModelConfig cfg = base;
        cfg.block = block;
        ModelState model = init_model(cfg);
        const TrainResult tr = train(model, dataset, tc);
        AblateRow row;
        row.label = label;
        row.accuracy = tr.final_eval.accuracy;
        row.mean_disparity = tr.final_eval.mean_disparity;
        try {
            row.gamma = fit_decay(tr.final_eval.layer_cross).gamma;
        } catch (const NonPositiveSeries&) {
            // cross-modal activation collapsed to zero on some layer
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// The four toggle rows: plain joint attention, masks only, aligner only,
// both. Other block settings stay at the supplied defaults.
inline std::vector<std::pair<std::string, BlockConfig>> module_grid(const BlockConfig& dflt) {
    BlockConfig baseline = dflt;
    baseline.attention_kind = AttentionKind::BaselineJoint;
    baseline.use_mdm = false;
    baseline.use_daa = false;
    BlockConfig mdm = dflt;
    mdm.attention_kind = AttentionKind::Moda;
    mdm.use_mdm = true;
    mdm.use_daa = false;
    BlockConfig daa = dflt;
    daa.attention_kind = AttentionKind::Moda;
    daa.use_mdm = false;
    daa.use_daa = true;
    BlockConfig both = dflt;
    both.attention_kind = AttentionKind::Moda;
    both.use_mdm = true;
    both.use_daa = true;
    return {{"baseline", baseline}, {"mdm", mdm}, {"daa", daa}, {"mdm+daa", both}};
}

inline std::vector<std::pair<std::string, BlockConfig>> aligner_grid(const BlockConfig& dflt) {
    std::vector<std::pair<std::string, BlockConfig>> grid;
    for (AlignerVariant v : {AlignerVariant::Mlp, AlignerVariant::Mlp2, AlignerVariant::MlpGelu,
                             AlignerVariant::Cov}) {
        BlockConfig c = dflt;
        c.attention_kind = AttentionKind::Moda;
        c.use_daa = true;
        c.aligner_variant = v;
        grid.emplace_back(aligner_variant_name(v), c);
    }
    return grid;
}

inline std::vector<std::pair<std::string, BlockConfig>> fusion_grid(const BlockConfig& dflt) {
    std::vector<std::pair<std::string, BlockConfig>> grid;
    for (FuserMode mode : {FuserMode::SelfOnly, FuserMode::AlignedOnly, FuserMode::Concat,
                           FuserMode::Add}) {
        BlockConfig c = dflt;
        c.attention_kind = AttentionKind::Moda;
        c.use_daa = true;
        c.fuser_mode = mode;
        grid.emplace_back(fuser_mode_name(mode), c);
    }
    return grid;
}

inline std::vector<std::pair<std::string, BlockConfig>> mask_grid(const BlockConfig& dflt) {
    std::vector<std::pair<std::string, BlockConfig>> grid;
    for (MaskVariant v : {MaskVariant::Inf, MaskVariant::Fix, MaskVariant::Learn,
                          MaskVariant::SpecialToken}) {
        BlockConfig c = dflt;
        c.attention_kind = AttentionKind::Moda;
        c.use_mdm = true;
        c.mask_spec.variant = v;
        grid.emplace_back(mask_variant_name(v), c);
    }
    return grid;
}

inline std::vector<std::pair<std::string, BlockConfig>> standard_grid(const BlockConfig& dflt,
                                                                      const std::string& axis) {
    if (axis == "module") return module_grid(dflt);
    if (axis == "aligner") return aligner_grid(dflt);
    if (axis == "fusion") return fusion_grid(dflt);
    if (axis == "mask") return mask_grid(dflt);
    throw ConfigError("unknown ablation axis: " + axis);
}

}  // namespace moda
