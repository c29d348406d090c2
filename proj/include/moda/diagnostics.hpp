// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moda/errors.hpp"
#include "moda/matrix.hpp"
#include "moda/modality.hpp"

namespace moda {

// Attention maps recorded during a forward pass, one entry per layer. Rows
// are distributions over real key tokens (pseudo and sink mass is
// renormalized away before recording), so every row sums to 1.
struct TraceLayer {
    std::size_t layer_index = 0;
    Matrix weights;  // N x N over token positions
    std::vector<Segment> segmentation;
};

struct AttentionTrace {
    std::vector<TraceLayer> layers;

    void append(TraceLayer layer) {
        if (!layers.empty() && layer.layer_index <= layers.back().layer_index)
            throw DimMismatch("trace layer indices must increase");
        for (std::size_t i = 0; i < layer.weights.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < layer.weights.cols(); ++j) s += layer.weights(i, j);
            if (std::abs(s - 1.0) > 1e-10)
                throw DimMismatch("trace row " + std::to_string(i) + " sums to " +
                                  std::to_string(s));
        }
        layers.push_back(std::move(layer));
    }
};

struct Activation {
    double self_mean = 0.0;
    double cross_mean = 0.0;
};

// Mean attention weight over (query, key) pairs that stay inside the focus
// modality (self) and those that leave it (cross).
inline Activation modality_activation(const TraceLayer& layer, const ModalityPair& pair) {
    const Segment* focus = nullptr;
    for (const auto& s : layer.segmentation)
        if (s.modality == pair.focus) focus = &s;
    if (!focus)
        throw UnknownModality("modality_activation: focus " + std::to_string(pair.focus));

    double self_sum = 0.0, cross_sum = 0.0;
    std::size_t self_n = 0, cross_n = 0;
    for (std::size_t i = focus->start; i < focus->start + focus->length; ++i) {
        for (const auto& s : layer.segmentation) {
            const bool is_focus = s.modality == pair.focus;
            for (std::size_t j = s.start; j < s.start + s.length; ++j) {
                if (is_focus) {
                    self_sum += layer.weights(i, j);
                    ++self_n;
                } else {
                    cross_sum += layer.weights(i, j);
                    ++cross_n;
                }
            }
        }
    }
    Activation a;
    a.self_mean = self_n ? self_sum / static_cast<double>(self_n) : 0.0;
    a.cross_mean = cross_n ? cross_sum / static_cast<double>(cross_n) : 0.0;
    return a;
}

// Normalized gap between self- and cross-modal activation, as a percentage
// of the larger mean. Symmetric, in [0, 100].
inline double disparity(double self_mean, double cross_mean) {
    if (self_mean < 0.0 || cross_mean < 0.0)
        throw std::invalid_argument("disparity: means must be nonnegative");
    const double mx = std::max(self_mean, cross_mean);
    if (mx == 0.0)
        throw BothZero("disparity: both activation means are zero");
    return 100.0 * std::abs(self_mean - cross_mean) / mx;
}

struct DecayFit {
    double gamma = 1.0;
    double scale = 1.0;             // c in value_l ~= c * gamma^l
    std::vector<double> residuals;  // multiplicative, value_l / (c * gamma^l)
};

// Least-squares fit of log(value_l) = log(c) + l * log(gamma), layers
// numbered 1..L.
inline DecayFit fit_decay(const std::vector<double>& series) {
    if (series.size() < 2)
        throw NonPositiveSeries("fit_decay: need at least two layers");
    for (double v : series)
        if (!(v > 0.0) || !std::isfinite(v))
            throw NonPositiveSeries("fit_decay: series must be positive and finite");

    const std::size_t n = series.size();
    double x_mean = 0.0, y_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        x_mean += static_cast<double>(i + 1);
        y_mean += std::log(series[i]);
    }
    x_mean /= static_cast<double>(n);
    y_mean /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = static_cast<double>(i + 1) - x_mean;
        sxy += dx * (std::log(series[i]) - y_mean);
        sxx += dx * dx;
    }
    const double slope = sxy / sxx;
    const double intercept = y_mean - slope * x_mean;

    DecayFit fit;
    fit.gamma = std::exp(slope);
    fit.scale = std::exp(intercept);
    fit.residuals.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double predicted = std::exp(intercept + slope * static_cast<double>(i + 1));
        fit.residuals.push_back(series[i] / predicted);
    }
    return fit;
}

// Cumulative cross-modal interaction error: product over l = 1..L of
// gamma^l * eps_l, accumulated in log space so deep stacks do not underflow
// midway.
inline double cumulative_dda(double gamma, const std::vector<double>& eps) {
    double log_acc = 0.0;
    double sign = 1.0;
    for (std::size_t l = 1; l <= eps.size(); ++l) {
        const double e = eps[l - 1];
        if (!std::isfinite(e))
            throw NonFiniteEntry("cumulative_dda: non-finite residual");
        const double term_sign = (gamma < 0.0 && (l % 2 == 1) ? -1.0 : 1.0) * (e < 0.0 ? -1.0 : 1.0);
        if (gamma == 0.0 || e == 0.0) return 0.0;
        sign *= term_sign;
        log_acc += static_cast<double>(l) * std::log(std::abs(gamma)) + std::log(std::abs(e));
    }
    return sign * std::exp(log_acc);
}

struct DecayProfile {
    double gamma = 1.0;
    std::vector<double> residuals;
    double e_dda = 1.0;
};

inline DecayProfile make_decay_profile(const std::vector<double>& series) {
    const DecayFit fit = fit_decay(series);
    DecayProfile p;
    p.gamma = fit.gamma;
    p.residuals = fit.residuals;
    p.e_dda = cumulative_dda(fit.gamma, fit.residuals);
    return p;
}

// ---------------------------------------------------------------------------
// Trace export: JSON summary (+ optional heatmaps) and a CSV companion with
// one row per (layer, modality, metric).
// ---------------------------------------------------------------------------

inline nlohmann::json trace_summary_json(const AttentionTrace& trace, bool include_heatmaps) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : trace.layers) {
        nlohmann::json mods = nlohmann::json::array();
        for (const auto& seg : layer.segmentation) {
            ModalityPair pair;
            pair.focus = seg.modality;
            for (const auto& other : layer.segmentation)
                if (other.modality != seg.modality) pair.rest.push_back(other.modality);
            const Activation act = modality_activation(layer, pair);
            const double disp =
                (act.self_mean == 0.0 && act.cross_mean == 0.0)
                    ? 0.0
                    : disparity(act.self_mean, act.cross_mean);
            mods.push_back({{"modality", seg.modality},
                            {"self_mean", act.self_mean},
                            {"cross_mean", act.cross_mean},
                            {"disparity", disp}});
        }
        nlohmann::json segs = nlohmann::json::array();
        for (const auto& s : layer.segmentation)
            segs.push_back({{"modality", s.modality}, {"start", s.start}, {"length", s.length}});
        nlohmann::json entry = {{"layer", layer.layer_index},
                                {"segmentation", segs},
                                {"modalities", mods}};
        if (include_heatmaps)
            entry["heatmap"] = {{"rows", layer.weights.rows()},
                                {"cols", layer.weights.cols()},
                                {"data", layer.weights.data()}};
        layers.push_back(entry);
    }
    return {{"schema_version", 1},
            {"disparity_definition", "100*|self_mean-cross_mean|/max(self_mean,cross_mean)"},
            {"note", "rows are renormalized over real key tokens; sink/pseudo mass excluded"},
            {"layers", layers}};
}

inline void export_trace(const AttentionTrace& trace, const std::string& path,
                         bool include_heatmaps = false) {
    const nlohmann::json doc = trace_summary_json(trace, include_heatmaps);
    std::ofstream json_out(path);
    if (!json_out)
        throw IoFailure("export_trace: cannot write " + path);
    json_out << doc.dump(2) << "\n";
    if (!json_out.good())
        throw IoFailure("export_trace: write failed for " + path);

    std::string csv_path = path;
    const std::string ext = ".json";
    if (csv_path.size() >= ext.size() &&
        csv_path.compare(csv_path.size() - ext.size(), ext.size(), ext) == 0)
        csv_path.resize(csv_path.size() - ext.size());
    csv_path += ".csv";
    std::ofstream csv(csv_path);
    if (!csv)
        throw IoFailure("export_trace: cannot write " + csv_path);
    csv << "layer,modality,metric,value\n";
    char buf[64];
    for (const auto& layer : doc.at("layers")) {
        for (const auto& mod : layer.at("modalities")) {
            for (const char* metric : {"self_mean", "cross_mean", "disparity"}) {
                std::snprintf(buf, sizeof(buf), "%.17g", mod.at(metric).get<double>());
                csv << layer.at("layer").get<std::size_t>() << ","
                    << mod.at("modality").get<ModalityId>() << "," << metric << "," << buf
                    << "\n";
            }
        }
    }
    if (!csv.good())
        throw IoFailure("export_trace: write failed for " + csv_path);
}

}  // namespace moda
