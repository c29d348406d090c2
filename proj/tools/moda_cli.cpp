// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: demo forwards, training runs, ablation grids,
// and decay diagnostics, all driven by a sectioned key = value config file.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "moda/moda.hpp"

namespace fs = std::filesystem;
using namespace moda;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitIo = 4;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

void ensure_output_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw IoFailure("cannot create output directory " + dir + ": " + ec.message());
}

std::ofstream open_output(const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw IoFailure("cannot write " + path);
    return out;
}

std::string timestamp_line() {
    const std::time_t now = std::time(nullptr);
    char buf[64];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    return std::string("# generated ") + buf + "Z";
}

std::string mask_matrix_report(const CompiledMask& mask) {
    std::ostringstream out;
    out << "mask variant: " << mask_variant_name(mask.variant) << ", logits "
        << mask.logits.rows() << "x" << mask.logits.cols() << "\n";
    for (std::size_t i = 0; i < mask.logits.rows(); ++i) {
        out << "  [";
        for (std::size_t j = 0; j < mask.logits.cols(); ++j) {
            if (j) out << ", ";
            const double v = mask.logits(i, j);
            if (v == kNegInf)
                out << "-inf";
            else
                out << fmt_short(v);
        }
        out << "]\n";
    }
    for (std::size_t i = 0; i < mask.logits.rows(); ++i) {
        out << "pseudo row " << i << ": [";
        bool first = true;
        for (std::size_t j = 0; j < mask.logits.cols(); ++j) {
            if (!mask.is_pseudo(i, j)) continue;
            if (!first) out << ", ";
            out << fmt_short(mask.logits(i, j));
            first = false;
        }
        out << "]\n";
    }
    return out.str();
}

int cmd_demo(const RunConfig& rc) {
    ensure_output_dir(rc.output_dir);
    std::ostringstream report;

    MaskSpec spec = rc.model.block.mask_spec;
    spec.n = rc.model.token_count();
    report << mask_matrix_report(compile_mask(spec));

    ModelState model = init_model(rc.model);
    const Sample sample = gen_synthetic_dataset(rc.model.task, 1, "demo")[0];
    ForwardCache cache;
    AttentionTrace trace;
    const Matrix logits = model_forward(model, sample.seq, &cache, &trace);

    report << "logits: [" << fmt_short(logits(0, 0)) << ", " << fmt_short(logits(0, 1)) << "]\n";

    const auto segs = std::array<Segment, 2>{Segment{kVisualModality, 0, rc.model.task.n_visual},
                                             Segment{kTextModality, rc.model.task.n_visual,
                                                     rc.model.task.n_text}};
    for (std::size_t b = 0; b < rc.model.n_blocks; ++b) {
        for (const Segment& s : segs) {
            const Matrix keys = cache.blocks[b].p.k.slice_rows(s.start, s.length);
            try {
                const GramMatrix gm = gram_matrix(keys, s.modality);
                report << "block " << b << " modality " << s.modality
                       << " gram norm: " << fmt_short(gm.norm_value) << "\n";
            } catch (const DegenerateGram&) {
                report << "block " << b << " modality " << s.modality << " gram norm: 0\n";
            }
        }
    }
    for (const TraceLayer& layer : trace.layers) {
        for (const Segment& s : segs) {
            ModalityPair pair;
            pair.focus = s.modality;
            pair.rest = {s.modality == kVisualModality ? kTextModality : kVisualModality};
            const Activation a = modality_activation(layer, pair);
            report << "layer " << layer.layer_index << " modality " << s.modality
                   << " self_mean " << fmt_short(a.self_mean) << " cross_mean "
                   << fmt_short(a.cross_mean) << "\n";
        }
    }

    std::cout << report.str();
    auto out = open_output(rc.output_dir + "/report.txt");
    out << report.str();
    return 0;
}

int cmd_train(const RunConfig& rc) {
    ensure_output_dir(rc.output_dir);
    const auto dataset = gen_synthetic_dataset(rc.model.task, rc.train_samples);
    ModelState model = init_model(rc.model);
    const TrainResult result = train(model, dataset, rc.train);

    {
        auto csv = open_output(rc.output_dir + "/metrics.csv");
        csv << timestamp_line() << "\n";
        csv << "step,lr,loss,accuracy,mean_disparity";
        for (std::size_t l = 0; l < rc.model.n_blocks; ++l) csv << ",disp_l" << l;
        csv << "\n";
        for (const MetricRow& row : result.history) {
            csv << row.step << "," << fmt(row.lr) << "," << fmt(row.loss) << ","
                << fmt(row.accuracy) << "," << fmt(row.mean_disparity);
            for (double d : row.layer_disparity) csv << "," << fmt(d);
            csv << "\n";
        }
        if (!csv.good())
            throw IoFailure("write failed for metrics.csv");
    }

    export_trace(result.final_eval.mean_trace, rc.output_dir + "/trace.json",
                 rc.export_heatmaps);
    {
        auto ckpt = open_output(rc.output_dir + "/model.json");
        ckpt << save_checkpoint(model).dump(2) << "\n";
        if (!ckpt.good())
            throw IoFailure("write failed for model.json");
    }

    std::cout << "steps " << rc.train.steps << " final accuracy "
              << fmt_short(result.final_eval.accuracy) << " mean disparity "
              << fmt_short(result.final_eval.mean_disparity) << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& rc) {
    ensure_output_dir(rc.output_dir);
    const auto grid = standard_grid(rc.model.block, rc.ablate_axis);
    const auto dataset = gen_synthetic_dataset(rc.model.task, rc.train_samples);
    const auto rows = ablate(rc.model, grid, dataset, rc.train);

    auto csv = open_output(rc.output_dir + "/ablation.csv");
    csv << timestamp_line() << "\n";
    csv << "config,accuracy,mean_disparity,gamma\n";
    for (const AblateRow& row : rows) {
        csv << row.label << "," << fmt(row.accuracy) << "," << fmt(row.mean_disparity) << ","
            << fmt(row.gamma) << "\n";
        std::cout << row.label << ": accuracy " << fmt_short(row.accuracy) << ", disparity "
                  << fmt_short(row.mean_disparity) << ", gamma " << fmt_short(row.gamma) << "\n";
    }
    if (!csv.good())
        throw IoFailure("write failed for ablation.csv");
    return 0;
}

int cmd_diagnose(const RunConfig& rc, const std::string& trace_path) {
    ensure_output_dir(rc.output_dir);
    std::ifstream in(trace_path);
    if (!in)
        throw IoFailure("cannot open trace file " + trace_path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoFailure("malformed trace file " + trace_path + ": " + e.what());
    }

    std::vector<double> series;
    try {
        for (const auto& layer : doc.at("layers")) {
            for (const auto& mod : layer.at("modalities")) {
                if (mod.at("modality").get<ModalityId>() != rc.diag_modality) continue;
                series.push_back(mod.at(rc.diag_series).get<double>());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoFailure("trace file misses required fields: " + std::string(e.what()));
    }

    const DecayProfile profile = make_decay_profile(series);
    std::ostringstream report;
    report << "series: " << rc.diag_series << " (modality " << rc.diag_modality << ", "
           << series.size() << " layers)\n";
    report << "gamma: " << fmt(profile.gamma) << "\n";
    report << "residuals:";
    for (double r : profile.residuals) report << " " << fmt_short(r);
    report << "\n";
    report << "e_dda: " << fmt(profile.e_dda) << "\n";

    std::cout << report.str();
    auto out = open_output(rc.output_dir + "/report.txt");
    out << report.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modular duplex attention workbench"};
    app.require_subcommand(1);

    struct Common {
        std::string config_path;
        std::string out_dir;
        std::uint64_t seed = 0;
        bool seed_given = false;
    };

    auto add_common = [](CLI::App* sub, Common& c) {
        sub->add_option("--config", c.config_path, "run configuration file")->required();
        sub->add_option("--out", c.out_dir, "output directory (overrides config)");
        sub->add_option("--seed", c.seed, "seed override")->each([&c](const std::string&) {
            c.seed_given = true;
        });
    };

    Common demo_c, train_c, ablate_c, diag_c;
    CLI::App* demo = app.add_subcommand("demo", "one forward pass with mask and gram report");
    add_common(demo, demo_c);
    CLI::App* train_cmd_app = app.add_subcommand("train", "train a model, emit metrics and trace");
    add_common(train_cmd_app, train_c);
    CLI::App* ablate_cmd_app = app.add_subcommand("ablate", "train a configuration grid");
    add_common(ablate_cmd_app, ablate_c);
    CLI::App* diag = app.add_subcommand("diagnose", "fit layer decay on an exported trace");
    add_common(diag, diag_c);
    std::string trace_path;
    diag->add_option("--trace", trace_path, "trace.json produced by train")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const auto run = [&](const Common& c, auto&& fn) {
        try {
            RunConfig rc = parse_run_config(c.config_path, c.seed_given ? &c.seed : nullptr);
            if (!c.out_dir.empty()) rc.output_dir = c.out_dir;
            return fn(rc);
        } catch (const ConfigError& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return kExitConfig;
        } catch (const DivergedLoss& e) {
            std::cerr << "training diverged: " << e.what() << "\n";
            return kExitDiverged;
        } catch (const IoFailure& e) {
            std::cerr << "io failure: " << e.what() << "\n";
            return kExitIo;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    };

    if (demo->parsed()) return run(demo_c, [](const RunConfig& rc) { return cmd_demo(rc); });
    if (train_cmd_app->parsed())
        return run(train_c, [](const RunConfig& rc) { return cmd_train(rc); });
    if (ablate_cmd_app->parsed())
        return run(ablate_c, [](const RunConfig& rc) { return cmd_ablate(rc); });
    if (diag->parsed())
        return run(diag_c, [&](const RunConfig& rc) { return cmd_diagnose(rc, trace_path); });
    return 1;
}
