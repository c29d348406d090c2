// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moda/errors.hpp"
#include "moda/model.hpp"
#include "moda/train.hpp"

namespace moda {

// Run settings parsed from a sectioned key = value file. Unknown sections or
// keys are rejected with their line number; the seed is mandatory so every
// artifact is reproducible.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    ModelConfig model;
    TrainConfig train;
    std::size_t train_samples = 2048;
    std::string diag_series = "cross_mean";  // cross_mean | self_mean
    ModalityId diag_modality = kTextModality;
    std::string ablate_axis = "module";
    bool export_heatmaps = false;
};

namespace detail {

struct ConfigEntry {
    std::string value;
    int line = 0;
    bool used = false;
};

using ConfigMap = std::map<std::string, ConfigEntry>;

inline ConfigMap parse_ini(std::istream& in) {
    ConfigMap entries;
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string s = line;
        if (const auto hash = s.find('#'); hash != std::string::npos) s.resize(hash);
        const auto strip = [](std::string& t) {
            const auto b = t.find_first_not_of(" \t\r");
            const auto e = t.find_last_not_of(" \t\r");
            t = (b == std::string::npos) ? "" : t.substr(b, e - b + 1);
        };
        strip(s);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']')
                throw ConfigError("line " + std::to_string(line_no) + ": unterminated section");
            section = s.substr(1, s.size() - 2);
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        std::string key = s.substr(0, eq), value = s.substr(eq + 1);
        strip(key);
        strip(value);
        if (key.empty())
            throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        const std::string full = section.empty() ? key : section + "." + key;
        if (entries.count(full))
            throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + full +
                              "'");
        entries[full] = ConfigEntry{value, line_no, false};
    }
    return entries;
}

inline std::string where(const ConfigEntry& e) { return "line " + std::to_string(e.line); }

inline double to_double(const ConfigEntry& e, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(e.value, &pos);
        if (pos != e.value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw ConfigError(where(e) + ": '" + key + "' needs a number, got '" + e.value + "'");
    }
}

inline std::uint64_t to_u64(const ConfigEntry& e, const std::string& key) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(e.value, &pos);
        if (pos != e.value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw ConfigError(where(e) + ": '" + key + "' needs a nonnegative integer, got '" +
                          e.value + "'");
    }
}

inline bool to_bool(const ConfigEntry& e, const std::string& key) {
    if (e.value == "true" || e.value == "1") return true;
    if (e.value == "false" || e.value == "0") return false;
    throw ConfigError(where(e) + ": '" + key + "' needs true/false, got '" + e.value + "'");
}

class ConfigReader {
  public:
    explicit ConfigReader(ConfigMap entries) : entries_(std::move(entries)) {}

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    template <typename F>
    void with(const std::string& key, F&& apply) {
        auto it = entries_.find(key);
        if (it == entries_.end()) return;
        it->second.used = true;
        apply(it->second);
    }

    void reject_unknown() const {
        for (const auto& [key, e] : entries_)
            if (!e.used)
                throw ConfigError(where(e) + ": unknown key '" + key + "'");
    }

  private:
    ConfigMap entries_;
};

}  // namespace detail

inline RunConfig parse_run_config_text(const std::string& text,
                                       const std::uint64_t* seed_override = nullptr) {
    std::istringstream in(text);
    detail::ConfigReader reader(detail::parse_ini(in));
    RunConfig rc;

    bool seed_set = false;
    reader.with("seed", [&](const detail::ConfigEntry& e) {
        rc.seed = detail::to_u64(e, "seed");
        seed_set = true;
    });
    if (seed_override) {
        rc.seed = *seed_override;
        seed_set = true;
    }
    reader.with("output_dir", [&](const detail::ConfigEntry& e) { rc.output_dir = e.value; });

    // [model]
    reader.with("model.blocks",
                [&](const auto& e) { rc.model.n_blocks = detail::to_u64(e, "model.blocks"); });
    reader.with("model.d", [&](const auto& e) {
        rc.model.block.d = detail::to_u64(e, "model.d");
        rc.model.task.d = rc.model.block.d;
    });
    reader.with("model.attention", [&](const auto& e) {
        if (e.value == "baseline")
            rc.model.block.attention_kind = AttentionKind::BaselineJoint;
        else if (e.value == "moda")
            rc.model.block.attention_kind = AttentionKind::Moda;
        else
            throw ConfigError(detail::where(e) + ": model.attention must be baseline|moda");
    });
    reader.with("model.use_mdm",
                [&](const auto& e) { rc.model.block.use_mdm = detail::to_bool(e, "model.use_mdm"); });
    reader.with("model.use_daa",
                [&](const auto& e) { rc.model.block.use_daa = detail::to_bool(e, "model.use_daa"); });
    reader.with("model.mask", [&](const auto& e) {
        try {
            rc.model.block.mask_spec.variant = mask_variant_from_name(e.value);
        } catch (const ConfigError&) {
            throw ConfigError(detail::where(e) +
                              ": model.mask must be inf|fix|learn|special_token|pseudo");
        }
    });
    reader.with("model.beta",
                [&](const auto& e) { rc.model.block.mask_spec.beta = detail::to_double(e, "model.beta"); });
    reader.with("model.p_base", [&](const auto& e) {
        rc.model.block.mask_spec.p_base = detail::to_double(e, "model.p_base");
    });
    reader.with("model.fix_value", [&](const auto& e) {
        rc.model.block.mask_spec.fixed_value = detail::to_double(e, "model.fix_value");
    });
    reader.with("model.aligner", [&](const auto& e) {
        try {
            rc.model.block.aligner_variant = aligner_variant_from_name(e.value);
        } catch (const ConfigError&) {
            throw ConfigError(detail::where(e) + ": model.aligner must be mlp|mlp2|mlp_gelu|cov");
        }
    });
    reader.with("model.fuser", [&](const auto& e) {
        try {
            rc.model.block.fuser_mode = fuser_mode_from_name(e.value);
        } catch (const ConfigError&) {
            throw ConfigError(detail::where(e) +
                              ": model.fuser must be self_only|aligned_only|concat|add");
        }
    });
    reader.with("model.adapter_rank", [&](const auto& e) {
        rc.model.block.adapter_rank = detail::to_u64(e, "model.adapter_rank");
    });
    reader.with("model.combine", [&](const auto& e) {
        if (e.value == "concat")
            rc.model.block.combine = CombineMode::ConcatProject;
        else if (e.value == "sum")
            rc.model.block.combine = CombineMode::Sum;
        else
            throw ConfigError(detail::where(e) + ": model.combine must be concat|sum");
    });
    reader.with("model.visual_embed_scale", [&](const auto& e) {
        rc.model.visual_embed_scale = detail::to_double(e, "model.visual_embed_scale");
    });
    reader.with("model.text_embed_scale", [&](const auto& e) {
        rc.model.text_embed_scale = detail::to_double(e, "model.text_embed_scale");
    });
    reader.with("model.pos_embed_scale", [&](const auto& e) {
        rc.model.pos_embed_scale = detail::to_double(e, "model.pos_embed_scale");
    });

    // [task]
    reader.with("task.n_visual",
                [&](const auto& e) { rc.model.task.n_visual = detail::to_u64(e, "task.n_visual"); });
    reader.with("task.n_text",
                [&](const auto& e) { rc.model.task.n_text = detail::to_u64(e, "task.n_text"); });
    reader.with("task.visual_vocab", [&](const auto& e) {
        rc.model.task.visual_vocab = detail::to_u64(e, "task.visual_vocab");
    });
    reader.with("task.text_vocab",
                [&](const auto& e) { rc.model.task.text_vocab = detail::to_u64(e, "task.text_vocab"); });
    reader.with("task.pattern", [&](const auto& e) {
        if (e.value == "anchor")
            rc.model.task.pattern = PatternKind::Anchor;
        else if (e.value == "parity_sum")
            rc.model.task.pattern = PatternKind::ParitySum;
        else
            throw ConfigError(detail::where(e) + ": task.pattern must be anchor|parity_sum");
    });
    reader.with("task.anchor_index", [&](const auto& e) {
        rc.model.task.anchor_index = detail::to_u64(e, "task.anchor_index");
    });

    // [train]
    reader.with("train.lr", [&](const auto& e) { rc.train.lr = detail::to_double(e, "train.lr"); });
    reader.with("train.steps",
                [&](const auto& e) { rc.train.steps = detail::to_u64(e, "train.steps"); });
    reader.with("train.batch",
                [&](const auto& e) { rc.train.batch = detail::to_u64(e, "train.batch"); });
    reader.with("train.eval_every",
                [&](const auto& e) { rc.train.eval_every = detail::to_u64(e, "train.eval_every"); });
    reader.with("train.weight_decay", [&](const auto& e) {
        rc.train.weight_decay = detail::to_double(e, "train.weight_decay");
    });
    reader.with("train.warmup_frac", [&](const auto& e) {
        rc.train.warmup_frac = detail::to_double(e, "train.warmup_frac");
    });
    reader.with("train.eval_samples", [&](const auto& e) {
        rc.train.eval_samples = detail::to_u64(e, "train.eval_samples");
    });
    reader.with("train.samples",
                [&](const auto& e) { rc.train_samples = detail::to_u64(e, "train.samples"); });

    // [diag]
    reader.with("diag.series", [&](const auto& e) {
        if (e.value != "cross_mean" && e.value != "self_mean" && e.value != "disparity")
            throw ConfigError(detail::where(e) +
                              ": diag.series must be cross_mean|self_mean|disparity");
        rc.diag_series = e.value;
    });
    reader.with("diag.modality", [&](const auto& e) {
        if (e.value == "visual")
            rc.diag_modality = kVisualModality;
        else if (e.value == "text")
            rc.diag_modality = kTextModality;
        else
            throw ConfigError(detail::where(e) + ": diag.modality must be visual|text");
    });

    // [ablate]
    reader.with("ablate.axis", [&](const auto& e) {
        if (e.value != "module" && e.value != "aligner" && e.value != "fusion" &&
            e.value != "mask")
            throw ConfigError(detail::where(e) +
                              ": ablate.axis must be module|aligner|fusion|mask");
        rc.ablate_axis = e.value;
    });

    reader.with("export_heatmaps",
                [&](const auto& e) { rc.export_heatmaps = detail::to_bool(e, "export_heatmaps"); });

    reader.reject_unknown();
    if (!seed_set)
        throw ConfigError("seed is mandatory (set 'seed = <u64>' at the top level)");

    rc.model.seed = rc.seed;
    rc.model.task.seed = rc.seed;
    rc.train.seed = rc.seed;
    rc.model.validate();
    return rc;
}

inline RunConfig parse_run_config(const std::string& path,
                                  const std::uint64_t* seed_override = nullptr) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config_text(buf.str(), seed_override);
}

}  // namespace moda
