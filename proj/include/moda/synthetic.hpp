// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moda/errors.hpp"
#include "moda/matrix.hpp"
#include "moda/modality.hpp"
#include "moda/rng.hpp"

namespace moda {

constexpr ModalityId kVisualModality = 0;
constexpr ModalityId kTextModality = 1;

enum class PatternKind {
    Anchor,     // label = parity of the visual token at a fixed position
    ParitySum,  // label = parity of the sum of all visual tokens
};

inline std::string pattern_name(PatternKind p) {
    return p == PatternKind::Anchor ? "anchor" : "parity_sum";
}

// Paired-modality classification task. The label depends on the visual
// tokens only, so it can reach the text-side read-out position solely
// through cross-modal attention; text tokens are sampled independently and
// carry no label information.
struct SyntheticTask {
    std::uint64_t seed = 0;
    std::size_t n_visual = 8;
    std::size_t n_text = 8;
    std::size_t d = 32;  // token width; vocab ids are one-hot in the leading columns
    std::size_t visual_vocab = 8;
    std::size_t text_vocab = 8;
    PatternKind pattern = PatternKind::Anchor;
    std::size_t anchor_index = 0;

    bool position_sensitive() const { return pattern == PatternKind::Anchor; }

    void validate() const {
        if (n_visual < 1 || n_text < 1)
            throw ConfigError("task needs at least one token per modality");
        if (visual_vocab < 2 || text_vocab < 2)
            throw ConfigError("vocabularies need at least two symbols");
        if (visual_vocab % 2 != 0)
            throw ConfigError("visual vocabulary must be even for balanced labels");
        if (visual_vocab > d || text_vocab > d)
            throw ConfigError("one-hot ids need vocab <= d");
        if (anchor_index >= n_visual)
            throw ConfigError("anchor index outside the visual block");
    }
};

struct Sample {
    ModalSequence seq;
    std::vector<int> visual_ids;
    std::vector<int> text_ids;
    int label = 0;
};

inline int pattern_label(const SyntheticTask& task, const std::vector<int>& visual_ids) {
    switch (task.pattern) {
        case PatternKind::Anchor:
            return visual_ids[task.anchor_index] % 2;
        case PatternKind::ParitySum: {
            int sum = 0;
            for (int v : visual_ids) sum += v;
            return sum % 2;
        }
    }
    return 0;
}

// One-hot token rows for a list of ids.
inline Matrix onehot_rows(const std::vector<int>& ids, std::size_t d) {
    Matrix m(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) m(i, ids[i]) = 1.0;
    return m;
}

inline ModalSequence task_sequence(const SyntheticTask& task, const std::vector<int>& visual_ids,
                                   const std::vector<int>& text_ids) {
    return concat({{kVisualModality, onehot_rows(visual_ids, task.d)},
                   {kTextModality, onehot_rows(text_ids, task.d)}});
}

inline Sample make_sample(const SyntheticTask& task, Rng& rng) {
    std::vector<int> visual_ids(task.n_visual), text_ids(task.n_text);
    for (int& v : visual_ids) v = static_cast<int>(rng.below(task.visual_vocab));
    for (int& t : text_ids) t = static_cast<int>(rng.below(task.text_vocab));
    const int label = pattern_label(task, visual_ids);
    return Sample{task_sequence(task, visual_ids, text_ids), std::move(visual_ids),
                  std::move(text_ids), label};
}

// Deterministic under the task seed; the `stream` label separates train,
// eval, and other consumers.
inline std::vector<Sample> gen_synthetic_dataset(const SyntheticTask& task, std::size_t count,
                                                 std::string_view stream = "train") {
    task.validate();
    if (count < 1)
        throw ConfigError("dataset count must be >= 1");
    Rng rng = Rng(task.seed).split("synthetic").split(stream);
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(make_sample(task, rng));
    return out;
}

}  // namespace moda
