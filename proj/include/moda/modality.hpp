// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moda/errors.hpp"
#include "moda/matrix.hpp"

namespace moda {

using ModalityId = int;

struct Segment {
    ModalityId modality = 0;
    std::size_t start = 0;
    std::size_t length = 0;
};

// A token matrix (N x d) whose rows are partitioned into contiguous,
// non-overlapping modality blocks covering [0, N). Interleaved modalities are
// rejected at construction; arbitrary M >= 1 is supported.
class ModalSequence {
  public:
    ModalSequence(Matrix tokens, std::vector<Segment> segmentation)
        : tokens_(std::move(tokens)), segments_(std::move(segmentation)) {
        validate();
    }

    const Matrix& tokens() const { return tokens_; }
    const std::vector<Segment>& segments() const { return segments_; }
    std::size_t token_count() const { return tokens_.rows(); }
    std::size_t width() const { return tokens_.cols(); }

    bool has_modality(ModalityId m) const { return find(m) != nullptr; }

    const Segment& segment_info(ModalityId m) const {
        const Segment* s = find(m);
        if (!s) throw UnknownModality("modality " + std::to_string(m) + " not in sequence");
        return *s;
    }

    std::vector<ModalityId> modality_ids() const {
        std::vector<ModalityId> ids;
        ids.reserve(segments_.size());
        for (const auto& s : segments_) ids.push_back(s.modality);
        return ids;
    }

    // Modality of the token at global row index.
    ModalityId modality_at(std::size_t row) const {
        for (const auto& s : segments_)
            if (row >= s.start && row < s.start + s.length) return s.modality;
        throw UnknownModality("row " + std::to_string(row) + " outside segmentation");
    }

  private:
    const Segment* find(ModalityId m) const {
        for (const auto& s : segments_)
            if (s.modality == m) return &s;
        return nullptr;
    }

    void validate() const {
        if (segments_.empty())
            throw DimMismatch("sequence needs at least one segment");
        std::size_t expect = 0;
        std::set<ModalityId> seen;
        for (const auto& s : segments_) {
            if (s.start != expect)
                throw DimMismatch("segments must be contiguous from row 0");
            if (s.length == 0)
                throw DimMismatch("empty segment");
            if (!seen.insert(s.modality).second)
                throw DuplicateModality("modality " + std::to_string(s.modality) + " repeated");
            expect += s.length;
        }
        if (expect != tokens_.rows())
            throw DimMismatch("segments cover " + std::to_string(expect) + " rows, tokens have " +
                              std::to_string(tokens_.rows()));
    }

    Matrix tokens_;
    std::vector<Segment> segments_;
};

// Focus modality m against the remaining modalities m-bar.
struct ModalityPair {
    ModalityId focus = 0;
    std::vector<ModalityId> rest;
};

inline ModalityPair make_modality_pair(const ModalSequence& seq, ModalityId focus) {
    if (!seq.has_modality(focus))
        throw UnknownModality("focus modality " + std::to_string(focus) + " not in sequence");
    ModalityPair pair;
    pair.focus = focus;
    for (ModalityId id : seq.modality_ids())
        if (id != focus) pair.rest.push_back(id);
    return pair;
}

// The N_m x d token block of modality m (copy semantics).
inline Matrix segment(const ModalSequence& seq, ModalityId m) {
    const Segment& s = seq.segment_info(m);
    return seq.tokens().slice_rows(s.start, s.length);
}

inline ModalSequence concat(const std::vector<std::pair<ModalityId, Matrix>>& parts) {
    if (parts.empty())
        throw DimMismatch("concat: no parts");
    const std::size_t d = parts.front().second.cols();
    std::size_t n = 0;
    for (const auto& [id, m] : parts) {
        (void)id;
        if (m.cols() != d)
            throw DimMismatch("concat: width " + std::to_string(m.cols()) + " vs " + std::to_string(d));
        n += m.rows();
    }
    Matrix tokens(n, d);
    std::vector<Segment> segs;
    std::size_t row = 0;
    for (const auto& [id, m] : parts) {
        segs.push_back({id, row, m.rows()});
        for (std::size_t i = 0; i < m.rows(); ++i, ++row)
            for (std::size_t j = 0; j < d; ++j) tokens(row, j) = m(i, j);
    }
    return ModalSequence(std::move(tokens), std::move(segs));
}

inline nlohmann::json to_json(const ModalSequence& seq) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : seq.segments())
        segs.push_back({{"modality", s.modality}, {"start", s.start}, {"length", s.length}});
    return {{"rows", seq.token_count()},
            {"cols", seq.width()},
            {"segmentation", segs},
            {"data", seq.tokens().data()}};
}

inline ModalSequence modal_sequence_from_json(const nlohmann::json& j) {
    const std::size_t rows = j.at("rows").get<std::size_t>();
    const std::size_t cols = j.at("cols").get<std::size_t>();
    Matrix tokens(rows, cols);
    tokens.data() = j.at("data").get<std::vector<double>>();
    if (tokens.data().size() != rows * cols)
        throw DimMismatch("modal sequence json: data length mismatch");
    std::vector<Segment> segs;
    for (const auto& s : j.at("segmentation"))
        segs.push_back({s.at("modality").get<ModalityId>(), s.at("start").get<std::size_t>(),
                        s.at("length").get<std::size_t>()});
    return ModalSequence(std::move(tokens), std::move(segs));
}

}  // namespace moda
