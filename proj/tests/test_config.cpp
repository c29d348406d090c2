// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "moda/config.hpp"

using namespace moda;

TEST_CASE("minimal config parses with documented defaults") {
    const RunConfig rc = parse_run_config_text("seed = 7\n");
    REQUIRE(rc.seed == 7);
    REQUIRE(rc.output_dir == "out");
    REQUIRE(rc.model.n_blocks == 2);
    REQUIRE(rc.model.block.d == 32);
    REQUIRE(rc.model.block.attention_kind == AttentionKind::Moda);
    REQUIRE(rc.model.block.use_mdm);
    REQUIRE(rc.model.block.use_daa);
    REQUIRE(rc.model.block.mask_spec.variant == MaskVariant::Learn);
    REQUIRE(rc.model.block.mask_spec.beta == 0.1);
    REQUIRE(rc.model.block.aligner_variant == AlignerVariant::Cov);
    REQUIRE(rc.model.block.fuser_mode == FuserMode::Concat);
    REQUIRE(rc.train.lr == 2e-3);
    REQUIRE(rc.train.steps == 2000);
    REQUIRE(rc.model.seed == 7);
    REQUIRE(rc.model.task.seed == 7);
    REQUIRE(rc.train.seed == 7);
}

TEST_CASE("seed is mandatory") {
    REQUIRE_THROWS_AS(parse_run_config_text("output_dir = x\n"), ConfigError);
    const std::uint64_t seed = 5;
    const RunConfig rc = parse_run_config_text("output_dir = x\n", &seed);
    REQUIRE(rc.seed == 5);
}

TEST_CASE("seed override wins over the config value") {
    const std::uint64_t seed = 9;
    const RunConfig rc = parse_run_config_text("seed = 1\n", &seed);
    REQUIRE(rc.seed == 9);
}

TEST_CASE("unknown keys are rejected with their line number") {
    try {
        parse_run_config_text("seed = 1\n\nnonsense = 3\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("line 3") != std::string::npos);
        REQUIRE(std::string(e.what()).find("nonsense") != std::string::npos);
    }
    REQUIRE_THROWS_AS(parse_run_config_text("seed = 1\n[bogus]\nx = 2\n"), ConfigError);
}

TEST_CASE("malformed lines carry line numbers") {
    try {
        parse_run_config_text("seed = 1\nthis is not a key value pair\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }
    REQUIRE_THROWS_AS(parse_run_config_text("[model\nd = 4\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_run_config_text("seed = 1\nseed = 2\n"), ConfigError);
}

TEST_CASE("value validation") {
    REQUIRE_THROWS_AS(parse_run_config_text("seed = x\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_run_config_text("seed = 1\n[model]\nattention = wat\n"),
                      ConfigError);
    REQUIRE_THROWS_AS(parse_run_config_text("seed = 1\n[model]\nmask = nope\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_run_config_text("seed = 1\n[train]\nlr = fast\n"), ConfigError);
    REQUIRE_THROWS_AS(parse_run_config_text("seed = 1\n[model]\nuse_mdm = maybe\n"),
                      ConfigError);
    REQUIRE_THROWS_AS(
        parse_run_config_text("seed = 1\n[model]\nattention = moda\nuse_mdm = false\nuse_daa = false\n"),
        ConfigError);
}

TEST_CASE("model width propagates to the task") {
    const RunConfig rc = parse_run_config_text("seed = 1\n[model]\nd = 16\n");
    REQUIRE(rc.model.block.d == 16);
    REQUIRE(rc.model.task.d == 16);
}

TEST_CASE("comments and sections parse") {
    const RunConfig rc = parse_run_config_text(
        "# leading comment\n"
        "seed = 3   # trailing comment\n"
        "[task]\n"
        "n_visual = 4\n"
        "n_text = 6\n"
        "[train]\n"
        "steps = 12\n"
        "[diag]\n"
        "series = self_mean\n"
        "modality = visual\n"
        "[ablate]\n"
        "axis = mask\n");
    REQUIRE(rc.model.task.n_visual == 4);
    REQUIRE(rc.model.task.n_text == 6);
    REQUIRE(rc.train.steps == 12);
    REQUIRE(rc.diag_series == "self_mean");
    REQUIRE(rc.diag_modality == kVisualModality);
    REQUIRE(rc.ablate_axis == "mask");
}
