// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>

#include "model_oracle.hpp"
#include "moda/model.hpp"
#include "moda/synthetic.hpp"
#include "moda/train.hpp"
#include "oracles.hpp"

using namespace moda;

namespace {

ModelConfig micro_config(std::uint64_t seed = 0) {
    ModelConfig cfg;
    cfg.n_blocks = 2;
    cfg.seed = seed;
    cfg.task.seed = seed;
    cfg.task.n_visual = 2;
    cfg.task.n_text = 2;
    cfg.task.d = 4;
    cfg.task.visual_vocab = 4;
    cfg.task.text_vocab = 3;
    cfg.block.d = 4;
    return cfg;
}

double model_loss(ModelState& m, const Sample& s) {
    return cross_entropy(model_forward(m, s.seq), s.label);
}

// Analytic gradients for one sample's cross-entropy loss.
void compute_grads(ModelState& m, const Sample& s) {
    zero_grads(m);
    ForwardCache cache;
    const Matrix logits = model_forward(m, s.seq, &cache);
    Matrix dlogits;
    cross_entropy(logits, s.label, &dlogits);
    model_backward(m, cache, dlogits);
}

double max_model_grad_err(ModelState& m, const Sample& s) {
    compute_grads(m, s);
    // Snapshot analytic grads; FD re-runs forward and would clobber them.
    std::vector<Matrix> analytic;
    for (const ParamRef& p : parameters(m)) analytic.push_back(p.tensor->grad);
    double worst = 0.0;
    std::size_t idx = 0;
    for (const ParamRef& p : parameters(m)) {
        const auto loss = [&] { return model_loss(m, s); };
        worst = std::max(worst, oracle::max_grad_err(p.tensor->value, analytic[idx], loss));
        ++idx;
    }
    return worst;
}

}  // namespace

TEST_CASE("zero-layer model applies the head to the embeddings") {
    ModelConfig cfg = micro_config();
    cfg.n_blocks = 0;
    ModelState m = init_model(cfg);
    const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];

    AttentionTrace trace;
    const Matrix logits = model_forward(m, s.seq, nullptr, &trace);
    REQUIRE(trace.layers.empty());

    const Matrix x0 = add(embed_tokens(s.seq.tokens().slice_rows(0, 2),
                                       s.seq.tokens().slice_rows(2, 2), m),
                          m.pos.value);
    const Matrix expect = add(matmul(x0.slice_rows(3, 1), m.head_w.value), m.head_b.value);
    for (std::size_t j = 0; j < 2; ++j) REQUIRE(logits(0, j) == expect(0, j));
}

TEST_CASE("identity start: zero-init adapters reduce to the split baseline") {
    ModelConfig moda_cfg = micro_config(3);
    moda_cfg.block.use_mdm = true;
    moda_cfg.block.use_daa = true;
    moda_cfg.block.mask_spec.variant = MaskVariant::Inf;
    moda_cfg.block.mask_spec.beta = 0.0;
    moda_cfg.block.fuser_mode = FuserMode::Add;  // zero-init up projection

    ModelConfig plain_cfg = moda_cfg;
    plain_cfg.block.use_daa = false;

    ModelState with_daa = init_model(moda_cfg);
    ModelState without = init_model(plain_cfg);

    const auto samples = gen_synthetic_dataset(moda_cfg.task, 50);
    for (const Sample& s : samples) {
        const Matrix a = model_forward(with_daa, s.seq);
        const Matrix b = model_forward(without, s.seq);
        for (std::size_t j = 0; j < a.size(); ++j)
            REQUIRE(std::abs(a.data()[j] - b.data()[j]) <= 1e-10);
    }
}

TEST_CASE("forward matches the straight-line scalar oracle") {
    for (const auto& [nv, nt] : std::vector<std::pair<std::size_t, std::size_t>>{
             {1, 1}, {2, 2}, {1, 3}}) {
        for (AttentionKind kind : {AttentionKind::BaselineJoint, AttentionKind::Moda}) {
            ModelConfig cfg = micro_config(0);
            cfg.task.n_visual = nv;
            cfg.task.n_text = nt;
            cfg.task.visual_vocab = 2;
            cfg.block.attention_kind = kind;
            ModelState m = init_model(cfg);
            const auto samples = gen_synthetic_dataset(cfg.task, 3);
            for (const Sample& s : samples) {
                const Matrix got = model_forward(m, s.seq);
                const auto expect = model_oracle::forward_scalar(m, s.visual_ids, s.text_ids);
                for (std::size_t c = 0; c < 2; ++c)
                    REQUIRE(std::abs(got(0, c) - expect[c]) <= 1e-10);
            }
        }
    }
}

TEST_CASE("forward oracle agreement across block variants") {
    int idx = 0;
    for (AlignerVariant av : {AlignerVariant::Mlp, AlignerVariant::Mlp2, AlignerVariant::MlpGelu,
                              AlignerVariant::Cov}) {
        for (FuserMode fm : {FuserMode::SelfOnly, FuserMode::AlignedOnly, FuserMode::Concat,
                             FuserMode::Add}) {
            ModelConfig cfg = micro_config(idx);
            cfg.block.aligner_variant = av;
            cfg.block.fuser_mode = fm;
            cfg.block.mask_spec.variant =
                std::array<MaskVariant, 4>{MaskVariant::Inf, MaskVariant::Fix, MaskVariant::Learn,
                                           MaskVariant::SpecialToken}[idx % 4];
            cfg.block.combine = (idx % 2) ? CombineMode::Sum : CombineMode::ConcatProject;
            ModelState m = init_model(cfg);
            const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];
            const Matrix got = model_forward(m, s.seq);
            const auto expect = model_oracle::forward_scalar(m, s.visual_ids, s.text_ids);
            for (std::size_t c = 0; c < 2; ++c)
                REQUIRE(std::abs(got(0, c) - expect[c]) <= 1e-10);
            ++idx;
        }
    }
}

TEST_CASE("model gradients match finite differences for every ablation-grid config") {
    const ModelConfig base = micro_config(1);
    std::vector<std::pair<std::string, BlockConfig>> grid;
    for (const char* axis : {"module", "aligner", "fusion", "mask"})
        for (auto& entry : standard_grid(base.block, axis)) grid.push_back(entry);
    // Off-grid settings with their own code paths.
    {
        BlockConfig sum = base.block;
        sum.combine = CombineMode::Sum;
        grid.emplace_back("sum_combine", sum);
        BlockConfig pseudo = base.block;
        pseudo.mask_spec.variant = MaskVariant::Pseudo;
        grid.emplace_back("pseudo_mask", pseudo);
    }

    for (const auto& [label, block] : grid) {
        ModelConfig cfg = base;
        cfg.block = block;
        ModelState m = init_model(cfg);
        const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];
        INFO(label);
        REQUIRE(max_model_grad_err(m, s) < 1e-5);
    }
}

TEST_CASE("zero upstream gradient produces zero parameter gradients") {
    ModelConfig cfg = micro_config(2);
    ModelState m = init_model(cfg);
    const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];
    zero_grads(m);
    ForwardCache cache;
    model_forward(m, s.seq, &cache);
    model_backward(m, cache, Matrix(1, 2));
    for (const ParamRef& p : parameters(m))
        for (double g : p.tensor->grad.data()) REQUIRE(g == 0.0);
}

TEST_CASE("gradients are linear in the upstream gradient") {
    ModelConfig cfg = micro_config(4);
    ModelState m = init_model(cfg);
    const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];

    ForwardCache cache;
    const Matrix logits = model_forward(m, s.seq, &cache);
    Matrix dlogits;
    cross_entropy(logits, s.label, &dlogits);

    zero_grads(m);
    model_backward(m, cache, dlogits);
    std::vector<Matrix> once;
    for (const ParamRef& p : parameters(m)) once.push_back(p.tensor->grad);

    zero_grads(m);
    model_backward(m, cache, scale(dlogits, 2.0));
    std::size_t idx = 0;
    for (const ParamRef& p : parameters(m)) {
        for (std::size_t i = 0; i < p.tensor->grad.size(); ++i)
            REQUIRE(p.tensor->grad.data()[i] ==
                    Catch::Approx(2.0 * once[idx].data()[i]).margin(1e-12));
        ++idx;
    }
}

TEST_CASE("trace has one normalized entry per block") {
    ModelConfig cfg = micro_config(5);
    cfg.n_blocks = 3;
    for (AttentionKind kind : {AttentionKind::BaselineJoint, AttentionKind::Moda}) {
        cfg.block.attention_kind = kind;
        ModelState m = init_model(cfg);
        const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];
        AttentionTrace trace;
        model_forward(m, s.seq, nullptr, &trace);
        REQUIRE(trace.layers.size() == 3);
        for (const TraceLayer& layer : trace.layers)
            for (std::size_t i = 0; i < layer.weights.rows(); ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < layer.weights.cols(); ++j)
                    sum += layer.weights(i, j);
                REQUIRE(std::abs(sum - 1.0) <= 1e-10);
            }
    }
}

TEST_CASE("one gram build per modality per layer per forward") {
    ModelConfig cfg = micro_config(6);
    cfg.n_blocks = 2;  // cov aligner by default
    ModelState m = init_model(cfg);
    const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];
    gram_build_count().store(0);
    model_forward(m, s.seq);
    REQUIRE(gram_build_count().load() == 2 * 2);
}

TEST_CASE("synthetic dataset is deterministic and balanced") {
    SyntheticTask task;
    task.seed = 11;
    const auto a = gen_synthetic_dataset(task, 1000);
    const auto b = gen_synthetic_dataset(task, 1000);
    int ones = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].visual_ids == b[i].visual_ids);
        REQUIRE(a[i].text_ids == b[i].text_ids);
        REQUIRE(a[i].label == b[i].label);
        for (std::size_t j = 0; j < a[i].seq.tokens().size(); ++j)
            REQUIRE(a[i].seq.tokens().data()[j] == b[i].seq.tokens().data()[j]);
        ones += a[i].label;
    }
    REQUIRE(ones >= 450);
    REQUIRE(ones <= 550);
}

TEST_CASE("text-only bigram classifier stays near chance") {
    SyntheticTask task;
    task.seed = 12;
    const auto train_set = gen_synthetic_dataset(task, 1000, "train");
    const auto eval_set = gen_synthetic_dataset(task, 1000, "eval");

    // Naive-Bayes over text bigrams with add-one smoothing.
    const std::size_t v = task.text_vocab;
    std::array<std::vector<double>, 2> counts{std::vector<double>(v * v, 1.0),
                                              std::vector<double>(v * v, 1.0)};
    std::array<double, 2> totals{static_cast<double>(v * v), static_cast<double>(v * v)};
    std::array<double, 2> priors{0.0, 0.0};
    for (const Sample& s : train_set) {
        priors[s.label] += 1.0;
        for (std::size_t i = 1; i < s.text_ids.size(); ++i) {
            counts[s.label][s.text_ids[i - 1] * v + s.text_ids[i]] += 1.0;
            totals[s.label] += 1.0;
        }
    }
    int correct = 0;
    for (const Sample& s : eval_set) {
        std::array<double, 2> score{std::log(priors[0] + 1.0), std::log(priors[1] + 1.0)};
        for (int c = 0; c < 2; ++c)
            for (std::size_t i = 1; i < s.text_ids.size(); ++i)
                score[c] += std::log(counts[c][s.text_ids[i - 1] * v + s.text_ids[i]] / totals[c]);
        correct += (score[1] > score[0] ? 1 : 0) == s.label;
    }
    const double acc = correct / 1000.0;
    REQUIRE(acc <= 0.6);  // chance + 10%
}

TEST_CASE("anchor pattern is position sensitive, parity sum is not") {
    SyntheticTask anchor;
    anchor.pattern = PatternKind::Anchor;
    anchor.anchor_index = 0;
    REQUIRE(anchor.position_sensitive());
    const std::vector<int> ids{0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<int> shuffled{1, 0, 2, 3, 4, 5, 6, 7};
    REQUIRE(pattern_label(anchor, ids) != pattern_label(anchor, shuffled));

    SyntheticTask parity;
    parity.pattern = PatternKind::ParitySum;
    REQUIRE_FALSE(parity.position_sensitive());
    std::vector<int> p = ids;
    for (int trial = 0; trial < 5; ++trial) {
        std::next_permutation(p.begin(), p.end());
        REQUIRE(pattern_label(parity, p) == pattern_label(parity, ids));
    }
}

TEST_CASE("train with zero learning rate changes nothing") {
    ModelConfig cfg = micro_config(7);
    ModelState m = init_model(cfg);
    const auto dataset = gen_synthetic_dataset(cfg.task, 1);

    std::vector<Matrix> before;
    for (const ParamRef& p : parameters(m)) before.push_back(p.tensor->value);

    TrainConfig tc;
    tc.lr = 0.0;
    tc.steps = 3;
    tc.batch = 1;
    tc.eval_every = 1;
    tc.eval_samples = 8;
    const TrainResult result = train(m, dataset, tc);

    std::size_t idx = 0;
    for (const ParamRef& p : parameters(m)) {
        for (std::size_t i = 0; i < p.tensor->value.size(); ++i)
            REQUIRE(p.tensor->value.data()[i] == before[idx].data()[i]);
        ++idx;
    }
    REQUIRE(result.history.size() == 3);
    for (const MetricRow& row : result.history)
        REQUIRE(row.loss == result.history.front().loss);
}

TEST_CASE("one optimizer step follows the AdamW update rule") {
    ModelConfig cfg = micro_config(8);
    ModelState reference = init_model(cfg);
    ModelState trained = init_model(cfg);
    const auto dataset = gen_synthetic_dataset(cfg.task, 2);

    // Batch-average gradients, computed independently of train().
    zero_grads(reference);
    for (const Sample& s : dataset) {
        ForwardCache cache;
        const Matrix logits = model_forward(reference, s.seq, &cache);
        Matrix dlogits;
        cross_entropy(logits, s.label, &dlogits);
        model_backward(reference, cache, dlogits);
    }
    for (const ParamRef& p : parameters(reference))
        for (double& g : p.tensor->grad.data()) g *= 0.5;

    TrainConfig tc;
    tc.lr = 1e-2;
    tc.steps = 1;
    tc.batch = 2;
    tc.eval_every = 0;
    tc.eval_samples = 4;
    tc.weight_decay = 0.0;
    train(trained, dataset, tc);

    auto ref_params = parameters(reference);
    auto new_params = parameters(trained);
    for (std::size_t p = 0; p < ref_params.size(); ++p)
        for (std::size_t i = 0; i < ref_params[p].tensor->value.size(); ++i) {
            const double g = ref_params[p].tensor->grad.data()[i];
            const double expected = ref_params[p].tensor->value.data()[i] -
                                    tc.lr * g / (std::abs(g) + tc.eps);
            REQUIRE(new_params[p].tensor->value.data()[i] ==
                    Catch::Approx(expected).margin(1e-12));
        }
}

TEST_CASE("a zero-gradient optimizer step changes nothing") {
    Tensor t = make_tensor("p", Matrix(2, 3, 0.5));
    std::vector<ParamRef> params{ParamRef{&t}};
    AdamW opt(params, 0.9, 0.999, 1e-8);
    opt.step(params, 0.1, /*weight_decay=*/0.0);
    for (double v : t.value.data()) REQUIRE(v == 0.5);
}

TEST_CASE("training is deterministic under a fixed seed") {
    ModelConfig cfg = micro_config(9);
    const auto dataset = gen_synthetic_dataset(cfg.task, 16);
    TrainConfig tc;
    tc.steps = 5;
    tc.batch = 4;
    tc.eval_every = 2;
    tc.eval_samples = 16;

    ModelState m1 = init_model(cfg);
    ModelState m2 = init_model(cfg);
    const TrainResult r1 = train(m1, dataset, tc);
    const TrainResult r2 = train(m2, dataset, tc);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        REQUIRE(r1.history[i].loss == r2.history[i].loss);
        REQUIRE(r1.history[i].accuracy == r2.history[i].accuracy);
        REQUIRE(r1.history[i].mean_disparity == r2.history[i].mean_disparity);
    }
}

TEST_CASE("diverging loss raises DivergedLoss") {
    ModelConfig cfg = micro_config(10);
    ModelState m = init_model(cfg);
    const auto dataset = gen_synthetic_dataset(cfg.task, 4);
    TrainConfig tc;
    tc.lr = 1e160;  // overflows the score matrix within a couple of steps
    tc.steps = 50;
    tc.batch = 4;
    tc.eval_every = 0;
    tc.eval_samples = 4;
    REQUIRE_THROWS_AS(train(m, dataset, tc), DivergedLoss);
}

TEST_CASE("checkpoint round-trip preserves every parameter bit") {
    ModelConfig cfg = micro_config(13);
    ModelState m = init_model(cfg);
    // Push parameters off their init values.
    const auto dataset = gen_synthetic_dataset(cfg.task, 4);
    TrainConfig tc;
    tc.steps = 3;
    tc.batch = 2;
    tc.eval_every = 0;
    tc.eval_samples = 4;
    train(m, dataset, tc);

    const std::string text = save_checkpoint(m).dump();
    ModelState restored = load_checkpoint(nlohmann::json::parse(text));

    auto orig = parameters(m);
    auto back = parameters(restored);
    REQUIRE(orig.size() == back.size());
    for (std::size_t p = 0; p < orig.size(); ++p) {
        REQUIRE(orig[p].tensor->name == back[p].tensor->name);
        for (std::size_t i = 0; i < orig[p].tensor->value.size(); ++i)
            REQUIRE(orig[p].tensor->value.data()[i] == back[p].tensor->value.data()[i]);
    }

    const Sample s = gen_synthetic_dataset(cfg.task, 1)[0];
    const Matrix a = model_forward(m, s.seq);
    const Matrix b = model_forward(restored, s.seq);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
}

TEST_CASE("ablation grid produces one deterministic row per config") {
    ModelConfig cfg = micro_config(14);
    const auto dataset = gen_synthetic_dataset(cfg.task, 8);
    TrainConfig tc;
    tc.steps = 2;
    tc.batch = 2;
    tc.eval_every = 0;
    tc.eval_samples = 8;

    const auto grid = module_grid(cfg.block);
    REQUIRE(grid.size() == 4);
    const auto rows = ablate(cfg, grid, dataset, tc);
    REQUIRE(rows.size() == 4);
    REQUIRE(rows[0].label == "baseline");
    REQUIRE(rows[3].label == "mdm+daa");

    // Duplicate configs yield identical rows under the same seeds.
    const auto twice = ablate(cfg, {grid[1], grid[1]}, dataset, tc);
    REQUIRE(twice[0].accuracy == twice[1].accuracy);
    REQUIRE(twice[0].mean_disparity == twice[1].mean_disparity);

    // A one-entry grid is exactly one train run.
    const auto single = ablate(cfg, {grid[3]}, dataset, tc);
    ModelConfig direct_cfg = cfg;
    direct_cfg.block = grid[3].second;
    ModelState direct = init_model(direct_cfg);
    const TrainResult tr = train(direct, dataset, tc);
    REQUIRE(single.size() == 1);
    REQUIRE(single[0].accuracy == tr.final_eval.accuracy);
    REQUIRE(single[0].mean_disparity == tr.final_eval.mean_disparity);
}

TEST_CASE("block config validation") {
    BlockConfig bc;
    bc.attention_kind = AttentionKind::Moda;
    bc.use_mdm = false;
    bc.use_daa = false;
    REQUIRE_THROWS_AS(bc.validate(), ConfigError);
}
