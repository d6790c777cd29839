// Adam, the training loop, sweeps and the truncation protocol.

#include <gtest/gtest.h>

#include "hsprobe/error.hpp"
#include "hsprobe/training.hpp"

#include <cmath>
#include <cstring>

using namespace hsprobe;

namespace {

ProbeSpec small_mlp_spec() {
    ProbeSpec s;
    s.arch = Architecture::mlp;
    s.mlp.hidden_dim = 16;
    s.mlp.n_layers = 2;
    return s;
}

TrainConfig quick(std::uint64_t seed = 1) {
    TrainConfig c;
    c.learning_rate = 1e-2;
    c.batch_size = 32;
    c.max_epochs = 15;
    c.patience = 4;
    c.seed = seed;
    return c;
}

std::vector<HiddenStateRecord> synth(std::size_t n, double sep, std::uint64_t seed, std::size_t dim = 6) {
    SynthOptions o;
    o.count = n;
    o.dim = dim;
    o.separation = sep;
    o.seed = seed;
    o.direction_seed = 99;
    o.max_question = 6;
    o.max_answer = 6;
    return synth_dataset(o);
}

}  // namespace

TEST(Adam, TwoHandIteratedSteps) {
    std::vector<double> x{1.0, -2.0};
    AdamState st;
    const AdamHyper h{0.1, 0.9, 0.999, 1e-8};

    adam_step(x, std::vector<double>{0.5, -1.0}, st, h);
    // step 1: m_hat = g, v_hat = g^2
    EXPECT_DOUBLE_EQ(x[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8));
    EXPECT_DOUBLE_EQ(x[1], -2.0 + 0.1 * 1.0 / (1.0 + 1e-8));
    EXPECT_EQ(st.step, 1u);

    const double x0 = x[0], x1 = x[1];
    adam_step(x, std::vector<double>{0.25, 0.0}, st, h);
    // m = 0.9 * 0.05 + 0.1 * 0.25 = 0.07, v = 0.999 * 0.00025 + 0.001 * 0.0625
    const double m0 = 0.07 / (1 - 0.81);
    const double v0 = (0.999 * 0.00025 + 0.001 * 0.0625) / (1 - 0.998001);
    const double m1 = (0.9 * -0.1) / (1 - 0.81);
    const double v1 = (0.999 * 0.001) / (1 - 0.998001);
    EXPECT_NEAR(x[0], x0 - 0.1 * m0 / (std::sqrt(v0) + 1e-8), 1e-15);
    EXPECT_NEAR(x[1], x1 - 0.1 * m1 / (std::sqrt(v1) + 1e-8), 1e-15);
}

TEST(Adam, NonFiniteGradientLeavesStateUntouched) {
    std::vector<double> x{1.0, 2.0};
    AdamState st;
    adam_step(x, std::vector<double>{0.1, 0.1}, st, {});
    const auto xs = x;
    const auto ss = st.m;
    try {
        adam_step(x, std::vector<double>{0.1, std::nan("")}, st, {});
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::non_finite);
    }
    EXPECT_EQ(x, xs);
    EXPECT_EQ(st.m, ss);
    EXPECT_EQ(st.step, 1u);
    EXPECT_THROW(adam_step(x, std::vector<double>{0.1}, st, {}), Error);
}

TEST(Adam, MinimisesQuadratic) {
    std::vector<double> x{3.0, -4.0};
    AdamState st;
    for (int i = 0; i < 2000; ++i) {
        adam_step(x, std::vector<double>{2 * x[0], 2 * x[1]}, st, {0.05, 0.9, 0.999, 1e-8});
    }
    EXPECT_NEAR(x[0], 0.0, 1e-3);
    EXPECT_NEAR(x[1], 0.0, 1e-3);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.learning_rate = 0;
    EXPECT_THROW(c.validate(), Error);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), Error);
    c = {};
    c.beta2 = 1.0;
    EXPECT_THROW(c.validate(), Error);
    c = {};
    c.positive_weight = -1.0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(CellSeed, SplitMix64) {
    // first splitmix64 output from state 0
    EXPECT_EQ(cell_seed(0, 0), 0xe220a8397b1dcdafULL);
    EXPECT_NE(cell_seed(5, 0), cell_seed(5, 1));
    EXPECT_EQ(cell_seed(5, 3), cell_seed(5, 3));
}

TEST(Train, LearnsAndIsDeterministic) {
    const auto data = synth(400, 3.0, 2);
    const auto parts = split(data, {0.6, 0.2, 0.2, 3});
    const auto a = train(small_mlp_spec(), parts.train, parts.val, quick());
    const auto b = train(small_mlp_spec(), parts.train, parts.val, quick());
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.history, b.history);
    EXPECT_GT(evaluate_probe(a.params, parts.test).auroc, 0.9);
    const auto c = train(small_mlp_spec(), parts.train, parts.val, quick(2));
    EXPECT_NE(c.params.values, a.params.values);
}

TEST(Train, ReturnsBestEpochAndStopsEarly) {
    const auto data = synth(300, 1.0, 4);
    const auto parts = split(data, {0.6, 0.2, 0.2, 5});
    auto cfg = quick();
    cfg.max_epochs = 60;
    cfg.patience = 3;
    const auto r = train(small_mlp_spec(), parts.train, parts.val, cfg);
    const auto& h = r.history;
    ASSERT_FALSE(h.epochs.empty());
    for (std::size_t e = 0; e < h.epochs.size(); ++e) {
        if (e <= h.best_epoch) continue;
        EXPECT_LE(h.epochs[e].val_auroc, h.epochs[h.best_epoch].val_auroc);
    }
    for (std::size_t e = 0; e < h.best_epoch; ++e) {
        EXPECT_LT(h.epochs[e].val_auroc, h.epochs[h.best_epoch].val_auroc);
    }
    if (h.epochs.size() < cfg.max_epochs) {
        EXPECT_EQ(h.epochs.size(), h.best_epoch + cfg.patience + 1);
    }
    // the returned weights are the best epoch's
    EXPECT_EQ(evaluate_probe(r.params, parts.val).auroc, h.epochs[h.best_epoch].val_auroc);
}

TEST(Train, CarriesCheckpointMetadata) {
    const auto data = synth(120, 2.0, 6);
    const auto parts = split(data, {0.6, 0.2, 0.2, 7});
    auto spec = small_mlp_spec();
    spec.model_name = "lm";
    spec.layer_index = 7;
    spec.mode = SegmentMode::question_and_answer;
    auto cfg = quick();
    cfg.max_epochs = 2;
    const auto r = train(spec, parts.train, parts.val, cfg);
    EXPECT_EQ(r.params.model_name, "lm");
    EXPECT_EQ(r.params.layer_index, 7);
    EXPECT_EQ(r.params.mode, SegmentMode::question_and_answer);
    EXPECT_EQ(r.params.mlp.input_dim, 6u);
}

TEST(Train, PcaPoolingFitsOnTrainSplit) {
    const auto data = synth(200, 3.0, 8);
    const auto parts = split(data, {0.6, 0.2, 0.2, 9});
    auto spec = small_mlp_spec();
    spec.pooling = {PoolingKind::pca, 3};
    auto cfg = quick();
    cfg.max_epochs = 3;
    const auto r = train(spec, parts.train, parts.val, cfg);
    ASSERT_TRUE(r.params.pca.has_value());
    std::vector<TokenMatrix> rows;
    for (const auto& rec : parts.train) rows.push_back(segment_select(rec, spec.mode));
    EXPECT_EQ(*r.params.pca, pca_fit(rows, 3));
    EXPECT_EQ(r.params.feature_dim(), 6u);
}

TEST(Train, TransformerSmoke) {
    const auto data = synth(160, 3.0, 10);
    const auto parts = split(data, {0.6, 0.2, 0.2, 11});
    ProbeSpec spec;
    spec.arch = Architecture::transformer;
    spec.transformer.model_dim = 16;
    spec.transformer.n_layers = 1;
    auto cfg = quick();
    cfg.max_epochs = 4;
    const auto r = train(spec, parts.train, parts.val, cfg);
    EXPECT_EQ(r.params.arch, Architecture::transformer);
    EXPECT_EQ(r.params.transformer.input_dim, 6u);
    EXPECT_EQ(r.history, train(spec, parts.train, parts.val, cfg).history);
}

TEST(Train, OneClassAndDimensionErrors) {
    auto data = synth(60, 2.0, 12);
    const auto parts = split(data, {0.5, 0.25, 0.25, 1});
    std::vector<HiddenStateRecord> pos;
    for (const auto& r : parts.train) {
        if (r.label) pos.push_back(r);
    }
    try {
        train(small_mlp_spec(), pos, parts.val, quick());
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::one_class);
    }
    auto wide = synth(40, 2.0, 13, 7);
    try {
        train(small_mlp_spec(), parts.train, wide, quick());
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension_mismatch);
    }
}

TEST(LayerSweep, IndependentOfJobs) {
    std::vector<Dataset> layers;
    for (int l = 0; l < 3; ++l) {
        Dataset d;
        d.header.layer_index = l * 4;
        d.header.hidden_dim = 6;
        d.records = synth(150, 0.5 + l, 20);  // same ids and labels, different signal
        layers.push_back(d);
    }
    auto cfg = quick();
    cfg.max_epochs = 5;
    const SplitSpec ss{0.6, 0.2, 0.2, 3};
    const auto a = layer_sweep(layers, small_mlp_spec(), cfg, ss, 1);
    const auto b = layer_sweep(layers, small_mlp_spec(), cfg, ss, 3);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a[i].layer, static_cast<std::int64_t>(i * 4));
        EXPECT_EQ(a[i].auroc, b[i].auroc);
        EXPECT_EQ(a[i].aurac, b[i].aurac);
        EXPECT_EQ(a[i].best_epoch, b[i].best_epoch);
        EXPECT_EQ(a[i].test_count, 30u);
    }
    EXPECT_GT(a[2].auroc, a[0].auroc);
}

TEST(LayerSweep, RejectsInconsistentLayers) {
    std::vector<Dataset> layers(2);
    layers[0].records = synth(40, 1.0, 1);
    layers[1].records = synth(40, 1.0, 1);
    layers[1].records[5].id = "other";
    try {
        layer_sweep(layers, small_mlp_spec(), quick(), {0.6, 0.2, 0.2, 1});
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
        EXPECT_NE(std::string(e.what()).find("inconsistent record ids"), std::string::npos);
    }
}

TEST(Ood, ShapeNamesAndJobs) {
    std::vector<NamedDataset> sets{{"a", synth(120, 2.0, 30)}, {"b", synth(120, 2.0, 31)}};
    for (auto& r : sets[1].records) r.id = "b-" + r.id;
    auto cfg = quick();
    cfg.max_epochs = 4;
    const SplitSpec ss{0.6, 0.2, 0.2, 2};
    const auto m = ood_matrix(sets, small_mlp_spec(), cfg, ss, 1);
    EXPECT_EQ(m.targets, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(m.sources, (std::vector<std::string>{"a", "b", "All"}));
    ASSERT_EQ(m.auroc.rows(), 2u);
    ASSERT_EQ(m.auroc.cols(), 3u);
    EXPECT_EQ(m.auroc.values().size(), 6u);
    const auto n = ood_matrix(sets, small_mlp_spec(), cfg, ss, 4);
    EXPECT_TRUE(std::equal(m.auroc.values().begin(), m.auroc.values().end(), n.auroc.values().begin()));
    EXPECT_THROW(ood_matrix(std::span(sets.data(), 1), small_mlp_spec(), cfg, ss), Error);
}

TEST(Truncation, FullFractionReproducesEvaluationExactly) {
    const auto data = synth(200, 2.0, 40);
    const auto parts = split(data, {0.6, 0.2, 0.2, 4});
    auto spec = small_mlp_spec();
    spec.mode = SegmentMode::question_and_answer;
    auto cfg = quick();
    cfg.max_epochs = 3;
    const auto r = train(spec, parts.train, parts.val, cfg);
    const auto fractions = default_truncation_fractions();
    ASSERT_EQ(fractions.size(), 20u);
    EXPECT_EQ(fractions.front(), 0.05);
    EXPECT_EQ(fractions.back(), 1.0);
    const auto pts = truncation_sweep(r.params, parts.test, fractions);
    const auto full = evaluate_probe(r.params, parts.test);
    EXPECT_EQ(std::memcmp(&pts.back().report.auroc, &full.auroc, sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(&pts.back().report.aurac, &full.aurac, sizeof(double)), 0);
}

TEST(Truncation, RejectsQuestionOnlyProbeAndBadFractions) {
    const auto data = synth(100, 2.0, 41);
    const auto parts = split(data, {0.6, 0.2, 0.2, 4});
    auto cfg = quick();
    cfg.max_epochs = 1;
    const auto r = train(small_mlp_spec(), parts.train, parts.val, cfg);
    try {
        truncation_sweep(r.params, parts.test, default_truncation_fractions());
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::mode_mismatch);
    }
    auto qa = r.params;
    qa.mode = SegmentMode::question_and_answer;
    EXPECT_THROW(truncation_sweep(qa, parts.test, std::vector<double>{0.0}), Error);
    EXPECT_THROW(truncation_sweep(qa, parts.test, std::vector<double>{1.5}), Error);
}
