#include <gtest/gtest.h>

#include "calips/nn.hpp"
#include "test_util.hpp"

using namespace calips;
using namespace calips::nn;

namespace {

ModelSpec spec_of(std::size_t users, std::size_t items, std::size_t dim, std::vector<std::size_t> layers,
                  double dropout = 0.0) {
    ModelSpec s;
    s.n_users = users;
    s.n_items = items;
    s.embedding_dim = dim;
    s.mlp_layers = std::move(layers);
    s.dropout_rate = dropout;
    return s;
}

std::vector<LabeledPair> random_batch(std::size_t n, std::size_t users, std::size_t items, Seed seed,
                                      bool binary = true) {
    auto eng = make_engine(seed);
    std::vector<LabeledPair> out;
    for (std::size_t k = 0; k < n; ++k)
        out.push_back({static_cast<Index>(uniform_index(eng, users)), static_cast<Index>(uniform_index(eng, items)),
                       binary ? static_cast<double>(uniform_index(eng, 2)) : uniform01(eng)});
    return out;
}

double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST(ModelSpec, Validation) {
    EXPECT_THROW(spec_of(0, 3, 4, {1}).validate(), Error);
    EXPECT_THROW(spec_of(3, 3, 0, {1}).validate(), Error);
    EXPECT_THROW(spec_of(3, 3, 4, {4}).validate(), Error);
    EXPECT_THROW(spec_of(3, 3, 4, {}).validate(), Error);
    EXPECT_THROW(spec_of(3, 3, 4, {1}, 1.0).validate(), Error);
    EXPECT_NO_THROW(spec_of(3, 3, 4, {8, 1}, 0.5).validate());
}

TEST(ModelSpec, ParameterCountByHand) {
    // embeddings (7 + 9) * 8; hidden 16 -> 16 weights + bias; output reads [gmf 8; hidden 16] + bias
    const std::size_t expected = (7 + 9) * 8 + 16 * 16 + 16 + (8 + 16) + 1;
    EXPECT_EQ(parameter_count(spec_of(7, 9, 8, {16, 1})), expected);
    // logistic form: output reads [u*v; u; v]
    EXPECT_EQ(parameter_count(spec_of(2, 3, 4, {1})), 5 * 4 + 12 + 1);
    // default shape
    EXPECT_EQ(parameter_count(spec_of(2, 3, 8, {32, 16, 1})), 5 * 8 + (16 * 32 + 32) + (32 * 16 + 16) + (8 + 16 + 1));
}

TEST(Init, DeterministicPerSeed) {
    const auto s = spec_of(5, 6, 4, {8, 1});
    EXPECT_EQ(init(s, 3).parameters, init(s, 3).parameters);
    EXPECT_NE(init(s, 3).parameters, init(s, 4).parameters);
    EXPECT_EQ(init(s, 3).parameters.size(), parameter_count(s));
}

TEST(Init, EmbeddingScaleAndZeroBiases) {
    const auto s = spec_of(40, 50, 8, {1});
    const auto m = init(s, 1);
    const double limit = 1.0 / std::sqrt(8.0);
    for (std::size_t k = 0; k < 90 * 8; ++k) EXPECT_LE(std::abs(m.parameters[k]), limit);
    EXPECT_EQ(m.parameters.back(), 0.0);
}

TEST(Train, ZeroEpochsKeepsParameters) {
    const auto s = spec_of(4, 4, 3, {4, 1}, 0.2);
    const auto m0 = init(s, 1);
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto m1 = train(m0, random_batch(20, 4, 4, 2), cfg, 5);
    EXPECT_EQ(m0.parameters, m1.parameters);
    EXPECT_TRUE(m1.loss_history.empty());
}

TEST(Train, DoubledWeightsHalvedRateSameTrajectory) {
    const auto s = spec_of(6, 5, 4, {8, 4, 1}, 0.2);
    const auto data = random_batch(60, 6, 5, 3);
    std::vector<double> w(data.size()), w2(data.size());
    auto eng = make_engine(4);
    for (std::size_t k = 0; k < w.size(); ++k) {
        w[k] = 0.5 + uniform01(eng);
        w2[k] = 2.0 * w[k];
    }
    TrainConfig a;
    a.epochs = 5;
    a.batch_size = 7;
    a.learning_rate = 0.2;
    a.per_sample_weights = w;
    TrainConfig b = a;
    b.learning_rate = 0.1;
    b.per_sample_weights = w2;
    const auto ma = train(init(s, 1), data, a, 9);
    const auto mb = train(init(s, 1), data, b, 9);
    EXPECT_EQ(ma.parameters, mb.parameters);
}

TEST(Train, SeparableToyLossStrictlyDecreases) {
    const auto s = spec_of(2, 2, 4, {8, 1}, 0.0);
    const std::vector<LabeledPair> data{{0, 0, 1.0}, {1, 1, 0.0}};
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 2;
    cfg.learning_rate = 0.5;
    const auto m = train(init(s, 2), data, cfg, 3);
    ASSERT_EQ(m.loss_history.size(), 10u);
    for (std::size_t e = 1; e < 10; ++e) EXPECT_LT(m.loss_history[e], m.loss_history[e - 1]);
}

TEST(Train, DeterministicPerSeed) {
    const auto s = spec_of(8, 8, 4, {8, 1}, 0.3);
    const auto data = random_batch(100, 8, 8, 1);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    EXPECT_EQ(train(init(s, 1), data, cfg, 2).parameters, train(init(s, 1), data, cfg, 2).parameters);
    EXPECT_NE(train(init(s, 1), data, cfg, 2).parameters, train(init(s, 1), data, cfg, 3).parameters);
}

TEST(Train, NonFiniteLossReportsRateAndBatch) {
    const auto s = spec_of(3, 3, 2, {1}, 0.0);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.per_sample_weights = std::vector<double>(4, 1e308);
    try {
        train(init(s, 1), random_batch(4, 3, 3, 1), cfg, 1);
        FAIL();
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("learning_rate"), std::string::npos);
        EXPECT_NE(msg.find("batch="), std::string::npos);
    }
}

TEST(Train, InputValidation) {
    const auto s = spec_of(3, 3, 2, {1}, 0.0);
    const auto data = random_batch(4, 3, 3, 1);
    TrainConfig cfg;
    cfg.per_sample_weights = std::vector<double>(3, 1.0);
    EXPECT_THROW(train(init(s, 1), data, cfg, 1), Error);
    cfg.per_sample_weights = std::vector<double>{1, 1, 0, 1};
    EXPECT_THROW(train(init(s, 1), data, cfg, 1), Error);
    TrainConfig bad_lr;
    bad_lr.learning_rate = 0.0;
    EXPECT_THROW(train(init(s, 1), data, bad_lr, 1), Error);
    std::vector<LabeledPair> bad_label{{0, 0, 2.0}};
    EXPECT_THROW(train(init(s, 1), bad_label, TrainConfig{}, 1), Error);
}

TEST(Predict, RangeDeterminismAndDropoutModes) {
    const auto s = spec_of(5, 5, 4, {8, 4, 1}, 0.4);
    auto m = init(s, 1);
    TrainConfig cfg;
    cfg.epochs = 2;
    m = train(std::move(m), random_batch(40, 5, 5, 2), cfg, 3);
    std::vector<Pair> pairs;
    for (Index u = 0; u < 5; ++u)
        for (Index i = 0; i < 5; ++i) pairs.push_back({u, i});
    const auto a = predict(m, pairs);
    for (double p : a) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
    }
    EXPECT_EQ(a, predict(m, pairs));
    const auto d1 = predict(m, pairs, PredictMode::with_dropout(7));
    EXPECT_EQ(d1, predict(m, pairs, PredictMode::with_dropout(7)));
    EXPECT_NE(d1, predict(m, pairs, PredictMode::with_dropout(8)));
    EXPECT_NE(d1, a);

    auto no_dropout = m;
    no_dropout.spec.dropout_rate = 0.0;
    EXPECT_EQ(predict(no_dropout, pairs, PredictMode::with_dropout(7)), predict(no_dropout, pairs));
    EXPECT_THROW(predict(m, std::vector<Pair>{{5, 0}}), Error);
}

TEST(GradientCheck, AllLayerShapesAndLosses) {
    for (const auto& layers : std::vector<std::vector<std::size_t>>{{1}, {4, 1}, {8, 4, 1}}) {
        const auto s = spec_of(4, 5, 3, layers);
        const auto bce_batch = random_batch(12, 4, 5, 11);
        const auto soft = random_batch(12, 4, 5, 12, false);
        std::vector<double> w(12);
        auto eng = make_engine(13);
        for (auto& x : w) x = 0.2 + 3.0 * uniform01(eng);
        EXPECT_LT(gradient_check(s, bce_batch, 1e-5), 1e-4);
        EXPECT_LT(gradient_check(s, soft, 1e-5, 7, LossKind::mse), 1e-4);
        EXPECT_LT(gradient_check(s, bce_batch, 1e-5, 3, LossKind::bce, w), 1e-4);
        EXPECT_LT(gradient_check(s, soft, 1e-5, 5, LossKind::mse, w), 1e-4);
    }
}

TEST(GradientCheck, ZeroLossMseBatchHasZeroGradient) {
    const auto s = spec_of(3, 3, 4, {8, 1});
    const auto m = init(s, 2);
    std::vector<LabeledPair> batch;
    for (Index u = 0; u < 3; ++u) batch.push_back({u, u, 0.0});
    const auto probs = predict(m, std::vector<Pair>{{0, 0}, {1, 1}, {2, 2}});
    for (std::size_t k = 0; k < 3; ++k) batch[k].label = probs[k];
    const auto [loss, grad] = loss_and_gradient(m, batch, LossKind::mse);
    EXPECT_LT(loss, 1e-28);
    EXPECT_LT(norm(grad), 1e-12);
}

TEST(GradientCheck, WeightLinearity) {
    const auto s = spec_of(3, 4, 3, {4, 1});
    const auto m = init(s, 5);
    const std::vector<LabeledPair> one{{1, 2, 1.0}};
    const auto [l1, g1] = loss_and_gradient(m, one, LossKind::bce, std::vector<double>{1.0});
    const auto [l2, g2] = loss_and_gradient(m, one, LossKind::bce, std::vector<double>{2.0});
    EXPECT_NEAR(l2, 2.0 * l1, 1e-15);
    for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_NEAR(g2[k], 2.0 * g1[k], 1e-15);

    const auto batch = random_batch(10, 3, 4, 6);
    std::vector<double> a(10), b(10), ab(10);
    auto eng = make_engine(7);
    for (std::size_t k = 0; k < 10; ++k) {
        a[k] = uniform01(eng);
        b[k] = uniform01(eng);
        ab[k] = a[k] + b[k];
    }
    const double la = loss_and_gradient(m, batch, LossKind::bce, a).first;
    const double lb = loss_and_gradient(m, batch, LossKind::bce, b).first;
    const double lab = loss_and_gradient(m, batch, LossKind::bce, ab).first;
    EXPECT_NEAR(lab, la + lb, 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    calips::testing::TempDir dir;
    auto m = init(spec_of(4, 6, 3, {5, 1}, 0.25), 9);
    m.training_seed = 1234567890123ULL;
    save_checkpoint(m, dir / "m.ckpt");
    const auto back = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(back.spec, m.spec);
    EXPECT_EQ(back.parameters, m.parameters);
    EXPECT_EQ(back.training_seed, m.training_seed);
}

TEST(Checkpoint, RejectsBadFiles) {
    calips::testing::TempDir dir;
    EXPECT_THROW(load_checkpoint(dir / "none.ckpt"), LoadError);
    EXPECT_THROW(load_checkpoint(dir.write("a.ckpt", "not json\n")), LoadError);
    EXPECT_THROW(load_checkpoint(dir.write("b.ckpt", R"({"format":"other","version":1})" "\n")), LoadError);
    auto m = init(spec_of(2, 2, 2, {1}), 1);
    save_checkpoint(m, dir / "c.ckpt");
    auto text = calips::testing::slurp(dir / "c.ckpt");
    text.erase(text.rfind('\n', text.size() - 2) + 1);
    EXPECT_THROW(load_checkpoint(dir.write("d.ckpt", text)), LoadError);
}
