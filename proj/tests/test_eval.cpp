#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "calips/eval.hpp"
#include "test_util.hpp"

using namespace calips;

namespace {

nn::TrainedModel model_for(std::size_t users, std::size_t items, Seed seed) {
    nn::ModelSpec s;
    s.n_users = users;
    s.n_items = items;
    s.embedding_dim = 4;
    s.mlp_layers = {8, 1};
    return nn::init(s, seed);
}

nn::TrainedModel flat_model(std::size_t users, std::size_t items) {
    auto m = model_for(users, items, 1);
    std::fill(m.parameters.begin(), m.parameters.end(), 0.0);
    return m;
}

}  // namespace

TEST(Dcg, Examples) {
    EXPECT_DOUBLE_EQ(dcg_at_k(std::vector<int>{0, 0, 0}, 3), 0.0);
    EXPECT_NEAR(dcg_at_k(std::vector<int>{1, 1, 1}, 3), 1.0 + 1.0 / std::log2(3.0) + 0.5, 1e-15);
    EXPECT_NEAR(dcg_at_k(std::vector<int>{1, 1, 1}, 3), 2.1309, 5e-5);
    EXPECT_NEAR(dcg_at_k(std::vector<int>{0, 1}, 2), 0.6309, 5e-5);
    EXPECT_DOUBLE_EQ(dcg_at_k(std::vector<int>{0, 1}, 2), 1.0 / std::log2(3.0));
}

TEST(Dcg, ShortListsAndErrors) {
    EXPECT_DOUBLE_EQ(dcg_at_k(std::vector<int>{1}, 6), 1.0);
    EXPECT_DOUBLE_EQ(dcg_at_k({}, 2), 0.0);
    EXPECT_THROW(dcg_at_k(std::vector<int>{1}, 0), Error);
}

TEST(Recall, Examples) {
    EXPECT_DOUBLE_EQ(recall_at_k(std::vector<int>{1, 0, 1}, 2), 1.0);
    EXPECT_DOUBLE_EQ(recall_at_k(std::vector<int>{0, 0, 0, 0}, 4), 0.0);
    EXPECT_DOUBLE_EQ(recall_at_k(std::vector<int>{1, 1, 0, 0, 1, 0}, 6), 3.0);
    EXPECT_THROW(recall_at_k(std::vector<int>{1}, 0), Error);
}

TEST(Metrics, MonotoneInK) {
    auto eng = make_engine(61);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<int> rel(1 + uniform_index(eng, 10));
        for (auto& r : rel) r = uniform01(eng) < 0.4;
        EXPECT_LE(dcg_at_k(rel, 2), dcg_at_k(rel, 4));
        EXPECT_LE(dcg_at_k(rel, 4), dcg_at_k(rel, 6));
        EXPECT_LE(recall_at_k(rel, 2), recall_at_k(rel, 4));
        EXPECT_LE(recall_at_k(rel, 4), recall_at_k(rel, 6));
    }
}

TEST(Metrics, RelevantFirstIsOptimal) {
    auto eng = make_engine(62);
    for (std::size_t n = 1; n <= 6; ++n)
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<int> rel(n);
            for (auto& r : rel) r = uniform01(eng) < 0.5;
            std::vector<int> best(rel);
            std::sort(best.begin(), best.end(), std::greater<>());
            std::vector<int> perm(rel);
            std::sort(perm.begin(), perm.end());
            do {
                for (std::size_t k = 1; k <= 6; ++k) {
                    ASSERT_LE(dcg_at_k(perm, k), dcg_at_k(best, k) + 1e-15);
                    ASSERT_LE(recall_at_k(perm, k), recall_at_k(best, k));
                }
            } while (std::next_permutation(perm.begin(), perm.end()));
        }
}

TEST(Evaluate, AllRelevantSingleUser) {
    const RatingDataset test(1, 5, {{0, 0, 5}, {0, 2, 4}, {0, 4, 5}});
    for (Seed s : {1, 2, 3}) {
        const auto row = evaluate(model_for(1, 5, s), test, kDefaultKs);
        EXPECT_NEAR(row.dcg[0], 1.0 + 1.0 / std::log2(3.0), 1e-15);
        EXPECT_NEAR(row.dcg[0], 1.6309, 5e-5);
        EXPECT_DOUBLE_EQ(row.recall[0], 2.0);
        EXPECT_DOUBLE_EQ(row.recall[2], 3.0);
        EXPECT_EQ(row.users, 1u);
    }
}

TEST(Evaluate, TiesFollowItemIndex) {
    // flat model: every score equal, so ranking is item 0, 1, 2, ...
    const RatingDataset test(2, 4, {{0, 3, 5}, {0, 1, 1}, {0, 0, 2}, {1, 2, 5}, {1, 3, 1}});
    const auto m = flat_model(2, 4);
    const auto row = evaluate(m, test, std::vector<std::size_t>{1, 2});
    // user 0 ranks [0, 1, 3] -> rel [0, 0, 1]; user 1 ranks [2, 3] -> rel [1, 0]
    EXPECT_DOUBLE_EQ(row.dcg[0], 0.5);
    EXPECT_DOUBLE_EQ(row.recall[1], 0.5);
    const auto again = evaluate(m, test, std::vector<std::size_t>{1, 2});
    EXPECT_EQ(row.dcg, again.dcg);
    EXPECT_EQ(row.recall, again.recall);
}

TEST(Evaluate, SixCellsPlusAverage) {
    const RatingDataset test(3, 8, {{0, 1, 5}, {0, 2, 1}, {1, 0, 4}, {1, 7, 2}, {1, 5, 3}});
    const auto row = evaluate(model_for(3, 8, 4), test);
    ASSERT_EQ(row.ks, (std::vector<std::size_t>{2, 4, 6}));
    EXPECT_EQ(row.users, 2u);  // user 2 has no test items and is skipped
    double sum = 0.0;
    for (std::size_t k = 0; k < 3; ++k) sum += row.dcg[k] + row.recall[k];
    EXPECT_NEAR(row.average, sum / 6.0, 1e-15);
    const auto j = to_json(row);
    EXPECT_EQ(j.size(), 7u);
    for (const char* key : {"dcg@2", "dcg@4", "dcg@6", "recall@2", "recall@4", "recall@6", "average"})
        EXPECT_TRUE(j.contains(key)) << key;
}

TEST(Evaluate, Errors) {
    const auto m = model_for(1, 2, 1);
    EXPECT_THROW(evaluate(m, RatingDataset(1, 2, {}), kDefaultKs), Error);
    EXPECT_THROW(evaluate(m, RatingDataset(1, 2, {{0, 0, 5}}), std::vector<std::size_t>{}), Error);
}

TEST(Ranking, OrdersByScoreThenIndex) {
    const auto flat = flat_model(1, 5);
    const std::vector<Index> cands{4, 1, 3};
    const auto tied = predict_ranking(flat, 0, cands);
    ASSERT_EQ(tied.size(), 3u);
    EXPECT_EQ(tied[0].item, 1u);
    EXPECT_EQ(tied[1].item, 3u);
    EXPECT_EQ(tied[2].item, 4u);
    EXPECT_DOUBLE_EQ(tied[0].score, 0.5);

    const auto m = model_for(1, 5, 9);
    const auto r = predict_ranking(m, 0, cands);
    for (std::size_t k = 1; k < r.size(); ++k) EXPECT_GE(r[k - 1].score, r[k].score);
    const std::vector<Index> one{2};
    const auto single = predict_ranking(m, 0, one);
    ASSERT_EQ(single.size(), 1u);
    EXPECT_EQ(single[0].item, 2u);
}

TEST(MetricsCsv, FlatRows) {
    calips::testing::TempDir dir;
    MetricsRow row;
    row.ks = {2, 4};
    row.dcg = {1.5, 2.0};
    row.recall = {1.0, 2.0};
    write_metrics_csv({{"base", row}}, dir / "m.csv");
    EXPECT_EQ(calips::testing::slurp(dir / "m.csv"), "method,K,dcg,recall\nbase,2,1.5,1\nbase,4,2,2\n");
}
