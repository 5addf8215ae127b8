#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "calips/estimators.hpp"

using namespace calips;

namespace {

SyntheticWorld audit_world(Seed seed) {
    WorldConfig c;
    c.n_users = 50;
    c.n_items = 50;
    c.bias_strength = 1.0;
    c.base_rate = 0.1;
    return generate_world(c, seed);
}

std::vector<double> constant_predictor_errors(const SyntheticWorld& w) {
    std::vector<double> e(w.universe_size());
    for (std::size_t k = 0; k < e.size(); ++k) e[k] = pointwise_error(w.true_ratings.data[k], 3.0, ErrorKind::mae);
    return e;
}

}  // namespace

TEST(PointwiseError, MaeAndMse) {
    EXPECT_DOUBLE_EQ(pointwise_error(4.0, 2.5, ErrorKind::mae), 1.5);
    EXPECT_DOUBLE_EQ(pointwise_error(2.5, 4.0, ErrorKind::mae), 1.5);
    EXPECT_DOUBLE_EQ(pointwise_error(4.0, 2.5, ErrorKind::mse), 2.25);
}

TEST(NaiveError, Examples) {
    const std::vector<double> ones(4, 1.0);
    EXPECT_DOUBLE_EQ(naive_error(ones, 4), 1.0);
    EXPECT_DOUBLE_EQ(naive_error(std::vector<double>{1.0, 1.0}, 4), 0.5);
    EXPECT_DOUBLE_EQ(naive_error({}, 4), 0.0);
    EXPECT_THROW(naive_error(ones, 0), Error);
}

TEST(IpsError, Examples) {
    EXPECT_DOUBLE_EQ(ips_error(std::vector<double>{1.0}, std::vector<double>{0.5}, 2), 1.0);
    const std::vector<double> e{0.3, 1.2, 2.0};
    EXPECT_DOUBLE_EQ(ips_error(e, std::vector<double>(3, 1.0), 3), naive_error(e, 3));
}

TEST(IpsError, HalvingPropensitiesDoublesEstimate) {
    const std::vector<double> e{0.3, 1.2, 2.0}, p{0.2, 0.5, 0.9};
    std::vector<double> half(p);
    for (auto& x : half) x /= 2.0;
    EXPECT_NEAR(ips_error(e, half, 10), 2.0 * ips_error(e, p, 10), 1e-12);
}

TEST(IpsError, Errors) {
    EXPECT_THROW(ips_error(std::vector<double>{1.0}, std::vector<double>{0.0}, 1), Error);
    EXPECT_THROW(ips_error(std::vector<double>{1.0}, std::vector<double>{}, 1), Error);
    EXPECT_THROW(ips_error({}, {}, 0), Error);
}

TEST(EibError, Examples) {
    EXPECT_NEAR(eib_error(std::vector<int>{0, 0}, std::vector<double>{5.0, 5.0}, std::vector<double>{0.3, 0.3}), 0.3,
                1e-15);
    const std::vector<double> e{1.0, 2.0, 0.5};
    EXPECT_DOUBLE_EQ(eib_error(std::vector<int>{1, 0, 1}, e, e), full_information_error(e));
    EXPECT_DOUBLE_EQ(eib_error(std::vector<int>{1, 1, 1}, e, std::vector<double>(3, 9.0)), naive_error(e, 3));
    EXPECT_THROW(eib_error(std::vector<int>{1}, e, e), Error);
}

TEST(DrError, WorkedExample) {
    const std::vector<int> o{1, 0};
    const std::vector<double> e{1.0, 7.0}, e_hat{0.5, 0.2}, p{0.5, 0.3};
    EXPECT_NEAR(dr_error(o, e, e_hat, p), 0.85, 1e-15);
}

TEST(DrError, PerfectImputationIsExact) {
    auto eng = make_engine(31);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + uniform_index(eng, 50);
        std::vector<int> o(n);
        std::vector<double> e(n), p(n);
        for (std::size_t k = 0; k < n; ++k) {
            o[k] = uniform01(eng) < 0.4;
            e[k] = 3.0 * uniform01(eng);
            p[k] = 0.01 + 0.99 * uniform01(eng);
        }
        const double truth = full_information_error(e);
        EXPECT_NEAR(dr_error(o, e, e, p), truth, 1e-12 * std::max(1.0, truth));
    }
}

TEST(DrError, ZeroImputationIsIps) {
    const std::vector<int> o{1, 0, 1, 1};
    const std::vector<double> e{1.0, 4.0, 0.5, 2.0}, p{0.5, 0.1, 0.25, 0.8};
    EXPECT_NEAR(dr_error(o, e, std::vector<double>(4, 0.0), p),
                ips_error(std::vector<double>{1.0, 0.5, 2.0}, std::vector<double>{0.5, 0.25, 0.8}, 4), 1e-15);
}

TEST(DrError, Errors) {
    const std::vector<double> e{1.0};
    EXPECT_THROW(dr_error(std::vector<int>{1}, e, e, std::vector<double>{0.0}), Error);
    EXPECT_THROW(dr_error({}, {}, {}, {}), Error);
}

TEST(PropensityBias, Examples) {
    const auto exact = ips_bias_analytic(std::vector<double>{0.3, 0.7}, std::vector<double>{0.3, 0.7},
                                         std::vector<double>{1.0, 2.0});
    EXPECT_DOUBLE_EQ(exact.analytic_bias, 0.0);

    const auto over = ips_bias_analytic(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 1.0},
                                        std::vector<double>{1.0, 1.0});
    EXPECT_EQ(over.per_pair_nabla, (std::vector<double>{0.5, 0.5}));
    EXPECT_DOUBLE_EQ(over.analytic_bias, 0.5);

    const auto under =
        ips_bias_analytic(std::vector<double>{0.5}, std::vector<double>{0.25}, std::vector<double>{2.0});
    EXPECT_DOUBLE_EQ(under.per_pair_nabla[0], -1.0);
    EXPECT_DOUBLE_EQ(under.analytic_bias, 2.0);
    EXPECT_THROW(propensity_bias(std::vector<double>{0.5}, std::vector<double>{0.0}), Error);
}

TEST(PropensityBias, MatchesExpectedIpsGap) {
    // E[IPS] - full information = sum (p/p_hat - 1) e / |D| = -sum nabla e / |D|
    const std::vector<double> p{0.1, 0.4, 0.9}, q{0.2, 0.3, 0.9}, e{1.0, 2.0, 0.5};
    double expected_ips = 0.0;
    for (std::size_t k = 0; k < 3; ++k) expected_ips += p[k] * e[k] / q[k];
    expected_ips /= 3.0;
    EXPECT_NEAR(std::abs(expected_ips - full_information_error(e)), ips_bias_analytic(p, q, e).analytic_bias, 1e-15);
}

TEST(IpsBiasMc, OraclePropensitiesUnbiased) {
    const auto w = audit_world(41);
    const auto e = constant_predictor_errors(w);
    const auto r = ips_bias_mc(w, w.true_propensities.data, e, 10000, 41);
    EXPECT_DOUBLE_EQ(r.analytic_bias, 0.0);
    EXPECT_GT(r.mc_stderr, 0.0);
    EXPECT_LT(r.mc_bias, 3.0 * r.mc_stderr);
}

TEST(IpsBiasMc, DoubledPropensitiesMatchAnalytic) {
    const auto w = audit_world(42);
    const auto e = constant_predictor_errors(w);
    std::vector<double> doubled(w.universe_size());
    for (std::size_t k = 0; k < doubled.size(); ++k) doubled[k] = std::min(2.0 * w.true_propensities.data[k], 1.0);
    const auto r = ips_bias_mc(w, doubled, e, 10000, 42);
    EXPECT_GT(r.analytic_bias, 10.0 * r.mc_stderr);
    EXPECT_LT(std::abs(r.mc_bias - r.analytic_bias), 3.0 * r.mc_stderr);
}

TEST(IpsBiasMc, StderrScalesWithRootTrials) {
    const auto w = audit_world(43);
    const auto e = constant_predictor_errors(w);
    const auto few = ips_bias_mc(w, w.true_propensities.data, e, 100, 43);
    const auto many = ips_bias_mc(w, w.true_propensities.data, e, 10000, 43);
    EXPECT_NEAR(few.mc_stderr / many.mc_stderr, 10.0, 2.0);
}

TEST(IpsBiasMc, SeedDeterminesResult) {
    const auto w = audit_world(44);
    const auto e = constant_predictor_errors(w);
    const auto a = ips_bias_mc(w, w.true_propensities.data, e, 300, 5);
    const auto b = ips_bias_mc(w, w.true_propensities.data, e, 300, 5);
    EXPECT_EQ(a.mc_mean, b.mc_mean);
    EXPECT_EQ(a.mc_stderr, b.mc_stderr);
}

TEST(IpsBiasMc, Errors) {
    const auto w = audit_world(45);
    const auto e = constant_predictor_errors(w);
    EXPECT_THROW(ips_bias_mc(w, w.true_propensities.data, e, 1, 1), Error);
    EXPECT_THROW(ips_bias_mc(w, std::vector<double>{0.5}, e, 10, 1), Error);
}

TEST(CalibratedBiasCompare, PerfectCalibration) {
    const std::vector<double> p{0.2, 0.5}, raw{0.6, 0.9}, e{1.0, 2.0};
    const auto c = calibrated_bias_compare(p, raw, p, e);
    EXPECT_DOUBLE_EQ(c.bias_cal, 0.0);
    EXPECT_LE(c.bias_cal, c.bias_raw);
    EXPECT_TRUE(c.dominates);
    EXPECT_TRUE(c.pointwise_dominates);
}

TEST(CalibratedBiasCompare, ShrinkageTowardTruthDominates) {
    auto eng = make_engine(51);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 20;
        std::vector<double> p(n), raw(n), cal(n), e(n);
        for (std::size_t k = 0; k < n; ++k) {
            p[k] = 0.05 + 0.5 * uniform01(eng);
            raw[k] = p[k] * (1.2 + uniform01(eng));  // overestimates everywhere
            cal[k] = p[k] + (raw[k] - p[k]) * (0.05 + 0.9 * uniform01(eng));
            e[k] = 0.1 + uniform01(eng);
        }
        const auto c = calibrated_bias_compare(p, raw, cal, e);
        EXPECT_TRUE(c.pointwise_dominates);
        EXPECT_TRUE(c.dominates);
        EXPECT_LT(c.bias_cal, c.bias_raw);
    }
}

TEST(CalibratedBiasCompare, IdentityGivesEqualBias) {
    const std::vector<double> p{0.2, 0.5, 0.3}, raw{0.6, 0.1, 0.3}, e{1.0, 2.0, 3.0};
    const auto c = calibrated_bias_compare(p, raw, raw, e);
    EXPECT_DOUBLE_EQ(c.bias_cal, c.bias_raw);
    EXPECT_TRUE(c.dominates);
}

TEST(CalibratedBiasCompare, MixedSignsDoNotClaimPointwiseDominance) {
    const std::vector<double> p{0.5, 0.5}, raw{1.0, 0.25}, cal{0.9, 0.3}, e{1.0, 1.0};
    EXPECT_FALSE(calibrated_bias_compare(p, raw, cal, e).pointwise_dominates);
}

TEST(DrBias, Examples) {
    EXPECT_DOUBLE_EQ(dr_bias_analytic(std::vector<double>{0.5, -2.0}, std::vector<double>{0.0, 0.0}), 0.0);
    EXPECT_DOUBLE_EQ(dr_bias_analytic(std::vector<double>{0.0, 0.0}, std::vector<double>{3.0, -1.0}), 0.0);
    EXPECT_NEAR(dr_bias_analytic(std::vector<double>{0.5}, std::vector<double>{0.4}), 0.2, 1e-15);
}

TEST(GeneralizationBound, WorkedVarianceTerm) {
    const std::vector<double> nabla(4, 0.0), p(4, 1.0);
    const auto t = generalization_bound(0.7, nabla, p, 2.0, 0.05);
    EXPECT_NEAR(t.variance_term, std::sqrt(std::log(80.0) * 4.0 / 32.0), 1e-12);
    EXPECT_DOUBLE_EQ(t.bias_term, 0.0);
    EXPECT_DOUBLE_EQ(t.empirical_error, 0.7);
    EXPECT_DOUBLE_EQ(t.total, 0.7 + t.variance_term);
}

TEST(GeneralizationBound, HalvingPropensitiesDoublesVariance) {
    const std::vector<double> nabla(3, 0.0), p{0.8, 0.4, 0.6}, half{0.4, 0.2, 0.3};
    EXPECT_NEAR(generalization_bound(0, nabla, half, 10, 0.1).variance_term,
                2.0 * generalization_bound(0, nabla, p, 10, 0.1).variance_term, 1e-12);
}

TEST(GeneralizationBound, MonotoneInEtaAndHypotheses) {
    const std::vector<double> nabla(5, 0.1), p(5, 0.3);
    double prev = std::numeric_limits<double>::infinity();
    for (double eta : {0.01, 0.05, 0.1, 0.5, 0.9}) {
        const double v = generalization_bound(0, nabla, p, 4, eta).variance_term;
        EXPECT_LT(v, prev) << eta;
        prev = v;
    }
    prev = 0.0;
    for (double h : {1.0, 2.0, 10.0, 1000.0}) {
        const double v = generalization_bound(0, nabla, p, h, 0.05).variance_term;
        EXPECT_GT(v, prev) << h;
        prev = v;
    }
    EXPECT_NEAR(generalization_bound(0, nabla, p, 4, 0.05).bias_term, 0.1, 1e-15);
}

TEST(GeneralizationBound, Errors) {
    const std::vector<double> nabla(2, 0.0), p(2, 0.5);
    EXPECT_THROW(generalization_bound(0, nabla, p, 0.5, 0.05), Error);
    EXPECT_THROW(generalization_bound(0, nabla, p, 2, 0.0), Error);
    EXPECT_THROW(generalization_bound(0, nabla, p, 2, 1.0), Error);
    EXPECT_THROW(generalization_bound(0, nabla, std::vector<double>{0.5}, 2, 0.05), Error);
}

TEST(EceBoundAudit, PerfectCalibrationHolds) {
    // scores equal true propensities and match label frequencies per bin exactly
    const std::vector<double> p{0.25, 0.25, 0.25, 0.25, 0.5, 0.5};
    const std::vector<int> y{1, 0, 0, 0, 1, 0};
    const auto a = ece_bound_audit(p, p, y, 10);
    EXPECT_DOUBLE_EQ(a.lhs, 0.0);
    EXPECT_DOUBLE_EQ(a.rhs, 0.0);
    EXPECT_TRUE(a.holds);
}

TEST(EceBoundAudit, RhsIsBinsTimesEce) {
    const std::vector<double> p{0.1, 0.3, 0.6, 0.2}, q{0.15, 0.35, 0.5, 0.2};
    const std::vector<int> y{0, 1, 1, 0};
    for (std::size_t n : {1u, 5u, 100u}) {
        const auto a = ece_bound_audit(p, q, y, n);
        EXPECT_DOUBLE_EQ(a.rhs, static_cast<double>(n) * ece(q, y, n));
        EXPECT_DOUBLE_EQ(a.ece, ece(q, y, n));
        const auto nabla = propensity_bias(p, q);
        EXPECT_NEAR(a.lhs, std::accumulate(nabla.begin(), nabla.end(), 0.0) / 4.0, 1e-15);
        EXPECT_EQ(a.holds, a.lhs <= a.rhs);
    }
}
