#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "calips/calib.hpp"
#include "calips/common.hpp"
#include "calips/synth.hpp"

namespace calips {

// Offline prediction-error estimators. "Observed" spans are aligned with one
// another; "over D" spans cover every user-item pair of the universe.

enum class ErrorKind { mae, mse };

inline double pointwise_error(double truth, double prediction, ErrorKind kind) {
    const double d = truth - prediction;
    return kind == ErrorKind::mae ? std::abs(d) : d * d;
}

inline double full_information_error(std::span<const double> errors) {
    if (errors.empty()) throw Error("full_information_error: empty universe");
    return std::accumulate(errors.begin(), errors.end(), 0.0) / static_cast<double>(errors.size());
}

/// Sum of observed errors over |D|.
inline double naive_error(std::span<const double> observed_errors, std::size_t universe) {
    if (universe == 0) throw Error("naive_error: |D| must be > 0");
    return std::accumulate(observed_errors.begin(), observed_errors.end(), 0.0) / static_cast<double>(universe);
}

/// (1/|D|) sum over observed pairs of e / p.
inline double ips_error(std::span<const double> observed_errors, std::span<const double> propensities,
                        std::size_t universe) {
    if (universe == 0) throw Error("ips_error: |D| must be > 0");
    if (observed_errors.size() != propensities.size()) throw Error("ips_error: misaligned inputs");
    double total = 0.0;
    for (std::size_t k = 0; k < observed_errors.size(); ++k) {
        if (!(propensities[k] > 0.0)) throw Error("ips_error: zero propensity (clip first)");
        total += observed_errors[k] / propensities[k];
    }
    return total / static_cast<double>(universe);
}

/// (1/|D|) sum over D of o*e + (1-o)*e_hat. `indicator`, `errors` and `imputed`
/// all cover D; errors of unobserved cells are ignored.
inline double eib_error(std::span<const int> indicator, std::span<const double> errors,
                        std::span<const double> imputed) {
    if (indicator.size() != errors.size() || imputed.size() != errors.size() || errors.empty())
        throw Error("eib_error: inputs must cover D");
    double total = 0.0;
    for (std::size_t k = 0; k < errors.size(); ++k) total += indicator[k] ? errors[k] : imputed[k];
    return total / static_cast<double>(errors.size());
}

/// (1/|D|) sum over D of e_hat + o*(e - e_hat)/p_hat.
inline double dr_error(std::span<const int> indicator, std::span<const double> errors,
                       std::span<const double> imputed, std::span<const double> propensities) {
    if (indicator.size() != errors.size() || imputed.size() != errors.size() ||
        propensities.size() != errors.size() || errors.empty())
        throw Error("dr_error: inputs must cover D");
    double total = 0.0;
    for (std::size_t k = 0; k < errors.size(); ++k) {
        total += imputed[k];
        if (indicator[k]) {
            if (!(propensities[k] > 0.0)) throw Error("dr_error: zero propensity (clip first)");
            total += (errors[k] - imputed[k]) / propensities[k];
        }
    }
    return total / static_cast<double>(errors.size());
}

// ---------------------------------------------------------------------------
// Bias audits

struct BiasReport {
    double analytic_bias = 0.0;
    double mc_bias = 0.0;
    double mc_stderr = 0.0;
    double mc_mean = 0.0;
    double full_information = 0.0;
    std::size_t trials = 0;
    std::vector<double> per_pair_nabla;
};

/// (p_hat - p) / p_hat per pair.
inline std::vector<double> propensity_bias(std::span<const double> true_p, std::span<const double> est_p) {
    if (true_p.size() != est_p.size()) throw Error("propensity_bias: misaligned inputs");
    std::vector<double> nabla(true_p.size());
    for (std::size_t k = 0; k < nabla.size(); ++k) {
        if (!(est_p[k] > 0.0)) throw Error("propensity_bias: estimated propensity must be > 0");
        nabla[k] = (est_p[k] - true_p[k]) / est_p[k];
    }
    return nabla;
}

/// |sum nabla * x| / |D|
inline double weighted_bias(std::span<const double> nabla, std::span<const double> x) {
    if (nabla.size() != x.size() || x.empty()) throw Error("weighted_bias: misaligned inputs");
    double total = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) total += nabla[k] * x[k];
    return std::abs(total) / static_cast<double>(x.size());
}

inline BiasReport ips_bias_analytic(std::span<const double> true_p, std::span<const double> est_p,
                                    std::span<const double> errors) {
    BiasReport r;
    r.per_pair_nabla = propensity_bias(true_p, est_p);
    r.analytic_bias = weighted_bias(r.per_pair_nabla, errors);
    r.full_information = full_information_error(errors);
    return r;
}

/// Monte-Carlo bias of the IPS estimate: trial t samples an indicator matrix
/// with seed `seed + t`, so serial and parallel runs agree exactly.
inline BiasReport ips_bias_mc(const SyntheticWorld& world, std::span<const double> est_p,
                              std::span<const double> errors, std::size_t trials, Seed seed) {
    if (trials < 2) throw Error("ips_bias_mc: need at least 2 trials");
    if (est_p.size() != world.universe_size() || errors.size() != world.universe_size())
        throw Error("ips_bias_mc: inputs must cover D");
    auto report = ips_bias_analytic(world.true_propensities.data, est_p, errors);
    const std::size_t chunks = std::min<std::size_t>(trials, 64);
    const auto partial = parallel_map(chunks, [&](std::size_t chunk) {
        std::vector<double> values;
        for (std::size_t t = chunk; t < trials; t += chunks) {
            auto eng = make_engine(derive_seed(seed + t, stream::indicator));
            double total = 0.0;
            for (std::size_t c = 0; c < errors.size(); ++c)
                if (uniform01(eng) < world.true_propensities.data[c]) total += errors[c] / est_p[c];
            values.push_back(total / static_cast<double>(errors.size()));
        }
        return values;
    });
    std::vector<double> estimates(trials);
    for (std::size_t chunk = 0; chunk < chunks; ++chunk)
        for (std::size_t k = 0; k < partial[chunk].size(); ++k) estimates[chunk + k * chunks] = partial[chunk][k];
    const double mean = std::accumulate(estimates.begin(), estimates.end(), 0.0) / static_cast<double>(trials);
    double ss = 0.0;
    for (double v : estimates) ss += (v - mean) * (v - mean);
    report.trials = trials;
    report.mc_mean = mean;
    report.mc_bias = std::abs(mean - report.full_information);
    report.mc_stderr = std::sqrt(ss / static_cast<double>(trials - 1) / static_cast<double>(trials));
    return report;
}

struct BiasComparison {
    double bias_raw = 0.0;
    double bias_cal = 0.0;
    bool dominates = false;
    bool pointwise_dominates = false;
};

/// Lemma-1 bias for raw and calibrated propensities. `pointwise_dominates`
/// is the sufficient condition |nabla~ e| <= |nabla e| everywhere with every
/// nonzero nabla e of one sign, under which bias_cal <= bias_raw is forced.
inline BiasComparison calibrated_bias_compare(std::span<const double> true_p, std::span<const double> raw_p,
                                              std::span<const double> calibrated_p,
                                              std::span<const double> errors) {
    const auto nabla = propensity_bias(true_p, raw_p);
    const auto nabla_cal = propensity_bias(true_p, calibrated_p);
    BiasComparison out;
    out.bias_raw = weighted_bias(nabla, errors);
    out.bias_cal = weighted_bias(nabla_cal, errors);
    out.dominates = out.bias_cal <= out.bias_raw;
    bool shrinks = true;
    int sign = 0;
    bool same_sign = true;
    for (std::size_t k = 0; k < errors.size(); ++k) {
        const double raw_term = nabla[k] * errors[k];
        if (std::abs(nabla_cal[k] * errors[k]) > std::abs(raw_term)) shrinks = false;
        if (raw_term != 0.0) {
            const int s = raw_term > 0.0 ? 1 : -1;
            if (sign == 0) sign = s;
            else if (s != sign) same_sign = false;
        }
    }
    out.pointwise_dominates = shrinks && same_sign;
    return out;
}

/// |sum nabla * delta| / |D| with delta = e - e_hat.
inline double dr_bias_analytic(std::span<const double> nabla, std::span<const double> deltas) {
    return weighted_bias(nabla, deltas);
}

struct BoundTerms {
    double empirical_error = 0.0;
    double bias_term = 0.0;
    double variance_term = 0.0;
    double total = 0.0;
};

/// empirical + sum(nabla~)/|D| + sqrt(log(2|H|/eta) / (2|D|^2) * sum 1/p_hat^2)
inline BoundTerms generalization_bound(double empirical_error, std::span<const double> nabla_tilde,
                                       std::span<const double> est_p, double hypothesis_count, double eta) {
    if (!(hypothesis_count >= 1.0)) throw Error("generalization_bound: |H| must be >= 1");
    if (!(eta > 0.0 && eta < 1.0)) throw Error("generalization_bound: eta must be in (0, 1)");
    if (nabla_tilde.size() != est_p.size() || est_p.empty())
        throw Error("generalization_bound: inputs must cover D");
    const double n = static_cast<double>(est_p.size());
    double inv_sq = 0.0;
    for (double p : est_p) {
        if (!(p > 0.0)) throw Error("generalization_bound: estimated propensity must be > 0");
        inv_sq += 1.0 / (p * p);
    }
    BoundTerms t;
    t.empirical_error = empirical_error;
    t.bias_term = std::accumulate(nabla_tilde.begin(), nabla_tilde.end(), 0.0) / n;
    t.variance_term = std::sqrt(std::log(2.0 * hypothesis_count / eta) / (2.0 * n * n) * inv_sq);
    t.total = empirical_error + t.bias_term + t.variance_term;
    return t;
}

struct EceAudit {
    double lhs = 0.0;
    double rhs = 0.0;
    double ece = 0.0;
    bool holds = false;
};

/// Compares sum(nabla~)/|D| against n_bins * ECE(calibrated, labels). Reports only.
inline EceAudit ece_bound_audit(std::span<const double> true_p, std::span<const double> calibrated_p,
                                std::span<const int> labels, std::size_t n_bins = kDefaultBins) {
    const auto nabla = propensity_bias(true_p, calibrated_p);
    EceAudit a;
    a.lhs = std::accumulate(nabla.begin(), nabla.end(), 0.0) / static_cast<double>(nabla.size());
    a.ece = ece(calibrated_p, labels, n_bins);
    a.rhs = static_cast<double>(n_bins) * a.ece;
    a.holds = a.lhs <= a.rhs;
    return a;
}

}  // namespace calips
