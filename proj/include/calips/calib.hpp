#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "calips/common.hpp"
#include "calips/nn.hpp"
#include "calips/propensity.hpp"

namespace calips {

inline constexpr std::size_t kDefaultBins = 100;

struct ReliabilityBin {
    double lo = 0.0;
    double hi = 0.0;
    double expected = 0.0;   // mean score in the bin
    double empirical = 0.0;  // fraction of positive labels in the bin
    std::size_t count = 0;
};

struct ReliabilityCurve {
    std::vector<ReliabilityBin> bins;
};

namespace detail {

inline void check_scored(std::span<const double> scores, std::span<const int> labels, std::size_t n_bins) {
    if (scores.empty()) throw Error("calibration metric on empty input");
    if (scores.size() != labels.size()) throw Error("scores and labels are misaligned");
    if (n_bins < 1) throw Error("n_bins must be >= 1");
}

inline std::size_t bin_of(double score, std::size_t n_bins) {
    const double clamped = std::clamp(score, 0.0, 1.0);
    return std::min(static_cast<std::size_t>(clamped * static_cast<double>(n_bins)), n_bins - 1);
}

}  // namespace detail

/// Equal-width bins over [0, 1]; bin j holds scores in [j/n, (j+1)/n) with 1.0 in the last bin.
inline ReliabilityCurve reliability_curve(std::span<const double> scores, std::span<const int> labels,
                                          std::size_t n_bins = kDefaultBins) {
    detail::check_scored(scores, labels, n_bins);
    ReliabilityCurve curve;
    curve.bins.resize(n_bins);
    std::vector<double> score_sum(n_bins, 0.0), label_sum(n_bins, 0.0);
    for (std::size_t k = 0; k < scores.size(); ++k) {
        const auto j = detail::bin_of(scores[k], n_bins);
        score_sum[j] += scores[k];
        label_sum[j] += labels[k] ? 1.0 : 0.0;
        ++curve.bins[j].count;
    }
    for (std::size_t j = 0; j < n_bins; ++j) {
        auto& b = curve.bins[j];
        b.lo = static_cast<double>(j) / static_cast<double>(n_bins);
        b.hi = static_cast<double>(j + 1) / static_cast<double>(n_bins);
        if (b.count) {
            b.expected = score_sum[j] / static_cast<double>(b.count);
            b.empirical = label_sum[j] / static_cast<double>(b.count);
        }
    }
    return curve;
}

/// Unweighted ECE: sum over nonempty bins of |mean score - positive rate|,
/// divided by the total bin count. `count_weighted` switches to the
/// sample-weighted form sum_j (B_j / N) |gap_j|.
inline double ece(std::span<const double> scores, std::span<const int> labels,
                  std::size_t n_bins = kDefaultBins, bool count_weighted = false) {
    const auto curve = reliability_curve(scores, labels, n_bins);
    double total = 0.0;
    for (const auto& b : curve.bins) {
        if (!b.count) continue;
        const double gap = std::abs(b.expected - b.empirical);
        total += count_weighted ? gap * static_cast<double>(b.count) : gap;
    }
    return total / (count_weighted ? static_cast<double>(scores.size()) : static_cast<double>(n_bins));
}

inline void write_reliability_csv(const ReliabilityCurve& curve, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    out << "bin_lo,bin_hi,expected,empirical,count\n";
    for (const auto& b : curve.bins) {
        out << b.lo << ',' << b.hi << ',';
        if (b.count) out << b.expected << ',' << b.empirical;
        else out << ',';
        out << ',' << b.count << '\n';
    }
}

/// Score histogram over equal-width bins of [0, 1]: bin_lo,bin_hi,count
inline void write_histogram_csv(std::span<const double> scores, const std::filesystem::path& path,
                                std::size_t n_bins = 50) {
    std::vector<std::size_t> counts(n_bins, 0);
    for (double s : scores) ++counts[detail::bin_of(s, n_bins)];
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    out << "bin_lo,bin_hi,count\n";
    for (std::size_t j = 0; j < n_bins; ++j)
        out << static_cast<double>(j) / static_cast<double>(n_bins) << ','
            << static_cast<double>(j + 1) / static_cast<double>(n_bins) << ',' << counts[j] << '\n';
}

// ---------------------------------------------------------------------------
// Platt scaling on logits: q(s) = sigmoid(b * logit(s) + c)

struct PlattParams {
    double b = 1.0;
    double c = 0.0;
    std::size_t iterations = 0;
    double gradient_norm = 0.0;
};

inline constexpr double kLogitEps = 1e-6;

inline double safe_logit(double s) { return logit(std::clamp(s, kLogitEps, 1.0 - kLogitEps)); }

struct PlattOptions {
    double tolerance = 1e-8;
    std::size_t max_iterations = 100;
    double initial_b = 1.0;
    double initial_c = 0.0;
};

/// Mean binary cross-entropy of sigmoid(b * l + c) against labels.
inline double platt_objective(std::span<const double> logits, std::span<const int> labels, double b, double c) {
    double total = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k)
        total += nn::bce_loss(b * logits[k] + c, 0.0, labels[k] ? 1.0 : 0.0).value;
    return total / static_cast<double>(logits.size());
}

/// Damped Newton with Armijo backtracking; the objective is convex in (b, c).
inline PlattParams platt_fit(std::span<const double> scores, std::span<const int> labels,
                             const PlattOptions& opt = {}) {
    if (scores.empty() || scores.size() != labels.size()) throw Error("platt_fit: empty or misaligned input");
    const auto positives = std::count_if(labels.begin(), labels.end(), [](int y) { return y != 0; });
    if (positives == 0 || static_cast<std::size_t>(positives) == labels.size())
        throw Error("platt_fit: labels contain a single class");
    std::vector<double> ell(scores.size());
    for (std::size_t k = 0; k < scores.size(); ++k) ell[k] = safe_logit(scores[k]);
    const double inv_n = 1.0 / static_cast<double>(scores.size());

    PlattParams p{opt.initial_b, opt.initial_c, 0, 0.0};
    double f = platt_objective(ell, labels, p.b, p.c);
    for (;; ++p.iterations) {
        double gb = 0, gc = 0, hbb = 0, hbc = 0, hcc = 0;
        for (std::size_t k = 0; k < ell.size(); ++k) {
            const double q = sigmoid(p.b * ell[k] + p.c);
            const double r = q - (labels[k] ? 1.0 : 0.0);
            const double w = q * (1.0 - q);
            gb += r * ell[k];
            gc += r;
            hbb += w * ell[k] * ell[k];
            hbc += w * ell[k];
            hcc += w;
        }
        gb *= inv_n, gc *= inv_n, hbb *= inv_n, hbc *= inv_n, hcc *= inv_n;
        p.gradient_norm = std::hypot(gb, gc);
        if (p.gradient_norm < opt.tolerance) return p;
        if (p.iterations >= opt.max_iterations) {
            char msg[128];
            std::snprintf(msg, sizeof msg, "platt_fit did not converge: gradient norm %.3e after %zu iterations",
                          p.gradient_norm, p.iterations);
            throw NumericError(msg);
        }
        const double damp = 1e-10 * (hbb + hcc) + 1e-14;
        hbb += damp, hcc += damp;
        const double det = hbb * hcc - hbc * hbc;
        double db = -(hcc * gb - hbc * gc) / det;
        double dc = -(hbb * gc - hbc * gb) / det;
        if (!std::isfinite(db) || !std::isfinite(dc) || db * gb + dc * gc >= 0.0) {
            db = -gb;
            dc = -gc;
        }
        const double slope = db * gb + dc * gc;
        double t = 1.0;
        double f_new = platt_objective(ell, labels, p.b + t * db, p.c + t * dc);
        while (f_new > f + 1e-4 * t * slope && t > 1e-12) {
            t *= 0.5;
            f_new = platt_objective(ell, labels, p.b + t * db, p.c + t * dc);
        }
        // No representable decrease left along a descent direction.
        if (f_new >= f && p.gradient_norm < std::sqrt(opt.tolerance)) return p;
        p.b += t * db;
        p.c += t * dc;
        f = f_new;
    }
}

inline double platt_apply(const PlattParams& params, double score) {
    return sigmoid(params.b * safe_logit(score) + params.c);
}

inline std::vector<double> platt_apply(const PlattParams& params, std::span<const double> scores) {
    std::vector<double> out(scores.size());
    for (std::size_t k = 0; k < scores.size(); ++k) out[k] = platt_apply(params, scores[k]);
    return out;
}

inline PropensityScores platt_apply(const PlattParams& params, const PropensityScores& raw) {
    return {raw.pairs, platt_apply(params, raw.scores), "platt", raw.floor};
}

// ---------------------------------------------------------------------------
// Model averaging: MC-Dropout and deep ensembles

/// Mean of `passes` dropout-active predictions, pass t seeded with derive_seed(seed, t).
inline std::vector<double> average_dropout_passes(const nn::TrainedModel& model, std::span<const Pair> pairs,
                                                  std::size_t passes, Seed seed) {
    std::vector<double> mean(pairs.size(), 0.0);
    for (std::size_t t = 0; t < passes; ++t) {
        const auto pass = nn::predict(model, pairs, nn::PredictMode::with_dropout(derive_seed(seed, t)));
        for (std::size_t k = 0; k < pairs.size(); ++k) mean[k] += pass[k];
    }
    for (auto& m : mean) m /= static_cast<double>(passes);
    return mean;
}

inline PropensityScores mc_dropout_scores(const nn::TrainedModel& model, std::span<const Pair> pairs,
                                          std::size_t passes, Seed seed) {
    if (!(model.spec.dropout_rate > 0.0)) throw Error("mc_dropout_scores: model has no dropout");
    if (passes < 2) throw Error("mc_dropout_scores: need at least 2 passes");
    return {{pairs.begin(), pairs.end()}, average_dropout_passes(model, pairs, passes, seed), "mc-dropout", {}};
}

struct EnsembleScorer {
    std::vector<nn::TrainedModel> members;
};

inline Seed ensemble_member_seed(Seed seed, std::size_t member) {
    return derive_seed(derive_seed(seed, stream::ensemble), member);
}

/// Member i is initialized and shuffled with ensemble_member_seed(seed, i).
inline EnsembleScorer train_ensemble(const ObservationDataset& obs, const nn::ModelSpec& spec,
                                     const nn::TrainConfig& config, std::size_t size, Seed seed) {
    if (size < 2) throw Error("train_ensemble: ensemble size must be >= 2");
    EnsembleScorer e;
    e.members = parallel_map(size, [&](std::size_t i) {
        return train_propensity(obs, spec, config, ensemble_member_seed(seed, i));
    });
    return e;
}

inline PropensityScores ensemble_scores(const EnsembleScorer& ensemble, std::span<const Pair> pairs) {
    if (ensemble.members.empty()) throw Error("ensemble_scores: empty ensemble");
    const auto& spec = ensemble.members.front().spec;
    std::vector<double> mean(pairs.size(), 0.0);
    for (const auto& m : ensemble.members) {
        if (!(m.spec == spec)) throw Error("ensemble_scores: members do not share one spec");
        const auto p = nn::predict(m, pairs);
        for (std::size_t k = 0; k < pairs.size(); ++k) mean[k] += p[k];
    }
    for (auto& m : mean) m /= static_cast<double>(ensemble.members.size());
    return {{pairs.begin(), pairs.end()}, std::move(mean), "ensemble", {}};
}

}  // namespace calips
