#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <unordered_map>
#include <vector>

#include "calips/data.hpp"
#include "calips/nn.hpp"
#include "calips/propensity.hpp"

namespace calips {

/// Observed pairs (relevance label, weight 1/p_hat) followed by sampled
/// unobserved pairs (label 0, weight 1).
struct RecTrainSet {
    std::vector<nn::LabeledPair> samples;
    std::vector<double> weights;
    std::vector<double> propensities;  // aligned with the observed prefix
    std::size_t n_observed = 0;
};

namespace detail {

inline std::vector<double> align_scores(const RatingDataset& dataset, const PropensityScores* scores) {
    std::vector<double> out(dataset.size(), 1.0);
    if (!scores) return out;
    if (scores->pairs.size() != scores->scores.size()) throw Error("propensity scores are misaligned");
    std::unordered_map<std::uint64_t, double> lookup;
    lookup.reserve(scores->size());
    for (std::size_t k = 0; k < scores->size(); ++k) lookup[pair_key(scores->pairs[k])] = scores->scores[k];
    for (std::size_t k = 0; k < dataset.size(); ++k) {
        const auto& e = dataset.entries()[k];
        const auto it = lookup.find(pair_key(e.user, e.item));
        if (it == lookup.end()) throw Error("propensity scores do not cover every observed pair");
        if (!(it->second > 0.0)) throw Error("propensity scores must be > 0");
        out[k] = it->second;
    }
    return out;
}

inline std::unordered_set<std::uint64_t> key_set(const RatingDataset* d) {
    std::unordered_set<std::uint64_t> out;
    if (d)
        for (const auto& e : d->entries()) out.insert(pair_key(e.user, e.item));
    return out;
}

}  // namespace detail

/// `scores == nullptr` gives the unweighted baseline set. Negatives avoid
/// pairs observed in `dataset` and in `also_observed`.
inline RecTrainSet build_rec_trainset(const RatingDataset& dataset, const PropensityScores* scores,
                                      double neg_ratio, Seed seed,
                                      const RatingDataset* also_observed = nullptr) {
    if (!(neg_ratio >= 0.0)) throw Error("build_rec_trainset: neg_ratio must be >= 0");
    RecTrainSet set;
    set.propensities = detail::align_scores(dataset, scores);
    set.n_observed = dataset.size();
    const auto n_neg = static_cast<std::size_t>(std::llround(neg_ratio * static_cast<double>(dataset.size())));
    set.samples.reserve(dataset.size() + n_neg);
    set.weights.reserve(dataset.size() + n_neg);
    for (std::size_t k = 0; k < dataset.size(); ++k) {
        const auto& e = dataset.entries()[k];
        set.samples.push_back({e.user, e.item, e.relevant ? 1.0 : 0.0});
        set.weights.push_back(1.0 / set.propensities[k]);
    }
    auto eng = make_engine(derive_seed(seed, stream::rec_negatives));
    for (const auto& p : detail::sample_unobserved(dataset, n_neg, eng, detail::key_set(also_observed))) {
        set.samples.push_back({p.user, p.item, 0.0});
        set.weights.push_back(1.0);
    }
    return set;
}

/// BCE on relevance with per-sample weights taken from the train set.
inline nn::TrainedModel train_ips(const RecTrainSet& trainset, const nn::ModelSpec& spec,
                                  nn::TrainConfig config, Seed seed) {
    config.loss = nn::LossKind::bce;
    config.per_sample_weights = trainset.weights;
    return nn::train(nn::init(spec, seed), trainset.samples, config, seed);
}

struct DrState {
    nn::TrainedModel prediction_model;
    nn::TrainedModel imputation_model;
};

/// One pair of the doubly robust objective: observed pairs carry their label
/// and propensity; unobserved pairs only contribute the imputed error.
struct DrSample {
    Index user = 0;
    Index item = 0;
    bool observed = false;
    double label = 0.0;
    double propensity = 1.0;
};

/// e_hat = BCE(prediction, imputed label); e = BCE(prediction, label).
/// Per sample: e_hat + o * (e - e_hat) / p_hat. Returns (value, d/dlogit).
inline nn::SampleLoss dr_sample_loss(const DrSample& s, double logit, double prob, double imputed) {
    const auto imputed_err = nn::bce_loss(logit, prob, imputed);
    if (!s.observed) return imputed_err;
    const auto err = nn::bce_loss(logit, prob, s.label);
    return {imputed_err.value + (err.value - imputed_err.value) / s.propensity,
            imputed_err.dlogit + (err.dlogit - imputed_err.dlogit) / s.propensity};
}

/// Mean doubly robust objective of the current state over `samples`.
inline double dr_objective(const DrState& state, std::span<const DrSample> samples) {
    std::vector<Pair> pairs;
    pairs.reserve(samples.size());
    for (const auto& s : samples) pairs.push_back({s.user, s.item});
    const auto logits = nn::predict_logits(state.prediction_model, pairs);
    const auto imputed = nn::predict(state.imputation_model, pairs);
    double total = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k)
        total += dr_sample_loss(samples[k], logits[k], sigmoid(logits[k]), imputed[k]).value;
    return total / static_cast<double>(samples.size());
}

/// Doubly robust joint learning, alternating one epoch per phase:
///  (a) the imputation model regresses e_hat onto the observed errors e with
///      weights 1/p_hat, holding the prediction model fixed;
///  (b) the prediction model takes one epoch on the DR objective over the
///      observed pairs plus freshly sampled unobserved pairs, holding the
///      imputation model fixed.
inline DrState train_drjl(const RatingDataset& dataset, const PropensityScores* scores,
                          const nn::ModelSpec& spec, const nn::TrainConfig& config, Seed seed,
                          double neg_ratio = 1.0, const RatingDataset* also_observed = nullptr) {
    const auto propensities = detail::align_scores(dataset, scores);
    DrState state{nn::init(spec, derive_seed(seed, 0)), nn::init(spec, derive_seed(seed, 1))};
    const auto observed_pairs = dataset.pairs();
    std::vector<nn::LabeledPair> observed;
    observed.reserve(dataset.size());
    for (const auto& e : dataset.entries()) observed.push_back({e.user, e.item, e.relevant ? 1.0 : 0.0});
    std::vector<double> inv_p(propensities.size());
    for (std::size_t k = 0; k < inv_p.size(); ++k) inv_p[k] = 1.0 / propensities[k];
    const auto exclude = detail::key_set(also_observed);
    const auto n_neg = static_cast<std::size_t>(std::llround(neg_ratio * static_cast<double>(dataset.size())));

    nn::TrainConfig phase = config;
    phase.epochs = 1;
    std::vector<double> history;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const Seed epoch_seed = derive_seed(seed, 1000 + epoch);

        // (a) imputation phase
        const auto pred_logits = nn::predict_logits(state.prediction_model, observed_pairs);
        nn::LossFn impute_loss = [&](std::size_t k, double z, double g) {
            const double zf = pred_logits[k];
            const double pf = sigmoid(zf);
            const double e = nn::bce_loss(zf, pf, observed[k].label).value;
            const double e_hat = nn::bce_loss(zf, pf, g).value;
            const double diff = e_hat - e;
            (void)z;
            // d e_hat / d g = -logit(prediction); d g / d z = g (1 - g)
            return nn::SampleLoss{diff * diff, 2.0 * diff * (-zf) * g * (1.0 - g)};
        };
        nn::TrainConfig impute_cfg = phase;
        impute_cfg.loss = nn::LossKind::mse;
        impute_cfg.per_sample_weights = inv_p;
        try {
            state.imputation_model = nn::train_with_loss(std::move(state.imputation_model), observed, impute_loss,
                                                         impute_cfg, derive_seed(epoch_seed, 0));
        } catch (const NumericError& e) {
            throw NumericError(std::string("drjl imputation phase: ") + e.what());
        }

        // (b) prediction phase
        std::vector<DrSample> batch;
        batch.reserve(dataset.size() + n_neg);
        for (std::size_t k = 0; k < dataset.size(); ++k)
            batch.push_back({observed[k].user, observed[k].item, true, observed[k].label, propensities[k]});
        auto eng = make_engine(derive_seed(epoch_seed, stream::rec_negatives));
        for (const auto& p : detail::sample_unobserved(dataset, n_neg, eng, exclude))
            batch.push_back({p.user, p.item, false, 0.0, 1.0});
        std::vector<Pair> batch_pairs;
        batch_pairs.reserve(batch.size());
        for (const auto& s : batch) batch_pairs.push_back({s.user, s.item});
        const auto imputed = nn::predict(state.imputation_model, batch_pairs);
        std::vector<nn::LabeledPair> batch_samples;
        batch_samples.reserve(batch.size());
        for (const auto& s : batch) batch_samples.push_back({s.user, s.item, s.label});
        nn::LossFn dr_loss = [&](std::size_t k, double z, double p) {
            return dr_sample_loss(batch[k], z, p, imputed[k]);
        };
        nn::TrainConfig pred_cfg = phase;
        pred_cfg.per_sample_weights.reset();
        try {
            state.prediction_model = nn::train_with_loss(std::move(state.prediction_model), batch_samples, dr_loss,
                                                         pred_cfg, derive_seed(epoch_seed, 1));
        } catch (const NumericError& e) {
            throw NumericError(std::string("drjl prediction phase: ") + e.what());
        }
        history.push_back(state.prediction_model.loss_history.back());
    }
    state.prediction_model.loss_history = std::move(history);
    state.prediction_model.training_seed = seed;
    state.imputation_model.training_seed = seed;
    return state;
}

struct RankedItem {
    Index item = 0;
    double score = 0.0;
};

/// Descending by score; ties broken by lower item index.
inline std::vector<RankedItem> predict_ranking(const nn::TrainedModel& model, Index user,
                                               std::span<const Index> candidates) {
    std::vector<Pair> pairs;
    pairs.reserve(candidates.size());
    for (auto i : candidates) pairs.push_back({user, i});
    const auto logits = nn::predict_logits(model, pairs);
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return candidates[a] < candidates[b];
    });
    std::vector<RankedItem> out;
    out.reserve(order.size());
    for (auto k : order) out.push_back({candidates[k], sigmoid(logits[k])});
    return out;
}

}  // namespace calips
