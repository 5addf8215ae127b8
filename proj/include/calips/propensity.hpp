#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "calips/data.hpp"
#include "calips/nn.hpp"

namespace calips {

inline constexpr double kDefaultPropensityFloor = 0.05;

/// Propensity estimates aligned with `pairs`. `kind` is "raw" or the name of
/// the calibration method that produced them.
struct PropensityScores {
    std::vector<Pair> pairs;
    std::vector<double> scores;
    std::string kind = "raw";
    std::optional<double> floor;

    std::size_t size() const { return scores.size(); }
};

inline std::vector<nn::LabeledPair> to_labeled(const ObservationDataset& obs) {
    std::vector<nn::LabeledPair> out;
    out.reserve(obs.samples.size());
    for (const auto& s : obs.samples) out.push_back({s.user, s.item, static_cast<double>(s.label)});
    return out;
}

inline std::vector<Pair> to_pairs(const ObservationDataset& obs) {
    std::vector<Pair> out;
    out.reserve(obs.samples.size());
    for (const auto& s : obs.samples) out.push_back({s.user, s.item});
    return out;
}

inline std::vector<int> to_labels(const ObservationDataset& obs) {
    std::vector<int> out;
    out.reserve(obs.samples.size());
    for (const auto& s : obs.samples) out.push_back(s.label);
    return out;
}

/// Trains the observed-vs-unobserved classifier with BCE.
inline nn::TrainedModel train_propensity(const ObservationDataset& obs, nn::ModelSpec spec,
                                         nn::TrainConfig config, Seed seed) {
    if (obs.samples.empty()) throw Error("train_propensity: empty observation dataset");
    if (obs.positives() * 2 != obs.samples.size())
        throw Error("train_propensity: observation dataset is not balanced");
    spec.n_users = obs.n_users;
    spec.n_items = obs.n_items;
    config.loss = nn::LossKind::bce;
    config.per_sample_weights.reset();
    const auto samples = to_labeled(obs);
    return nn::train(nn::init(spec, seed), samples, config, seed);
}

/// Deterministic-mode scores for exactly the dataset's observed pairs.
inline PropensityScores score_observed(const nn::TrainedModel& model, const RatingDataset& dataset) {
    PropensityScores out;
    out.pairs = dataset.pairs();
    out.scores = nn::predict(model, out.pairs);
    return out;
}

inline PropensityScores clip_floor(PropensityScores scores, double floor) {
    if (!(floor > 0.0 && floor < 0.5)) throw Error("clip_floor: floor must be in (0, 0.5)");
    for (auto& s : scores.scores) s = std::max(s, floor);
    scores.floor = floor;
    return scores;
}

/// user,item,raw_score,calibrated_score
inline void write_scores_csv(const PropensityScores& raw, const PropensityScores& calibrated,
                             const std::filesystem::path& path) {
    if (raw.size() != calibrated.size() || raw.pairs != calibrated.pairs)
        throw Error("write_scores_csv: raw and calibrated scores are not aligned");
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    out << "user,item,raw_score,calibrated_score\n";
    for (std::size_t k = 0; k < raw.size(); ++k)
        out << raw.pairs[k].user << ',' << raw.pairs[k].item << ',' << raw.scores[k] << ','
            << calibrated.scores[k] << '\n';
}

struct ScoreTable {
    PropensityScores raw;
    PropensityScores calibrated;
};

inline ScoreTable read_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    ScoreTable t;
    t.calibrated.kind = "calibrated";
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line_no == 1) continue;
        std::istringstream row(line);
        std::string f[4];
        for (auto& x : f)
            if (!std::getline(row, x, ','))
                throw LoadError(path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
        try {
            const Pair p{static_cast<Index>(std::stoul(f[0])), static_cast<Index>(std::stoul(f[1]))};
            t.raw.pairs.push_back(p);
            t.calibrated.pairs.push_back(p);
            t.raw.scores.push_back(std::stod(f[2]));
            t.calibrated.scores.push_back(std::stod(f[3]));
        } catch (const std::exception&) {
            throw LoadError(path.string() + ":" + std::to_string(line_no) + ": bad number");
        }
    }
    return t;
}

}  // namespace calips
