#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calips/data.hpp"
#include "calips/nn.hpp"
#include "calips/recommender.hpp"

namespace calips {

/// sum_{k=1..min(K, n)} rel_k / log2(k + 1)
inline double dcg_at_k(std::span<const int> relevance, std::size_t k) {
    if (k < 1) throw Error("dcg_at_k: K must be >= 1");
    double total = 0.0;
    const auto n = std::min(k, relevance.size());
    for (std::size_t r = 0; r < n; ++r)
        if (relevance[r]) total += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    return total;
}

/// Number of relevant items in the top K (not normalized).
inline double recall_at_k(std::span<const int> relevance, std::size_t k) {
    if (k < 1) throw Error("recall_at_k: K must be >= 1");
    double total = 0.0;
    const auto n = std::min(k, relevance.size());
    for (std::size_t r = 0; r < n; ++r) total += relevance[r] ? 1.0 : 0.0;
    return total;
}

/// One method's row: DCG@K and Recall@K per cutoff plus their overall mean.
struct MetricsRow {
    std::vector<std::size_t> ks;
    std::vector<double> dcg;
    std::vector<double> recall;
    double average = 0.0;
    std::size_t users = 0;
};

using MetricsTable = std::map<std::string, MetricsRow>;

inline const std::vector<std::size_t> kDefaultKs{2, 4, 6};

/// Ranks each user's test items by model score and averages the metrics over
/// users that have at least one test item.
inline MetricsRow evaluate(const nn::TrainedModel& model, const RatingDataset& test,
                           std::span<const std::size_t> ks = kDefaultKs) {
    if (test.empty()) throw Error("evaluate: empty test set");
    if (ks.empty()) throw Error("evaluate: no cutoffs");
    std::vector<std::vector<Index>> items(test.n_users());
    std::unordered_map<std::uint64_t, int> relevant;
    for (const auto& e : test.entries()) {
        items[e.user].push_back(e.item);
        relevant[pair_key(e.user, e.item)] = e.relevant ? 1 : 0;
    }
    MetricsRow row;
    row.ks.assign(ks.begin(), ks.end());
    row.dcg.assign(ks.size(), 0.0);
    row.recall.assign(ks.size(), 0.0);
    std::vector<int> rel;
    for (std::size_t u = 0; u < items.size(); ++u) {
        if (items[u].empty()) continue;
        std::sort(items[u].begin(), items[u].end());
        const auto ranking = predict_ranking(model, static_cast<Index>(u), items[u]);
        rel.clear();
        for (const auto& r : ranking) rel.push_back(relevant.at(pair_key(static_cast<Index>(u), r.item)));
        for (std::size_t j = 0; j < ks.size(); ++j) {
            row.dcg[j] += dcg_at_k(rel, ks[j]);
            row.recall[j] += recall_at_k(rel, ks[j]);
        }
        ++row.users;
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < ks.size(); ++j) {
        row.dcg[j] /= static_cast<double>(row.users);
        row.recall[j] /= static_cast<double>(row.users);
        sum += row.dcg[j] + row.recall[j];
    }
    row.average = sum / static_cast<double>(2 * ks.size());
    return row;
}

inline nlohmann::json to_json(const MetricsRow& row) {
    nlohmann::json j;
    for (std::size_t k = 0; k < row.ks.size(); ++k) {
        j["dcg@" + std::to_string(row.ks[k])] = row.dcg[k];
        j["recall@" + std::to_string(row.ks[k])] = row.recall[k];
    }
    j["average"] = row.average;
    return j;
}

/// method,K,dcg,recall
inline void write_metrics_csv(const MetricsTable& table, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    out << "method,K,dcg,recall\n";
    for (const auto& [method, row] : table)
        for (std::size_t k = 0; k < row.ks.size(); ++k)
            out << method << ',' << row.ks[k] << ',' << row.dcg[k] << ',' << row.recall[k] << '\n';
}

}  // namespace calips
