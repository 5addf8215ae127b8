#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "calips/common.hpp"
#include "calips/data.hpp"

namespace calips {

/// Row-major dense matrix.
template <class T>
struct Grid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Grid<auto>& o) const { return rows == o.rows && cols == o.cols; }
};

struct WorldConfig {
    std::size_t n_users = 50;
    std::size_t n_items = 50;
    double bias_strength = 1.0;
    double base_rate = 0.1;
    std::size_t rank = 4;
    /// Std-dev of per-cell Gaussian noise added to the latent affinity before rounding.
    double rating_noise = 0.0;
    int threshold = kDefaultThreshold;
    /// Std-dev of per-item / per-user log-exposure multipliers on the propensity
    /// (item popularity and user activity). Zero keeps propensity a function of
    /// the rating alone.
    double item_exposure = 0.0;
    double user_activity = 0.0;
};

inline constexpr double kPropensityFloor = 0.01;

/// Ground truth that real data never reveals: every rating and every true propensity.
struct SyntheticWorld {
    Grid<double> true_ratings;
    Grid<double> true_propensities;
    Grid<int> relevance;

    std::size_t n_users() const { return true_ratings.rows; }
    std::size_t n_items() const { return true_ratings.cols; }
    std::size_t universe_size() const { return true_ratings.size(); }
};

struct IndicatorSample {
    Grid<int> indicator;
};

inline SyntheticWorld generate_world(const WorldConfig& config, Seed seed) {
    if (config.n_users < 1 || config.n_items < 1) throw Error("world dimensions must be >= 1");
    if (!(config.base_rate > 0.0 && config.base_rate < 1.0)) throw Error("base_rate must be in (0, 1)");
    if (!(config.bias_strength >= 0.0)) throw Error("bias_strength must be >= 0");
    if (config.rank < 1) throw Error("rank must be >= 1");
    if (!(config.rating_noise >= 0.0)) throw Error("rating_noise must be >= 0");
    if (!(config.item_exposure >= 0.0 && config.user_activity >= 0.0))
        throw Error("exposure spreads must be >= 0");

    auto eng = make_engine(derive_seed(seed, stream::world));
    const std::size_t k = config.rank;
    std::vector<double> users(config.n_users * k), items(config.n_items * k);
    for (auto& x : users) x = standard_normal(eng);
    for (auto& x : items) x = standard_normal(eng);

    SyntheticWorld w;
    w.true_ratings = Grid<double>(config.n_users, config.n_items);
    w.true_propensities = Grid<double>(config.n_users, config.n_items);
    w.relevance = Grid<int>(config.n_users, config.n_items);
    const double scale = 1.0 / std::sqrt(static_cast<double>(k) + config.rating_noise * config.rating_noise);
    double total = 0.0;
    for (std::size_t u = 0; u < config.n_users; ++u)
        for (std::size_t i = 0; i < config.n_items; ++i) {
            double affinity = 0.0;
            for (std::size_t f = 0; f < k; ++f) affinity += users[u * k + f] * items[i * k + f];
            if (config.rating_noise > 0.0) affinity += config.rating_noise * standard_normal(eng);
            const double r = std::clamp(std::round(3.0 + 1.25 * affinity * scale), 1.0, 5.0);
            w.true_ratings(u, i) = r;
            w.relevance(u, i) = r >= config.threshold ? 1 : 0;
            total += r;
        }
    const double mean = total / static_cast<double>(w.universe_size());
    std::vector<double> user_log(config.n_users, 0.0), item_log(config.n_items, 0.0);
    if (config.user_activity > 0.0)
        for (auto& x : user_log) x = config.user_activity * standard_normal(eng);
    if (config.item_exposure > 0.0)
        for (auto& x : item_log) x = config.item_exposure * standard_normal(eng);
    for (std::size_t u = 0; u < config.n_users; ++u)
        for (std::size_t i = 0; i < config.n_items; ++i) {
            const double log_p = config.bias_strength * (w.true_ratings(u, i) - mean) + user_log[u] + item_log[i];
            w.true_propensities(u, i) = std::clamp(config.base_rate * std::exp(log_p), kPropensityFloor, 1.0);
        }
    return w;
}

/// One independent Bernoulli(p_ui) draw per cell.
inline IndicatorSample sample_indicator(const SyntheticWorld& world, Seed seed) {
    auto eng = make_engine(derive_seed(seed, stream::indicator));
    IndicatorSample s{Grid<int>(world.n_users(), world.n_items())};
    for (std::size_t c = 0; c < world.universe_size(); ++c)
        s.indicator.data[c] = uniform01(eng) < world.true_propensities.data[c] ? 1 : 0;
    return s;
}

inline RatingDataset world_to_dataset(const SyntheticWorld& world, const IndicatorSample& sample,
                                      int threshold = kDefaultThreshold) {
    if (!world.true_ratings.same_shape(sample.indicator))
        throw Error("indicator shape does not match world");
    std::vector<Rating> entries;
    for (std::size_t u = 0; u < world.n_users(); ++u)
        for (std::size_t i = 0; i < world.n_items(); ++i)
            if (sample.indicator(u, i))
                entries.push_back({static_cast<Index>(u), static_cast<Index>(i),
                                   static_cast<int>(world.true_ratings(u, i)), false});
    return RatingDataset(world.n_users(), world.n_items(), std::move(entries), threshold);
}

/// Missing-at-random test ratings: `per_user` uniformly chosen items for each
/// user, drawn from the items the user has not rated in `exclude`.
inline RatingDataset sample_mar_test(const SyntheticWorld& world, const RatingDataset& exclude,
                                     std::size_t per_user, Seed seed) {
    auto eng = make_engine(derive_seed(seed, stream::test_items));
    std::vector<Rating> entries;
    for (std::size_t u = 0; u < world.n_users(); ++u) {
        std::vector<Index> candidates;
        for (std::size_t i = 0; i < world.n_items(); ++i)
            if (!exclude.contains(static_cast<Index>(u), static_cast<Index>(i)))
                candidates.push_back(static_cast<Index>(i));
        const auto take = std::min(per_user, candidates.size());
        for (std::size_t k = 0; k < take; ++k) {
            const auto j = k + static_cast<std::size_t>(uniform_index(eng, candidates.size() - k));
            std::swap(candidates[k], candidates[j]);
        }
        std::sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take));
        for (std::size_t k = 0; k < take; ++k)
            entries.push_back({static_cast<Index>(u), candidates[k],
                               static_cast<int>(world.true_ratings(u, candidates[k])), false});
    }
    return RatingDataset(world.n_users(), world.n_items(), std::move(entries), exclude.threshold());
}

inline void write_propensity_csv(const SyntheticWorld& world, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    out << "user,item,propensity\n";
    for (std::size_t u = 0; u < world.n_users(); ++u)
        for (std::size_t i = 0; i < world.n_items(); ++i)
            out << u << ',' << i << ',' << world.true_propensities(u, i) << '\n';
}

/// Writes train.ascii (one MNAR indicator draw), test.ascii (MAR sample) and
/// propensity.csv, i.e. a directory that load_coat reads.
inline void export_coat_layout(const SyntheticWorld& world, const std::filesystem::path& directory,
                               std::size_t mar_per_user, Seed seed, int threshold = kDefaultThreshold) {
    std::filesystem::create_directories(directory);
    const auto mnar = world_to_dataset(world, sample_indicator(world, seed), threshold);
    const auto mar = sample_mar_test(world, mnar, mar_per_user, seed);
    write_coat_matrix(mnar, directory / "train.ascii");
    write_coat_matrix(mar, directory / "test.ascii");
    write_propensity_csv(world, directory / "propensity.csv");
}

}  // namespace calips
