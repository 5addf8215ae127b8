#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "calips/common.hpp"

namespace calips {

using Index = std::uint32_t;

struct Pair {
    Index user = 0;
    Index item = 0;
    friend bool operator==(const Pair&, const Pair&) = default;
};

inline std::uint64_t pair_key(Index user, Index item) {
    return (static_cast<std::uint64_t>(user) << 32) | item;
}
inline std::uint64_t pair_key(Pair p) { return pair_key(p.user, p.item); }

struct Rating {
    Index user = 0;
    Index item = 0;
    int rating = 0;
    bool relevant = false;
    friend bool operator==(const Rating&, const Rating&) = default;
};

inline constexpr int kDefaultThreshold = 4;

/// Sparse explicit ratings over an n_users x n_items universe. Presence of an
/// entry is the observation indicator; `relevant` is the binarized label.
class RatingDataset {
public:
    RatingDataset() = default;

    /// Validates indices, ratings in 1..5 and pair uniqueness, then labels
    /// each entry with rating >= threshold.
    RatingDataset(std::size_t n_users, std::size_t n_items, std::vector<Rating> entries,
                  int threshold = kDefaultThreshold)
        : n_users_(n_users), n_items_(n_items), threshold_(threshold), entries_(std::move(entries)) {
        if (threshold < 1 || threshold > 5) throw Error("binarization threshold must be in 1..5");
        keys_.reserve(entries_.size());
        for (auto& e : entries_) {
            if (e.user >= n_users_ || e.item >= n_items_)
                throw Error("rating index out of range: (" + std::to_string(e.user) + ", " +
                            std::to_string(e.item) + ")");
            if (e.rating < 1 || e.rating > 5)
                throw Error("rating outside 1..5: " + std::to_string(e.rating));
            if (!keys_.insert(pair_key(e.user, e.item)).second)
                throw Error("duplicate (user, item) pair: (" + std::to_string(e.user) + ", " +
                            std::to_string(e.item) + ")");
            e.relevant = e.rating >= threshold_;
        }
    }

    std::size_t n_users() const { return n_users_; }
    std::size_t n_items() const { return n_items_; }
    std::size_t universe_size() const { return n_users_ * n_items_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    int threshold() const { return threshold_; }
    const std::vector<Rating>& entries() const { return entries_; }

    bool contains(Index user, Index item) const { return keys_.count(pair_key(user, item)) != 0; }

    std::vector<Pair> pairs() const {
        std::vector<Pair> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back({e.user, e.item});
        return out;
    }

    std::vector<int> relevance() const {
        std::vector<int> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.relevant ? 1 : 0);
        return out;
    }

private:
    std::size_t n_users_ = 0;
    std::size_t n_items_ = 0;
    int threshold_ = kDefaultThreshold;
    std::vector<Rating> entries_;
    std::unordered_set<std::uint64_t> keys_;
};

struct ObservationSample {
    Index user = 0;
    Index item = 0;
    int label = 0;
};

/// Balanced (observed = 1 / unobserved = 0) samples for the propensity classifier.
struct ObservationDataset {
    std::size_t n_users = 0;
    std::size_t n_items = 0;
    std::vector<ObservationSample> samples;

    std::size_t positives() const {
        return static_cast<std::size_t>(std::count_if(
            samples.begin(), samples.end(), [](const auto& s) { return s.label == 1; }));
    }
};

struct SplitPair {
    RatingDataset train;
    RatingDataset validation;
    RatingDataset test;
};

/// Dense original-id -> index maps for triple-format datasets.
struct IdMap {
    std::map<long long, Index> users;
    std::map<long long, Index> items;
};

inline RatingDataset binarize(const RatingDataset& dataset, int threshold) {
    return RatingDataset(dataset.n_users(), dataset.n_items(), dataset.entries(), threshold);
}

/// Reads a dense whitespace-separated integer matrix, one row per user; 0 means missing.
inline RatingDataset read_coat_matrix(const std::filesystem::path& path,
                                      int threshold = kDefaultThreshold) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::vector<Rating> entries;
    std::string line;
    std::size_t line_no = 0;
    std::size_t width = 0;
    Index user = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream row(line);
        std::string token;
        std::vector<int> values;
        while (row >> token) {
            std::size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(token, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != token.size())
                throw LoadError(path.string() + ":" + std::to_string(line_no) +
                                ": non-integer token '" + token + "'");
            values.push_back(v);
        }
        if (values.empty()) continue;
        if (width == 0) width = values.size();
        if (values.size() != width)
            throw LoadError(path.string() + ":" + std::to_string(line_no) + ": row has " +
                            std::to_string(values.size()) + " columns, expected " +
                            std::to_string(width));
        for (std::size_t item = 0; item < values.size(); ++item) {
            const int v = values[item];
            if (v == 0) continue;
            if (v < 1 || v > 5)
                throw LoadError(path.string() + ":" + std::to_string(line_no) +
                                ": rating outside 0..5: " + std::to_string(v));
            entries.push_back({user, static_cast<Index>(item), v, false});
        }
        ++user;
    }
    if (user == 0) throw LoadError(path.string() + ": empty matrix file");
    return RatingDataset(user, width, std::move(entries), threshold);
}

inline void write_coat_matrix(const RatingDataset& dataset, const std::filesystem::path& path) {
    std::vector<int> dense(dataset.universe_size(), 0);
    for (const auto& e : dataset.entries()) dense[e.user * dataset.n_items() + e.item] = e.rating;
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (std::size_t u = 0; u < dataset.n_users(); ++u) {
        for (std::size_t i = 0; i < dataset.n_items(); ++i) {
            if (i) out << ' ';
            out << dense[u * dataset.n_items() + i];
        }
        out << '\n';
    }
}

/// Entry-level uniform split. The train part has floor(n * train_fraction) entries.
inline std::pair<RatingDataset, RatingDataset> split_mnar(const RatingDataset& dataset,
                                                          double train_fraction, Seed seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw Error("train_fraction must be in (0, 1)");
    if (dataset.empty()) throw Error("split_mnar: empty dataset");
    const std::size_t n = dataset.size();
    const auto n_train = static_cast<std::size_t>(std::floor(n * train_fraction + 1e-9));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    auto eng = make_engine(derive_seed(seed, stream::split));
    shuffle(order, eng);
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::vector<Rating> train, validation;
    train.reserve(n_train);
    validation.reserve(n - n_train);
    for (std::size_t k = 0; k < n; ++k)
        (k < n_train ? train : validation).push_back(dataset.entries()[order[k]]);
    return {RatingDataset(dataset.n_users(), dataset.n_items(), std::move(train), dataset.threshold()),
            RatingDataset(dataset.n_users(), dataset.n_items(), std::move(validation),
                          dataset.threshold())};
}

namespace detail {

/// Draws `count` distinct pairs that are absent from `dataset` and from `exclude`.
inline std::vector<Pair> sample_unobserved(const RatingDataset& dataset, std::size_t count,
                                           Engine& eng,
                                           const std::unordered_set<std::uint64_t>& exclude = {}) {
    const std::size_t universe = dataset.universe_size();
    std::size_t blocked = dataset.size();
    for (auto k : exclude)
        if (!dataset.contains(static_cast<Index>(k >> 32), static_cast<Index>(k & 0xffffffffu)))
            ++blocked;
    if (universe < blocked || universe - blocked < count)
        throw Error("too few unobserved pairs: need " + std::to_string(count) + ", have " +
                    std::to_string(universe - std::min(universe, blocked)));
    const std::size_t available = universe - blocked;
    std::vector<Pair> out;
    out.reserve(count);
    const auto n_items = dataset.n_items();
    auto is_blocked = [&](std::uint64_t cell) {
        const auto u = static_cast<Index>(cell / n_items);
        const auto i = static_cast<Index>(cell % n_items);
        return dataset.contains(u, i) || exclude.count(pair_key(u, i)) != 0;
    };
    if (count * 2 <= available) {
        std::unordered_set<std::uint64_t> chosen;
        chosen.reserve(count * 2);
        while (out.size() < count) {
            const auto cell = uniform_index(eng, universe);
            if (is_blocked(cell) || !chosen.insert(cell).second) continue;
            out.push_back({static_cast<Index>(cell / n_items), static_cast<Index>(cell % n_items)});
        }
        return out;
    }
    std::vector<std::uint64_t> cells;
    cells.reserve(available);
    for (std::uint64_t c = 0; c < universe; ++c)
        if (!is_blocked(c)) cells.push_back(c);
    for (std::size_t k = 0; k < count; ++k) {
        const auto j = k + static_cast<std::size_t>(uniform_index(eng, cells.size() - k));
        std::swap(cells[k], cells[j]);
        out.push_back({static_cast<Index>(cells[k] / n_items), static_cast<Index>(cells[k] % n_items)});
    }
    return out;
}

}  // namespace detail

/// Every observed pair as label 1 plus an equal number of unobserved pairs
/// (uniform, without replacement) as label 0. Pairs in `also_observed` (e.g.
/// the other half of an MNAR split) are never drawn as negatives.
inline ObservationDataset build_observation_dataset(const RatingDataset& dataset, Seed seed,
                                                    const RatingDataset* also_observed = nullptr) {
    ObservationDataset obs{dataset.n_users(), dataset.n_items(), {}};
    obs.samples.reserve(dataset.size() * 2);
    for (const auto& e : dataset.entries()) obs.samples.push_back({e.user, e.item, 1});
    std::unordered_set<std::uint64_t> exclude;
    if (also_observed)
        for (const auto& e : also_observed->entries()) exclude.insert(pair_key(e.user, e.item));
    auto eng = make_engine(derive_seed(seed, stream::negatives));
    for (const auto& p : detail::sample_unobserved(dataset, dataset.size(), eng, exclude))
        obs.samples.push_back({p.user, p.item, 0});
    return obs;
}

inline SplitPair load_coat(const std::filesystem::path& directory, double train_fraction = 0.9,
                           Seed seed = 0, int threshold = kDefaultThreshold) {
    const auto mnar = read_coat_matrix(directory / "train.ascii", threshold);
    const auto mar = read_coat_matrix(directory / "test.ascii", threshold);
    if (mnar.n_users() != mar.n_users() || mnar.n_items() != mar.n_items())
        throw LoadError("train.ascii and test.ascii disagree on matrix shape");
    auto [train, validation] = split_mnar(mnar, train_fraction, seed);
    return {std::move(train), std::move(validation), mar};
}

struct Triple {
    long long user = 0;
    long long item = 0;
    int rating = 0;
};

inline std::vector<Triple> read_triples(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::vector<Triple> out;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream row(line);
        std::vector<std::string> tokens;
        for (std::string t; row >> t;) tokens.push_back(t);
        if (tokens.empty()) continue;
        const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
        if (tokens.size() != 3) throw LoadError(where + "expected 3 fields");
        Triple t;
        try {
            std::size_t a = 0, b = 0, c = 0;
            t.user = std::stoll(tokens[0], &a);
            t.item = std::stoll(tokens[1], &b);
            t.rating = std::stoi(tokens[2], &c);
            if (a != tokens[0].size() || b != tokens[1].size() || c != tokens[2].size())
                throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw LoadError(where + "non-integer field");
        }
        if (t.rating < 1 || t.rating > 5)
            throw LoadError(where + "rating outside 1..5: " + std::to_string(t.rating));
        if (!seen.insert(tokens[0] + " " + tokens[1]).second)
            throw LoadError(where + "duplicate (user, item) pair");
        out.push_back(t);
    }
    return out;
}

inline void write_id_map(const std::map<long long, Index>& map, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& [original, dense] : map) out << original << ' ' << dense << '\n';
}

struct YahooData {
    SplitPair splits;
    IdMap ids;
};

/// Triple files (user item rating, 1-based ids, tab/comma/space separated).
/// Looks for train.txt/test.txt, then the R3 distribution names.
inline YahooData load_yahoo(const std::filesystem::path& directory, double train_fraction = 0.9,
                            Seed seed = 0, int threshold = kDefaultThreshold) {
    auto pick = [&](const char* short_name, const char* long_name) {
        const auto a = directory / short_name;
        return std::filesystem::exists(a) ? a : directory / long_name;
    };
    const auto mnar_t = read_triples(pick("train.txt", "ydata-ymusic-rating-study-v1-0-train.txt"));
    const auto mar_t = read_triples(pick("test.txt", "ydata-ymusic-rating-study-v1-0-test.txt"));
    IdMap ids;
    for (const auto* part : {&mnar_t, &mar_t})
        for (const auto& t : *part) {
            ids.users.emplace(t.user, 0);
            ids.items.emplace(t.item, 0);
        }
    Index next = 0;
    for (auto& [_, v] : ids.users) v = next++;
    next = 0;
    for (auto& [_, v] : ids.items) v = next++;
    auto to_dataset = [&](const std::vector<Triple>& triples) {
        std::vector<Rating> entries;
        entries.reserve(triples.size());
        for (const auto& t : triples)
            entries.push_back({ids.users.at(t.user), ids.items.at(t.item), t.rating, false});
        return RatingDataset(ids.users.size(), ids.items.size(), std::move(entries), threshold);
    };
    auto mnar = to_dataset(mnar_t);
    auto test = to_dataset(mar_t);
    if (mnar.empty()) throw LoadError("empty MNAR triple file in " + directory.string());
    auto [train, validation] = split_mnar(mnar, train_fraction, seed);
    return {{std::move(train), std::move(validation), std::move(test)}, std::move(ids)};
}

}  // namespace calips
