#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calips/calib.hpp"
#include "calips/data.hpp"
#include "calips/estimators.hpp"
#include "calips/eval.hpp"
#include "calips/nn.hpp"
#include "calips/propensity.hpp"
#include "calips/recommender.hpp"
#include "calips/synth.hpp"

namespace calips {

/// Invalid configuration (exit code 1).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage failed (exit code 2); `stage` names it.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage(std::move(stage)) {}
    std::string stage;
};

struct PipelineConfig {
    std::string dataset = "coat";
    std::string data_dir;
    int threshold = kDefaultThreshold;
    double train_fraction = 0.9;
    Seed seed = 0;
    std::size_t replicas = 1;

    WorldConfig world{290, 300, 1.0, 0.025, 4, 0.0, kDefaultThreshold, 1.0, 0.5};
    std::size_t mar_per_user = 16;

    nn::ModelSpec prop_spec{0, 0, 8, {32, 16, 1}, 0.2};
    nn::TrainConfig prop_train{100, 128, 1.0, 0.0, nn::LossKind::bce, std::nullopt};
    double floor = kDefaultPropensityFloor;

    std::vector<std::string> calibrations{"none"};
    std::size_t bins = kDefaultBins;
    std::size_t mc_passes = 10;
    std::size_t ensemble_size = 10;
    double platt_tolerance = 1e-8;

    std::vector<std::string> methods{"base"};
    double neg_ratio = 1.0;
    nn::ModelSpec rec_spec{0, 0, 8, {32, 16, 1}, 0.2};
    nn::TrainConfig rec_train{50, 128, 0.5, 0.0, nn::LossKind::bce, std::nullopt};
    std::vector<std::size_t> ks{2, 4, 6};

    /// Empty: no artifacts are written.
    std::string output_dir;

    // audit
    std::size_t trials = 10000;
    double eta = 0.05;
    double hypothesis_count = 2.0;
};

namespace detail {

inline std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) out += (k ? "," : "") + v[k];
    return out;
}

template <class T>
std::string join_num(const std::vector<T>& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) out += (k ? "," : "") + std::to_string(v[k]);
    return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string part; std::getline(ss, part, ',');) {
        const auto b = part.find_first_not_of(" \t");
        const auto e = part.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(part.substr(b, e - b + 1));
    }
    return out;
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Flat key -> value form; keys match the CLI long-flag names.
inline std::map<std::string, std::string> to_kv(const PipelineConfig& c) {
    using detail::fmt_double;
    return {
        {"dataset", c.dataset},
        {"data-dir", c.data_dir},
        {"threshold", std::to_string(c.threshold)},
        {"train-fraction", fmt_double(c.train_fraction)},
        {"seed", std::to_string(c.seed)},
        {"seeds", std::to_string(c.replicas)},
        {"synth-users", std::to_string(c.world.n_users)},
        {"synth-items", std::to_string(c.world.n_items)},
        {"synth-bias", fmt_double(c.world.bias_strength)},
        {"synth-base-rate", fmt_double(c.world.base_rate)},
        {"synth-rank", std::to_string(c.world.rank)},
        {"synth-noise", fmt_double(c.world.rating_noise)},
        {"synth-mar-per-user", std::to_string(c.mar_per_user)},
        {"synth-item-exposure", fmt_double(c.world.item_exposure)},
        {"synth-user-activity", fmt_double(c.world.user_activity)},
        {"prop-dim", std::to_string(c.prop_spec.embedding_dim)},
        {"prop-layers", detail::join_num(c.prop_spec.mlp_layers)},
        {"prop-dropout", fmt_double(c.prop_spec.dropout_rate)},
        {"prop-epochs", std::to_string(c.prop_train.epochs)},
        {"prop-batch", std::to_string(c.prop_train.batch_size)},
        {"prop-lr", fmt_double(c.prop_train.learning_rate)},
        {"prop-decay", fmt_double(c.prop_train.weight_decay)},
        {"floor", fmt_double(c.floor)},
        {"calibration", detail::join(c.calibrations)},
        {"bins", std::to_string(c.bins)},
        {"mc-passes", std::to_string(c.mc_passes)},
        {"ensemble-size", std::to_string(c.ensemble_size)},
        {"platt-tolerance", fmt_double(c.platt_tolerance)},
        {"method", detail::join(c.methods)},
        {"neg-ratio", fmt_double(c.neg_ratio)},
        {"rec-dim", std::to_string(c.rec_spec.embedding_dim)},
        {"rec-layers", detail::join_num(c.rec_spec.mlp_layers)},
        {"rec-dropout", fmt_double(c.rec_spec.dropout_rate)},
        {"rec-epochs", std::to_string(c.rec_train.epochs)},
        {"rec-batch", std::to_string(c.rec_train.batch_size)},
        {"rec-lr", fmt_double(c.rec_train.learning_rate)},
        {"rec-decay", fmt_double(c.rec_train.weight_decay)},
        {"ks", detail::join_num(c.ks)},
        {"output", c.output_dir},
        {"trials", std::to_string(c.trials)},
        {"eta", fmt_double(c.eta)},
        {"hypothesis-count", fmt_double(c.hypothesis_count)},
    };
}

/// Applies key/value overrides; unknown keys and unparsable values are ConfigErrors.
inline void apply_kv(PipelineConfig& c, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, value] : kv) {
        auto num = [&](auto& field) {
            using T = std::decay_t<decltype(field)>;
            try {
                std::size_t used = 0;
                if constexpr (std::is_floating_point_v<T>) field = std::stod(value, &used);
                else if constexpr (std::is_signed_v<T>) field = static_cast<T>(std::stoll(value, &used));
                else {
                    if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
                    field = static_cast<T>(std::stoull(value, &used));
                }
                if (used != value.size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw ConfigError("bad value for '" + key + "': '" + value + "'");
            }
        };
        auto widths = [&](std::vector<std::size_t>& field) {
            field.clear();
            for (const auto& part : detail::split_list(value)) {
                std::size_t w = 0;
                try {
                    std::size_t used = 0;
                    w = std::stoull(part, &used);
                    if (used != part.size()) throw std::invalid_argument("trailing");
                } catch (const std::exception&) {
                    throw ConfigError("bad list value for '" + key + "': '" + value + "'");
                }
                field.push_back(w);
            }
        };
        if (key == "dataset") c.dataset = value;
        else if (key == "data-dir") c.data_dir = value;
        else if (key == "threshold") num(c.threshold);
        else if (key == "train-fraction") num(c.train_fraction);
        else if (key == "seed") num(c.seed);
        else if (key == "seeds") num(c.replicas);
        else if (key == "synth-users") num(c.world.n_users);
        else if (key == "synth-items") num(c.world.n_items);
        else if (key == "synth-bias") num(c.world.bias_strength);
        else if (key == "synth-base-rate") num(c.world.base_rate);
        else if (key == "synth-rank") num(c.world.rank);
        else if (key == "synth-noise") num(c.world.rating_noise);
        else if (key == "synth-mar-per-user") num(c.mar_per_user);
        else if (key == "synth-item-exposure") num(c.world.item_exposure);
        else if (key == "synth-user-activity") num(c.world.user_activity);
        else if (key == "prop-dim") num(c.prop_spec.embedding_dim);
        else if (key == "prop-layers") widths(c.prop_spec.mlp_layers);
        else if (key == "prop-dropout") num(c.prop_spec.dropout_rate);
        else if (key == "prop-epochs") num(c.prop_train.epochs);
        else if (key == "prop-batch") num(c.prop_train.batch_size);
        else if (key == "prop-lr") num(c.prop_train.learning_rate);
        else if (key == "prop-decay") num(c.prop_train.weight_decay);
        else if (key == "floor") num(c.floor);
        else if (key == "calibration") c.calibrations = detail::split_list(value);
        else if (key == "bins") num(c.bins);
        else if (key == "mc-passes") num(c.mc_passes);
        else if (key == "ensemble-size") num(c.ensemble_size);
        else if (key == "platt-tolerance") num(c.platt_tolerance);
        else if (key == "method") c.methods = detail::split_list(value);
        else if (key == "neg-ratio") num(c.neg_ratio);
        else if (key == "rec-dim") num(c.rec_spec.embedding_dim);
        else if (key == "rec-layers") widths(c.rec_spec.mlp_layers);
        else if (key == "rec-dropout") num(c.rec_spec.dropout_rate);
        else if (key == "rec-epochs") num(c.rec_train.epochs);
        else if (key == "rec-batch") num(c.rec_train.batch_size);
        else if (key == "rec-lr") num(c.rec_train.learning_rate);
        else if (key == "rec-decay") num(c.rec_train.weight_decay);
        else if (key == "ks") widths(c.ks);
        else if (key == "output") c.output_dir = value;
        else if (key == "trials") num(c.trials);
        else if (key == "eta") num(c.eta);
        else if (key == "hypothesis-count") num(c.hypothesis_count);
        else throw ConfigError("unknown config key '" + key + "'");
    }
}

/// "key = value" lines; '#' starts a comment.
inline std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t line_no = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string{};
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline void write_kv_file(const PipelineConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& [k, v] : to_kv(c)) out << k << " = " << v << '\n';
}

inline const std::vector<std::string>& known_calibrations() {
    static const std::vector<std::string> v{"none", "platt", "mc-dropout", "ensemble"};
    return v;
}

inline void validate(const PipelineConfig& c, bool needs_data = true) {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (c.dataset != "coat" && c.dataset != "yahoo" && c.dataset != "synthetic")
        fail("dataset must be coat, yahoo or synthetic");
    if (needs_data && c.dataset != "synthetic") {
        if (c.data_dir.empty()) fail("data-dir is required for dataset " + c.dataset);
        if (!std::filesystem::is_directory(c.data_dir)) fail("data-dir does not exist: " + c.data_dir);
        if (c.dataset == "coat")
            for (const char* f : {"train.ascii", "test.ascii"})
                if (!std::filesystem::exists(std::filesystem::path(c.data_dir) / f))
                    fail(std::string("missing ") + f + " in " + c.data_dir);
    }
    if (c.threshold < 1 || c.threshold > 5) fail("threshold must be in 1..5");
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) fail("train-fraction must be in (0, 1)");
    if (c.replicas < 1) fail("seeds must be >= 1");
    if (!(c.floor > 0.0 && c.floor < 0.5)) fail("floor must be in (0, 0.5)");
    if (c.calibrations.empty()) fail("calibration list is empty");
    for (const auto& cal : c.calibrations)
        if (std::find(known_calibrations().begin(), known_calibrations().end(), cal) == known_calibrations().end())
            fail("unknown calibration '" + cal + "'");
    if (c.methods.empty()) fail("method list is empty");
    for (const auto& m : c.methods)
        if (m != "base" && m != "ips" && m != "drjl") fail("unknown method '" + m + "'");
    if (c.bins < 1) fail("bins must be >= 1");
    if (c.mc_passes < 2) fail("mc-passes must be >= 2");
    if (c.ensemble_size < 2) fail("ensemble-size must be >= 2");
    if (!(c.platt_tolerance > 0.0)) fail("platt-tolerance must be > 0");
    if (!(c.neg_ratio >= 0.0)) fail("neg-ratio must be >= 0");
    if (c.ks.empty()) fail("ks must list at least one cutoff");
    for (auto k : c.ks)
        if (k < 1) fail("every K must be >= 1");
    for (const auto* t : {&c.prop_train, &c.rec_train})
        if (t->batch_size < 1 || !(t->learning_rate > 0.0) || !(t->weight_decay >= 0.0))
            fail("batch size and learning rate must be positive, weight decay >= 0");
    for (const auto* s : {&c.prop_spec, &c.rec_spec}) {
        if (s->embedding_dim < 1) fail("embedding dim must be >= 1");
        if (s->mlp_layers.empty() || s->mlp_layers.back() != 1) fail("layer list must end with 1");
        if (!(s->dropout_rate >= 0.0 && s->dropout_rate < 1.0)) fail("dropout must be in [0, 1)");
    }
    if (!(c.eta > 0.0 && c.eta < 1.0)) fail("eta must be in (0, 1)");
    if (!(c.hypothesis_count >= 1.0)) fail("hypothesis-count must be >= 1");
    if (c.trials < 100) fail("trials must be >= 100");
    if (c.dataset == "synthetic") {
        if (c.world.n_users < 1 || c.world.n_items < 1) fail("synthetic dimensions must be >= 1");
        if (!(c.world.base_rate > 0.0 && c.world.base_rate < 1.0)) fail("synth-base-rate must be in (0, 1)");
        if (!(c.world.bias_strength >= 0.0)) fail("synth-bias must be >= 0");
    }
}

struct LoadedData {
    SplitPair splits;
    std::optional<IdMap> ids;
};

/// The MNAR ratings and the MAR test set before splitting.
struct RawData {
    RatingDataset mnar;
    RatingDataset test;
    std::optional<IdMap> ids;
};

inline RawData load_raw(const PipelineConfig& c) {
    if (c.dataset == "coat") {
        const std::filesystem::path dir(c.data_dir);
        auto mnar = read_coat_matrix(dir / "train.ascii", c.threshold);
        auto test = read_coat_matrix(dir / "test.ascii", c.threshold);
        if (mnar.n_users() != test.n_users() || mnar.n_items() != test.n_items())
            throw LoadError("train.ascii and test.ascii disagree on matrix shape");
        return {std::move(mnar), std::move(test), std::nullopt};
    }
    if (c.dataset == "yahoo") {
        auto y = load_yahoo(c.data_dir, c.train_fraction, c.seed, c.threshold);
        std::vector<Rating> all = y.splits.train.entries();
        all.insert(all.end(), y.splits.validation.entries().begin(), y.splits.validation.entries().end());
        RatingDataset mnar(y.splits.train.n_users(), y.splits.train.n_items(), std::move(all), c.threshold);
        return {std::move(mnar), std::move(y.splits.test), std::move(y.ids)};
    }
    WorldConfig w = c.world;
    w.threshold = c.threshold;
    const auto world = generate_world(w, c.seed);
    auto mnar = world_to_dataset(world, sample_indicator(world, c.seed), c.threshold);
    auto test = sample_mar_test(world, mnar, c.mar_per_user, c.seed);
    return {std::move(mnar), std::move(test), std::nullopt};
}

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
};

inline MeanStderr mean_stderr(const std::vector<double>& v) {
    MeanStderr out;
    if (v.empty()) return out;
    for (double x : v) out.mean += x;
    out.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - out.mean) * (x - out.mean);
        out.stderr_ = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    }
    return out;
}

/// Output of one replica; every number comes from (stage, replica seed).
struct ReplicaResult {
    Seed seed = 0;
    std::map<std::string, double> ece;
    std::map<std::string, double> ece_weighted;
    std::optional<PlattParams> platt;
    MetricsTable metrics;
    std::map<std::string, double> seconds;
    std::vector<std::string> artifacts;
};

struct RunReport {
    nlohmann::json body;
    nlohmann::json timing;

    nlohmann::json full() const {
        auto j = body;
        j["timing"] = timing;
        return j;
    }
};

inline std::string arm_name(const std::string& method, const std::string& calibration) {
    if (method == "base") return "base";
    return method + "-" + (calibration == "none" ? std::string("raw") : calibration);
}

namespace detail {

template <class Fn>
auto stage(const char* name, std::map<std::string, double>& seconds, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    try {
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            seconds[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        } else {
            auto out = fn();
            seconds[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            return out;
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

inline std::filesystem::path artifact(const PipelineConfig& c, const std::string& stem, std::size_t replica,
                                      const char* ext = ".csv") {
    const auto name = replica == 0 ? stem + ext : stem + "_r" + std::to_string(replica) + ext;
    return std::filesystem::path(c.output_dir) / name;
}

}  // namespace detail

/// Runs one replica of the two-stage pipeline: propensity model ->
/// calibration -> weighted recommender -> ranking evaluation.
inline ReplicaResult run_replica(const PipelineConfig& c, const RawData& raw, std::size_t replica) {
    ReplicaResult r;
    r.seed = c.seed + replica;
    auto& sec = r.seconds;
    const bool write = !c.output_dir.empty();
    auto record = [&](const std::filesystem::path& p) { r.artifacts.push_back(p.filename().string()); };

    auto [train, validation] = detail::stage("split", sec, [&] { return split_mnar(raw.mnar, c.train_fraction, r.seed); });
    const auto& test = raw.test;

    const auto obs_train = detail::stage("observation", sec, [&] { return build_observation_dataset(train, r.seed, &validation); });
    const auto obs_val = detail::stage("observation", sec, [&] {
        return build_observation_dataset(validation, derive_seed(r.seed, stream::validation), &train);
    });
    const auto val_pairs = to_pairs(obs_val);
    const auto val_labels = to_labels(obs_val);
    if (write && replica == 0) {
        const auto p = detail::artifact(c, "observation_validation", replica);
        std::ofstream out(p);
        out << "user,item,label\n";
        for (const auto& s : obs_val.samples) out << s.user << ',' << s.item << ',' << s.label << '\n';
        record(p);
    }

    const auto f = detail::stage("propensity", sec, [&] { return train_propensity(obs_train, c.prop_spec, c.prop_train, r.seed); });
    const auto raw_train = score_observed(f, train);
    const PropensityScores raw_val{val_pairs, nn::predict(f, val_pairs), "raw", {}};
    if (write && replica == 0) {
        const auto p = detail::artifact(c, "propensity_model", replica, ".ckpt");
        nn::save_checkpoint(f, p);
        record(p);
    }

    // calibration arms: scores on the train pairs (weights) and on the validation observation set (ECE)
    std::map<std::string, std::pair<PropensityScores, PropensityScores>> arms;
    for (const auto& cal : c.calibrations) {
        auto scored = detail::stage("calibration", sec, [&]() -> std::pair<PropensityScores, PropensityScores> {
            if (cal == "none") return {raw_train, raw_val};
            if (cal == "platt") {
                PlattOptions opt;
                opt.tolerance = c.platt_tolerance;
                r.platt = platt_fit(raw_val.scores, val_labels, opt);
                return {platt_apply(*r.platt, raw_train), platt_apply(*r.platt, raw_val)};
            }
            if (cal == "mc-dropout") {
                const Seed s = derive_seed(r.seed, stream::dropout);
                return {mc_dropout_scores(f, raw_train.pairs, c.mc_passes, s),
                        mc_dropout_scores(f, val_pairs, c.mc_passes, s)};
            }
            const auto ens = train_ensemble(obs_train, c.prop_spec, c.prop_train, c.ensemble_size, r.seed);
            return {ensemble_scores(ens, raw_train.pairs), ensemble_scores(ens, val_pairs)};
        });
        arms.emplace(cal, std::move(scored));
    }
    detail::stage("ece", sec, [&] {
        r.ece["raw"] = ece(raw_val.scores, val_labels, c.bins);
        r.ece_weighted["raw"] = ece(raw_val.scores, val_labels, c.bins, true);
        for (const auto& [cal, scored] : arms) {
            const auto name = cal == "none" ? std::string("raw") : cal;
            r.ece[name] = ece(scored.second.scores, val_labels, c.bins);
            r.ece_weighted[name] = ece(scored.second.scores, val_labels, c.bins, true);
            if (!write) continue;
            const auto rel = detail::artifact(c, "reliability_" + name, replica);
            write_reliability_csv(reliability_curve(scored.second.scores, val_labels, c.bins), rel);
            const auto hist = detail::artifact(c, "histogram_" + name, replica);
            write_histogram_csv(scored.first.scores, hist);
            const auto sc = detail::artifact(c, "scores_" + name, replica);
            write_scores_csv(raw_val, {val_pairs, scored.second.scores, name, {}}, sc);
            record(rel), record(hist), record(sc);
        }
    });

    const RecTrainSet base_set = detail::stage("recommender", sec, [&] {
        return build_rec_trainset(train, nullptr, c.neg_ratio, r.seed, &validation);
    });
    nn::ModelSpec rec_spec = c.rec_spec;
    rec_spec.n_users = train.n_users();
    rec_spec.n_items = train.n_items();
    const Seed rec_seed = derive_seed(r.seed, 77);
    for (const auto& method : c.methods) {
        if (method == "base") {
            if (r.metrics.count("base")) continue;
            const auto model = detail::stage("recommender", sec, [&] { return train_ips(base_set, rec_spec, c.rec_train, rec_seed); });
            r.metrics["base"] = detail::stage("evaluate", sec, [&] { return evaluate(model, test, c.ks); });
            continue;
        }
        for (const auto& [cal, scored] : arms) {
            const auto name = arm_name(method, cal);
            const auto weights = clip_floor(scored.first, c.floor);
            nn::TrainedModel model;
            if (method == "ips") {
                model = detail::stage("recommender", sec, [&] {
                    auto set = build_rec_trainset(train, &weights, c.neg_ratio, r.seed, &validation);
                    return train_ips(set, rec_spec, c.rec_train, rec_seed);
                });
            } else {
                model = detail::stage("recommender", sec, [&] {
                    return train_drjl(train, &weights, rec_spec, c.rec_train, rec_seed, c.neg_ratio, &validation)
                        .prediction_model;
                });
            }
            r.metrics[name] = detail::stage("evaluate", sec, [&] { return evaluate(model, test, c.ks); });
        }
    }
    return r;
}

inline nlohmann::json config_json(const PipelineConfig& c) {
    nlohmann::json j;
    for (const auto& [k, v] : to_kv(c)) j[k] = v;
    return j;
}

inline RunReport run_pipeline(const PipelineConfig& c) {
    validate(c);
    std::map<std::string, double> load_seconds;
    const auto raw = detail::stage("load", load_seconds, [&] { return load_raw(c); });
    if (!c.output_dir.empty()) {
        std::filesystem::create_directories(c.output_dir);
        write_kv_file(c, std::filesystem::path(c.output_dir) / "config.txt");
        if (raw.ids) {
            write_id_map(raw.ids->users, std::filesystem::path(c.output_dir) / "users.idmap");
            write_id_map(raw.ids->items, std::filesystem::path(c.output_dir) / "items.idmap");
        }
    }
    const auto results = parallel_map(c.replicas, [&](std::size_t k) { return run_replica(c, raw, k); });

    RunReport report;
    auto& body = report.body;
    body["config"] = config_json(c);
    body["floor"] = c.floor;
    body["data"] = {{"n_users", raw.mnar.n_users()},
                    {"n_items", raw.mnar.n_items()},
                    {"mnar_entries", raw.mnar.size()},
                    {"test_entries", raw.test.size()}};
    std::map<std::string, std::vector<double>> ece_values;
    std::map<std::string, std::map<std::string, std::vector<double>>> metric_values;
    body["replicas"] = nlohmann::json::array();
    for (const auto& r : results) {
        nlohmann::json rj;
        rj["seed"] = r.seed;
        rj["ece"] = r.ece;
        rj["ece_count_weighted"] = r.ece_weighted;
        if (r.platt) {
            rj["platt"] = {{"b", r.platt->b}, {"c", r.platt->c}, {"iterations", r.platt->iterations}};
            if (!(r.platt->b > 0.0)) {
                rj["warnings"].push_back("platt slope b <= 0: calibration reverses the score order");
                std::fprintf(stderr, "warning: replica seed %llu: platt slope b = %g <= 0\n",
                             static_cast<unsigned long long>(r.seed), r.platt->b);
            }
        }
        for (const auto& [arm, row] : r.metrics) {
            const auto cells = to_json(row);
            rj["metrics"][arm] = cells;
            for (const auto& [cell, v] : cells.items()) metric_values[arm][cell].push_back(v.get<double>());
        }
        for (const auto& [arm, v] : r.ece) ece_values[arm].push_back(v);
        rj["artifacts"] = r.artifacts;
        body["replicas"].push_back(rj);
    }
    for (const auto& [arm, v] : ece_values) {
        const auto ms = mean_stderr(v);
        body["summary"]["ece"][arm] = {{"mean", ms.mean}, {"stderr", ms.stderr_}};
    }
    for (const auto& [arm, cells] : metric_values)
        for (const auto& [cell, v] : cells) {
            const auto ms = mean_stderr(v);
            body["summary"]["metrics"][arm][cell] = {{"mean", ms.mean}, {"stderr", ms.stderr_}};
        }

    report.timing["load"] = load_seconds["load"];
    for (std::size_t k = 0; k < results.size(); ++k) report.timing["replicas"].push_back(results[k].seconds);

    if (!c.output_dir.empty()) {
        const std::filesystem::path dir(c.output_dir);
        MetricsTable table;
        for (const auto& [arm, cells] : metric_values) {
            MetricsRow row;
            row.ks = c.ks;
            for (auto k : c.ks) {
                row.dcg.push_back(mean_stderr(cells.at("dcg@" + std::to_string(k))).mean);
                row.recall.push_back(mean_stderr(cells.at("recall@" + std::to_string(k))).mean);
            }
            row.average = mean_stderr(cells.at("average")).mean;
            table[arm] = row;
        }
        write_metrics_csv(table, dir / "metrics.csv");
        std::ofstream(dir / "report.json") << report.full().dump(2) << '\n';
    }
    return report;
}

// ---------------------------------------------------------------------------
// Theory audit on a synthetic world with oracle propensities

struct AuditData {
    SyntheticWorld world;
    IndicatorSample sample;
    std::vector<double> errors;
    std::vector<double> raw_p;
    std::vector<double> calibrated_p;
    PlattParams platt;
};

/// Builds the audit inputs: world, one indicator draw, per-cell MAE of a
/// constant predictor (the observed mean rating), and raw / Platt-calibrated
/// propensities from a classifier fitted to the indicator over all of D.
inline AuditData prepare_audit(const PipelineConfig& c) {
    AuditData a;
    WorldConfig w = c.world;
    w.threshold = c.threshold;
    a.world = generate_world(w, c.seed);
    a.sample = sample_indicator(a.world, c.seed);
    const std::size_t n = a.world.universe_size();
    double observed_sum = 0.0;
    std::size_t observed = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (a.sample.indicator.data[k]) observed_sum += a.world.true_ratings.data[k], ++observed;
    const double prediction = observed ? observed_sum / static_cast<double>(observed) : 3.0;
    a.errors.resize(n);
    for (std::size_t k = 0; k < n; ++k)
        a.errors[k] = pointwise_error(a.world.true_ratings.data[k], prediction, ErrorKind::mae);

    std::vector<nn::LabeledPair> cells;
    std::vector<Pair> pairs;
    std::vector<int> labels;
    cells.reserve(n);
    for (std::size_t u = 0; u < a.world.n_users(); ++u)
        for (std::size_t i = 0; i < a.world.n_items(); ++i) {
            const int o = a.sample.indicator(u, i);
            cells.push_back({static_cast<Index>(u), static_cast<Index>(i), static_cast<double>(o)});
            pairs.push_back({static_cast<Index>(u), static_cast<Index>(i)});
            labels.push_back(o);
        }
    nn::ModelSpec spec = c.prop_spec;
    spec.n_users = a.world.n_users();
    spec.n_items = a.world.n_items();
    nn::TrainConfig cfg = c.prop_train;
    cfg.loss = nn::LossKind::bce;
    const auto model = nn::train(nn::init(spec, c.seed), cells, cfg, c.seed);
    a.raw_p = nn::predict(model, pairs);
    PlattOptions opt;
    opt.tolerance = c.platt_tolerance;
    a.platt = platt_fit(a.raw_p, labels, opt);
    a.calibrated_p = platt_apply(a.platt, a.raw_p);
    for (auto* v : {&a.raw_p, &a.calibrated_p})
        for (auto& p : *v) p = std::max(p, kPropensityFloor);
    return a;
}

inline RunReport run_audit(const PipelineConfig& c) {
    validate(c, false);
    RunReport report;
    std::map<std::string, double> sec;
    const auto a = detail::stage("audit-setup", sec, [&] { return prepare_audit(c); });
    const auto& true_p = a.world.true_propensities.data;
    const std::size_t n = a.world.universe_size();
    auto& body = report.body;
    body["config"] = config_json(c);

    auto bias_json = [](const BiasReport& b) {
        return nlohmann::json{{"analytic_bias", b.analytic_bias}, {"mc_bias", b.mc_bias},
                              {"mc_stderr", b.mc_stderr},         {"mc_mean", b.mc_mean},
                              {"full_information", b.full_information}, {"trials", b.trials},
                              {"within_3_stderr", std::abs(b.mc_bias - b.analytic_bias) < 3.0 * b.mc_stderr}};
    };
    const auto oracle = detail::stage("unbiasedness", sec, [&] { return ips_bias_mc(a.world, true_p, a.errors, c.trials, c.seed); });
    body["unbiasedness"] = bias_json(oracle);
    body["unbiasedness"]["passes"] = oracle.mc_bias < 3.0 * oracle.mc_stderr;

    std::vector<double> doubled(n);
    for (std::size_t k = 0; k < n; ++k) doubled[k] = std::min(2.0 * true_p[k], 1.0);
    const auto lemma = detail::stage("lemma1", sec, [&] { return ips_bias_mc(a.world, doubled, a.errors, c.trials, c.seed); });
    body["lemma1"] = bias_json(lemma);

    const auto cmp = calibrated_bias_compare(true_p, a.raw_p, a.calibrated_p, a.errors);
    body["theorem1"] = {{"bias_raw", cmp.bias_raw},
                        {"bias_cal", cmp.bias_cal},
                        {"dominates", cmp.dominates},
                        {"pointwise_dominates", cmp.pointwise_dominates},
                        {"platt", {{"b", a.platt.b}, {"c", a.platt.c}}}};

    std::vector<double> observed_errors, observed_p;
    for (std::size_t k = 0; k < n; ++k)
        if (a.sample.indicator.data[k]) {
            observed_errors.push_back(a.errors[k]);
            observed_p.push_back(a.calibrated_p[k]);
        }
    const double empirical = ips_error(observed_errors, observed_p, n);
    const auto nabla_tilde = propensity_bias(true_p, a.calibrated_p);
    const auto bound = generalization_bound(empirical, nabla_tilde, a.calibrated_p, c.hypothesis_count, c.eta);
    body["bound_terms"] = {{"empirical_error", bound.empirical_error},
                           {"bias_term", bound.bias_term},
                           {"variance_term", bound.variance_term},
                           {"total", bound.total},
                           {"eta", c.eta},
                           {"hypothesis_count", c.hypothesis_count}};

    const auto audit = ece_bound_audit(true_p, a.calibrated_p, a.sample.indicator.data, c.bins);
    body["ece_audit"] = {{"lhs", audit.lhs}, {"rhs", audit.rhs}, {"ece", audit.ece}, {"holds", audit.holds}};

    // flat keys mirroring the published report schema
    body["analytic_bias"] = lemma.analytic_bias;
    body["mc_bias"] = lemma.mc_bias;
    body["mc_stderr"] = lemma.mc_stderr;
    report.timing = sec;
    if (!c.output_dir.empty()) {
        std::filesystem::create_directories(c.output_dir);
        std::ofstream(std::filesystem::path(c.output_dir) / "audit.json") << report.full().dump(2) << '\n';
    }
    return report;
}

}  // namespace calips
