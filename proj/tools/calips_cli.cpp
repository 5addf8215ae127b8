// calips: calibrated inverse-propensity-scoring pipeline driver.
//
// Exit codes: 0 success, 1 configuration error, 2 stage failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "calips/pipeline.hpp"

namespace fs = std::filesystem;
using namespace calips;

namespace {

/// Registers one string option per config key; parsed values land in `flags`.
void add_config_flags(CLI::App* cmd, std::map<std::string, std::string>& flags, std::string& config_path) {
    cmd->add_option("--config", config_path, "key = value config file (flags override it)");
    for (const auto& [key, _] : to_kv(PipelineConfig{})) {
        auto* opt = cmd->add_option_function<std::string>(
            "--" + key, [&flags, key = key](const std::string& v) { flags[key] = v; }, "config key '" + key + "'");
        opt->type_name("VALUE");
    }
}

PipelineConfig resolve(const std::map<std::string, std::string>& flags, const std::string& config_path) {
    PipelineConfig c;
    if (!config_path.empty()) apply_kv(c, read_kv_file(config_path));
    apply_kv(c, flags);
    return c;
}

struct Splits {
    SplitPair splits;
    std::optional<IdMap> ids;
};

Splits load_splits(const PipelineConfig& c) {
    auto raw = load_raw(c);
    auto [train, validation] = split_mnar(raw.mnar, c.train_fraction, c.seed);
    return {{std::move(train), std::move(validation), std::move(raw.test)}, std::move(raw.ids)};
}

void print_summary(const RunReport& report) {
    const auto& s = report.body.at("summary");
    if (s.contains("ece")) {
        std::printf("ECE (validation observation set, mean over replicas)\n");
        for (const auto& [arm, v] : s["ece"].items())
            std::printf("  %-12s %.4f +- %.4f\n", arm.c_str(), v["mean"].get<double>(), v["stderr"].get<double>());
    }
    if (s.contains("metrics")) {
        std::printf("Average ranking metric on the MAR test set\n");
        for (const auto& [arm, cells] : s["metrics"].items())
            std::printf("  %-18s %.4f +- %.4f\n", arm.c_str(), cells["average"]["mean"].get<double>(),
                        cells["average"]["stderr"].get<double>());
    }
}

std::vector<int> read_labels_csv(const fs::path& path, const std::vector<Pair>& pairs) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::unordered_map<std::uint64_t, int> lookup;
    std::string line;
    std::getline(in, line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        unsigned long u = 0, i = 0;
        int y = 0;
        if (std::sscanf(line.c_str(), "%lu,%lu,%d", &u, &i, &y) != 3)
            throw LoadError(path.string() + ":" + std::to_string(line_no) + ": expected user,item,label");
        lookup[pair_key(static_cast<Index>(u), static_cast<Index>(i))] = y;
    }
    std::vector<int> labels;
    labels.reserve(pairs.size());
    for (const auto& p : pairs) {
        const auto it = lookup.find(pair_key(p));
        if (it == lookup.end()) throw LoadError("no label for pair (" + std::to_string(p.user) + ", " +
                                                std::to_string(p.item) + ")");
        labels.push_back(it->second);
    }
    return labels;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Calibrated inverse propensity scoring for recommendation on MNAR data"};
    app.require_subcommand(1);

    std::map<std::string, std::string> flags;
    std::string config_path;

    auto* pipeline = app.add_subcommand("pipeline", "Run the full two-stage pipeline and write a report");
    add_config_flags(pipeline, flags, config_path);

    auto* audit = app.add_subcommand("audit", "Audit the estimator bias and bound identities on a synthetic world");
    add_config_flags(audit, flags, config_path);

    auto* synth = app.add_subcommand("synth", "Export a synthetic world in the Coat layout plus true propensities");
    add_config_flags(synth, flags, config_path);

    auto* propensity = app.add_subcommand("propensity", "Train the propensity model and export scores");
    add_config_flags(propensity, flags, config_path);

    std::string scores_path, labels_path, score_column = "calibrated", model_path;
    bool refit_platt = false;
    auto* calibrate = app.add_subcommand("calibrate", "ECE and reliability curves for a saved score CSV");
    calibrate->add_option("--scores", scores_path, "user,item,raw_score,calibrated_score CSV")->required();
    calibrate->add_option("--labels", labels_path, "user,item,label CSV")->required();
    calibrate->add_flag("--refit-platt", refit_platt, "fit Platt scaling on the raw column and report it too");
    add_config_flags(calibrate, flags, config_path);

    auto* train = app.add_subcommand("train", "Train a recommender (base, ips or drjl)");
    train->add_option("--scores", scores_path, "propensity CSV covering the train pairs");
    train->add_option("--score-column", score_column, "raw or calibrated")
        ->check(CLI::IsMember({"raw", "calibrated"}));
    add_config_flags(train, flags, config_path);

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Rank the MAR test items with a saved model");
    evaluate_cmd->add_option("--model", model_path, "model checkpoint")->required();
    add_config_flags(evaluate_cmd, flags, config_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    PipelineConfig config;
    try {
        config = resolve(flags, config_path);
        const bool needs_data = !audit->parsed() && !synth->parsed() && !calibrate->parsed();
        validate(config, needs_data);
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    }
    const fs::path out_dir = config.output_dir.empty() ? fs::path(".") : fs::path(config.output_dir);

    try {
        if (pipeline->parsed()) {
            const auto report = run_pipeline(config);
            print_summary(report);
            if (!config.output_dir.empty()) std::printf("report: %s\n", (out_dir / "report.json").c_str());
        } else if (audit->parsed()) {
            const auto report = run_audit(config);
            std::cout << report.full().dump(2) << '\n';
        } else if (synth->parsed()) {
            WorldConfig w = config.world;
            w.threshold = config.threshold;
            const auto world = generate_world(w, config.seed);
            export_coat_layout(world, out_dir, config.mar_per_user, config.seed, config.threshold);
            std::printf("wrote %s/{train.ascii,test.ascii,propensity.csv}\n", out_dir.c_str());
        } else if (propensity->parsed()) {
            const auto data = load_splits(config);
            const auto& sp = data.splits;
            const auto obs = build_observation_dataset(sp.train, config.seed, &sp.validation);
            const auto obs_val = build_observation_dataset(sp.validation, derive_seed(config.seed, stream::validation), &sp.train);
            const auto model = train_propensity(obs, config.prop_spec, config.prop_train, config.seed);
            const auto raw = score_observed(model, sp.train);
            const auto val_pairs = to_pairs(obs_val);
            const auto val_raw = nn::predict(model, val_pairs);
            const auto val_labels = to_labels(obs_val);
            PropensityScores calibrated = raw;
            const auto& cal = config.calibrations.front();
            if (cal == "platt") {
                PlattOptions opt;
                opt.tolerance = config.platt_tolerance;
                calibrated = platt_apply(platt_fit(val_raw, val_labels, opt), raw);
            } else if (cal == "mc-dropout") {
                calibrated = mc_dropout_scores(model, raw.pairs, config.mc_passes, derive_seed(config.seed, stream::dropout));
            } else if (cal == "ensemble") {
                calibrated = ensemble_scores(
                    train_ensemble(obs, config.prop_spec, config.prop_train, config.ensemble_size, config.seed), raw.pairs);
            }
            fs::create_directories(out_dir);
            nn::save_checkpoint(model, out_dir / "propensity_model.ckpt");
            write_scores_csv(raw, calibrated, out_dir / "propensity_scores.csv");
            if (data.ids) {
                write_id_map(data.ids->users, out_dir / "users.idmap");
                write_id_map(data.ids->items, out_dir / "items.idmap");
            }
            std::printf("%zu train-pair scores; raw ECE on the validation observation set %.4f\n",
                        raw.size(), ece(val_raw, val_labels, config.bins));
        } else if (calibrate->parsed()) {
            const auto table = read_scores_csv(scores_path);
            const auto labels = read_labels_csv(labels_path, table.raw.pairs);
            nlohmann::json j;
            j["bins"] = config.bins;
            j["ece"]["raw"] = ece(table.raw.scores, labels, config.bins);
            j["ece"]["calibrated"] = ece(table.calibrated.scores, labels, config.bins);
            if (refit_platt) {
                PlattOptions opt;
                opt.tolerance = config.platt_tolerance;
                const auto p = platt_fit(table.raw.scores, labels, opt);
                j["platt"] = {{"b", p.b}, {"c", p.c}};
                j["ece"]["platt_refit"] = ece(platt_apply(p, table.raw.scores), labels, config.bins);
            }
            if (!config.output_dir.empty()) {
                fs::create_directories(out_dir);
                write_reliability_csv(reliability_curve(table.raw.scores, labels, config.bins), out_dir / "reliability_raw.csv");
                write_reliability_csv(reliability_curve(table.calibrated.scores, labels, config.bins),
                                      out_dir / "reliability_calibrated.csv");
                write_histogram_csv(table.calibrated.scores, out_dir / "histogram_calibrated.csv");
            }
            std::cout << j.dump(2) << '\n';
        } else if (train->parsed()) {
            const auto data = load_splits(config);
            const auto& sp = data.splits;
            nn::ModelSpec spec = config.rec_spec;
            spec.n_users = sp.train.n_users();
            spec.n_items = sp.train.n_items();
            const auto& method = config.methods.front();
            std::optional<PropensityScores> weights;
            if (method != "base") {
                if (scores_path.empty()) throw ConfigError("--scores is required for method " + method);
                const auto table = read_scores_csv(scores_path);
                weights = clip_floor(score_column == "raw" ? table.raw : table.calibrated, config.floor);
            }
            const Seed rec_seed = derive_seed(config.seed, 77);
            nn::TrainedModel model;
            if (method == "drjl") {
                model = train_drjl(sp.train, &*weights, spec, config.rec_train, rec_seed, config.neg_ratio, &sp.validation)
                            .prediction_model;
            } else {
                const auto set = build_rec_trainset(sp.train, weights ? &*weights : nullptr, config.neg_ratio,
                                                    config.seed, &sp.validation);
                model = train_ips(set, spec, config.rec_train, rec_seed);
            }
            fs::create_directories(out_dir);
            nn::save_checkpoint(model, out_dir / "recommender.ckpt");
            std::printf("wrote %s\n", (out_dir / "recommender.ckpt").c_str());
        } else if (evaluate_cmd->parsed()) {
            const auto data = load_splits(config);
            const auto model = nn::load_checkpoint(model_path);
            const auto row = evaluate(model, data.splits.test, config.ks);
            const auto j = to_json(row);
            std::cout << j.dump(2) << '\n';
            if (!config.output_dir.empty()) {
                fs::create_directories(out_dir);
                write_metrics_csv({{config.methods.front(), row}}, out_dir / "metrics.csv");
                std::ofstream(out_dir / "metrics.json") << j.dump(2) << '\n';
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const StageError& e) {
        std::cerr << "stage '" << e.stage << "' failed: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
