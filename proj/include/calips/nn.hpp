#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calips/common.hpp"
#include "calips/data.hpp"

namespace calips::nn {

/// NeuMF-lite: shared user/item embeddings feed a GMF branch (elementwise
/// product) and an MLP branch (concatenation -> ReLU layers). The final linear
/// layer reads [gmf ; mlp_out] and a sigmoid gives the probability.
///
/// `mlp_layers` lists every width including the final 1; [1] means no hidden
/// layers, so the final layer reads [u*v ; u ; v] (logistic regression on
/// embeddings). Inverted dropout is applied to each hidden activation that
/// feeds another hidden layer and to the final layer's input vector.
struct ModelSpec {
    std::size_t n_users = 0;
    std::size_t n_items = 0;
    std::size_t embedding_dim = 8;
    std::vector<std::size_t> mlp_layers{32, 16, 1};
    double dropout_rate = 0.2;

    void validate() const {
        if (n_users == 0 || n_items == 0) throw Error("model spec: empty user/item universe");
        if (embedding_dim < 1) throw Error("model spec: embedding_dim must be >= 1");
        if (mlp_layers.empty() || mlp_layers.back() != 1)
            throw Error("model spec: final mlp layer width must be 1");
        for (auto w : mlp_layers)
            if (w == 0) throw Error("model spec: zero-width layer");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw Error("model spec: dropout_rate must be in [0, 1)");
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Offsets of every parameter block inside the flat parameter vector.
struct Layout {
    struct Dense {
        std::size_t in = 0, out = 0, weight = 0, bias = 0;
    };
    std::size_t dim = 0;
    std::size_t user_emb = 0;
    std::size_t item_emb = 0;
    std::size_t dense_begin = 0;
    std::vector<Dense> hidden;
    Dense output;
    std::size_t total = 0;

    explicit Layout(const ModelSpec& spec) {
        spec.validate();
        dim = spec.embedding_dim;
        user_emb = 0;
        item_emb = spec.n_users * dim;
        dense_begin = item_emb + spec.n_items * dim;
        std::size_t at = dense_begin;
        std::size_t in = 2 * dim;
        for (std::size_t k = 0; k + 1 < spec.mlp_layers.size(); ++k) {
            const std::size_t out = spec.mlp_layers[k];
            hidden.push_back({in, out, at, at + in * out});
            at += in * out + out;
            in = out;
        }
        output = {dim + in, 1, at, at + dim + in};
        total = at + dim + in + 1;
    }

    std::size_t final_input() const { return output.in; }
};

inline std::size_t parameter_count(const ModelSpec& spec) { return Layout(spec).total; }

struct TrainedModel {
    ModelSpec spec;
    std::vector<double> parameters;
    Seed training_seed = 0;
    std::vector<double> loss_history;
};

enum class LossKind { bce, mse };

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    double learning_rate = 0.05;
    double weight_decay = 0.0;
    LossKind loss = LossKind::bce;
    std::optional<std::vector<double>> per_sample_weights;
};

/// (user, item, target); target may be a soft label in [0, 1].
struct LabeledPair {
    Index user = 0;
    Index item = 0;
    double label = 0.0;
};

struct SampleLoss {
    double value = 0.0;
    /// d value / d logit
    double dlogit = 0.0;
};

/// Per-sample loss as a function of (sample index, logit, probability).
using LossFn = std::function<SampleLoss(std::size_t, double, double)>;

inline SampleLoss bce_loss(double logit, double prob, double label) {
    const double value = std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
    return {value, prob - label};
}

inline SampleLoss mse_loss(double /*logit*/, double prob, double label) {
    const double diff = prob - label;
    return {diff * diff, 2.0 * diff * prob * (1.0 - prob)};
}

inline TrainedModel init(const ModelSpec& spec, Seed seed) {
    const Layout layout(spec);
    TrainedModel m{spec, std::vector<double>(layout.total, 0.0), seed, {}};
    auto eng = make_engine(derive_seed(seed, stream::init));
    auto fill = [&](std::size_t from, std::size_t count, double limit) {
        for (std::size_t k = 0; k < count; ++k) m.parameters[from + k] = (2.0 * uniform01(eng) - 1.0) * limit;
    };
    const double emb_limit = 1.0 / std::sqrt(static_cast<double>(layout.dim));
    fill(layout.user_emb, spec.n_users * layout.dim, emb_limit);
    fill(layout.item_emb, spec.n_items * layout.dim, emb_limit);
    for (const auto& d : layout.hidden)
        fill(d.weight, d.in * d.out, std::sqrt(6.0 / static_cast<double>(d.in + d.out)));
    fill(layout.output.weight, layout.output.in, std::sqrt(6.0 / static_cast<double>(layout.output.in + 1)));
    return m;
}

namespace detail {

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    explicit Workspace(const Layout& layout) {
        acts.resize(layout.hidden.size() + 1);
        masks.resize(layout.hidden.size() + 1);
        acts[0].resize(2 * layout.dim);
        for (std::size_t k = 0; k < layout.hidden.size(); ++k) {
            acts[k + 1].resize(layout.hidden[k].out);
            masks[k].assign(layout.hidden[k].in, 1.0);
        }
        masks.back().assign(layout.final_input(), 1.0);
        final_in.resize(layout.final_input());
        grad_final_in.resize(layout.final_input());
    }
    // acts[0] = [u ; v]; acts[k+1] = relu output of hidden layer k
    std::vector<std::vector<double>> acts;
    // masks[k] multiplies the input of hidden layer k; masks.back() the final input
    std::vector<std::vector<double>> masks;
    std::vector<double> final_in;
    std::vector<double> grad_final_in;
    std::vector<double> grad_a, grad_b;
};

/// Draws inverted-dropout masks. Layer-0 input (the raw embeddings) is never
/// masked when hidden layers exist.
inline void draw_masks(Workspace& ws, double rate, Engine* eng) {
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t k = 0; k < ws.masks.size(); ++k) {
        auto& mask = ws.masks[k];
        const bool maskable = (k != 0 || ws.masks.size() == 1);
        for (auto& v : mask) v = (eng && rate > 0.0 && maskable) ? (uniform01(*eng) < rate ? 0.0 : keep_scale) : 1.0;
    }
}

inline double forward(const Layout& L, std::span<const double> p, Index user, Index item, Workspace& ws) {
    const std::size_t d = L.dim;
    const double* u = p.data() + L.user_emb + user * d;
    const double* v = p.data() + L.item_emb + item * d;
    auto& a0 = ws.acts[0];
    for (std::size_t f = 0; f < d; ++f) {
        a0[f] = u[f];
        a0[d + f] = v[f];
    }
    for (std::size_t k = 0; k < L.hidden.size(); ++k) {
        const auto& layer = L.hidden[k];
        const auto& in = ws.acts[k];
        const auto& mask = ws.masks[k];
        auto& out = ws.acts[k + 1];
        for (std::size_t o = 0; o < layer.out; ++o) {
            double z = p[layer.bias + o];
            const double* w = p.data() + layer.weight + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) z += w[i] * in[i] * mask[i];
            out[o] = z > 0.0 ? z : 0.0;
        }
    }
    const auto& last = ws.acts.back();
    const auto& mask = ws.masks.back();
    for (std::size_t f = 0; f < d; ++f) ws.final_in[f] = u[f] * v[f] * mask[f];
    for (std::size_t j = 0; j < last.size(); ++j) ws.final_in[d + j] = last[j] * mask[d + j];
    double z = p[L.output.bias];
    const double* w = p.data() + L.output.weight;
    for (std::size_t j = 0; j < L.output.in; ++j) z += w[j] * ws.final_in[j];
    return z;
}

/// Accumulates scale * d logit / d params into grad (uses buffers from forward).
inline void backward(const Layout& L, std::span<const double> p, Index user, Index item, Workspace& ws,
                     double scale, std::span<double> grad) {
    const std::size_t d = L.dim;
    const double* u = p.data() + L.user_emb + user * d;
    const double* v = p.data() + L.item_emb + item * d;
    double* gu = grad.data() + L.user_emb + user * d;
    double* gv = grad.data() + L.item_emb + item * d;
    const double* w_out = p.data() + L.output.weight;
    grad[L.output.bias] += scale;
    for (std::size_t j = 0; j < L.output.in; ++j) {
        grad[L.output.weight + j] += scale * ws.final_in[j];
        ws.grad_final_in[j] = scale * w_out[j] * ws.masks.back()[j];
    }
    for (std::size_t f = 0; f < d; ++f) {
        gu[f] += ws.grad_final_in[f] * v[f];
        gv[f] += ws.grad_final_in[f] * u[f];
    }
    // gradient w.r.t. the (unmasked) last activation
    ws.grad_a.assign(ws.grad_final_in.begin() + static_cast<std::ptrdiff_t>(d), ws.grad_final_in.end());
    for (std::size_t k = L.hidden.size(); k-- > 0;) {
        const auto& layer = L.hidden[k];
        const auto& in = ws.acts[k];
        const auto& out = ws.acts[k + 1];
        const auto& mask = ws.masks[k];
        ws.grad_b.assign(layer.in, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
            if (out[o] <= 0.0) continue;
            const double g = ws.grad_a[o];
            grad[layer.bias + o] += g;
            const double* w = p.data() + layer.weight + o * layer.in;
            double* gw = grad.data() + layer.weight + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) {
                gw[i] += g * in[i] * mask[i];
                ws.grad_b[i] += g * w[i] * mask[i];
            }
        }
        std::swap(ws.grad_a, ws.grad_b);
    }
    for (std::size_t f = 0; f < d; ++f) {
        gu[f] += ws.grad_a[f];
        gv[f] += ws.grad_a[d + f];
    }
}

inline LossFn builtin_loss(LossKind kind, std::span<const LabeledPair> samples) {
    if (kind == LossKind::bce)
        return [samples](std::size_t k, double z, double p) { return bce_loss(z, p, samples[k].label); };
    return [samples](std::size_t k, double z, double p) { return mse_loss(z, p, samples[k].label); };
}

}  // namespace detail

/// Mean weighted loss and its gradient over a batch, with dropout disabled.
inline std::pair<double, std::vector<double>> loss_and_gradient(const TrainedModel& model,
                                                                std::span<const LabeledPair> batch,
                                                                LossKind kind,
                                                                std::span<const double> weights = {}) {
    const Layout L(model.spec);
    detail::Workspace ws(L);
    detail::draw_masks(ws, 0.0, nullptr);
    std::vector<double> grad(L.total, 0.0);
    const auto loss = detail::builtin_loss(kind, batch);
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const double z = detail::forward(L, model.parameters, batch[k].user, batch[k].item, ws);
        const auto l = loss(k, z, sigmoid(z));
        const double w = weights.empty() ? 1.0 : weights[k];
        total += w * l.value;
        detail::backward(L, model.parameters, batch[k].user, batch[k].item, ws, w * l.dlogit * inv_n, grad);
    }
    return {total * inv_n, std::move(grad)};
}

/// Mini-batch SGD on the mean per-sample-weighted loss. `loss` is evaluated on
/// sample indices into `pairs`; weights (if any) are taken from config.
inline TrainedModel train_with_loss(TrainedModel model, std::span<const LabeledPair> pairs,
                                    const LossFn& loss, const TrainConfig& config, Seed seed) {
    if (config.batch_size == 0 || !(config.learning_rate > 0.0))
        throw Error("train: batch_size and learning_rate must be positive");
    if (!(config.weight_decay >= 0.0)) throw Error("train: weight_decay must be >= 0");
    const auto* weights = config.per_sample_weights ? &*config.per_sample_weights : nullptr;
    if (weights) {
        if (weights->size() != pairs.size()) throw Error("train: per-sample weights misaligned");
        for (double w : *weights)
            if (!(w > 0.0)) throw Error("train: per-sample weights must be > 0");
    }
    model.training_seed = seed;
    if (config.epochs == 0 || pairs.empty()) return model;

    const Layout L(model.spec);
    detail::Workspace ws(L);
    auto& theta = model.parameters;
    std::vector<double> grad(L.total, 0.0);
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    auto shuffle_eng = make_engine(derive_seed(seed, stream::shuffle));
    auto dropout_eng = make_engine(derive_seed(seed, stream::dropout));
    std::vector<Index> users, items;
    const double lr = config.learning_rate;
    const double decay = config.weight_decay;
    const std::size_t d = L.dim;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle(order, shuffle_eng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0, batch_index = 0; start < order.size();
             start += config.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv_n = 1.0 / static_cast<double>(end - start);
            users.clear();
            items.clear();
            double batch_loss = 0.0;
            for (std::size_t b = start; b < end; ++b) {
                const auto k = order[b];
                const auto& s = pairs[k];
                detail::draw_masks(ws, model.spec.dropout_rate, &dropout_eng);
                const double z = detail::forward(L, theta, s.user, s.item, ws);
                const auto l = loss(k, z, sigmoid(z));
                const double w = weights ? (*weights)[k] : 1.0;
                batch_loss += w * l.value;
                detail::backward(L, theta, s.user, s.item, ws, w * l.dlogit * inv_n, grad);
                users.push_back(s.user);
                items.push_back(s.item);
            }
            if (!std::isfinite(batch_loss)) {
                char msg[160];
                std::snprintf(msg, sizeof msg,
                              "non-finite training loss (learning_rate=%g, epoch=%zu, batch=%zu)", lr,
                              epoch, batch_index);
                throw NumericError(msg);
            }
            epoch_loss += batch_loss;
            std::sort(users.begin(), users.end());
            users.erase(std::unique(users.begin(), users.end()), users.end());
            std::sort(items.begin(), items.end());
            items.erase(std::unique(items.begin(), items.end()), items.end());
            auto step = [&](std::size_t at) {
                theta[at] -= lr * (grad[at] + decay * theta[at]);
                grad[at] = 0.0;
            };
            for (auto u : users)
                for (std::size_t f = 0; f < d; ++f) step(L.user_emb + u * d + f);
            for (auto i : items)
                for (std::size_t f = 0; f < d; ++f) step(L.item_emb + i * d + f);
            for (std::size_t at = L.dense_begin; at < L.total; ++at) step(at);
        }
        model.loss_history.push_back(epoch_loss / static_cast<double>(pairs.size()));
    }
    return model;
}

inline TrainedModel train(TrainedModel model, std::span<const LabeledPair> samples,
                          const TrainConfig& config, Seed seed) {
    if (config.loss == LossKind::bce)
        for (const auto& s : samples)
            if (!(s.label >= 0.0 && s.label <= 1.0)) throw Error("train: bce labels must be in [0, 1]");
    return train_with_loss(std::move(model), samples, detail::builtin_loss(config.loss, samples), config, seed);
}

struct PredictMode {
    bool dropout_active = false;
    Seed seed = 0;

    static PredictMode deterministic() { return {}; }
    static PredictMode with_dropout(Seed s) { return {true, s}; }
};

inline std::vector<double> predict_logits(const TrainedModel& model, std::span<const Pair> pairs,
                                          PredictMode mode = {}) {
    const Layout L(model.spec);
    detail::Workspace ws(L);
    std::optional<Engine> eng;
    if (mode.dropout_active) eng = make_engine(derive_seed(mode.seed, stream::dropout));
    if (!eng) detail::draw_masks(ws, 0.0, nullptr);
    std::vector<double> out;
    out.reserve(pairs.size());
    for (const auto& pr : pairs) {
        if (pr.user >= model.spec.n_users || pr.item >= model.spec.n_items)
            throw Error("predict: pair outside the model's universe");
        if (eng) detail::draw_masks(ws, model.spec.dropout_rate, &*eng);
        out.push_back(detail::forward(L, model.parameters, pr.user, pr.item, ws));
    }
    return out;
}

inline std::vector<double> predict(const TrainedModel& model, std::span<const Pair> pairs,
                                   PredictMode mode = {}) {
    auto out = predict_logits(model, pairs, mode);
    for (auto& z : out) z = sigmoid(z);
    return out;
}

/// Max relative error between analytic and central-difference gradients of the
/// mean weighted loss, over every parameter the batch touches.
inline double gradient_check(const ModelSpec& spec, std::span<const LabeledPair> batch, double epsilon,
                             Seed seed = 7, LossKind kind = LossKind::bce,
                             std::span<const double> weights = {}) {
    auto model = init(spec, seed);
    model.spec.dropout_rate = 0.0;
    const auto [_, analytic] = loss_and_gradient(model, batch, kind, weights);
    const Layout L(spec);
    std::vector<char> touched(L.total, 0);
    for (const auto& s : batch)
        for (std::size_t f = 0; f < L.dim; ++f) {
            touched[L.user_emb + s.user * L.dim + f] = 1;
            touched[L.item_emb + s.item * L.dim + f] = 1;
        }
    for (std::size_t at = L.dense_begin; at < L.total; ++at) touched[at] = 1;
    double worst = 0.0;
    for (std::size_t at = 0; at < L.total; ++at) {
        if (!touched[at]) continue;
        const double saved = model.parameters[at];
        model.parameters[at] = saved + epsilon;
        const double up = loss_and_gradient(model, batch, kind, weights).first;
        model.parameters[at] = saved - epsilon;
        const double down = loss_and_gradient(model, batch, kind, weights).first;
        model.parameters[at] = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double denom = std::max({std::abs(analytic[at]), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(analytic[at] - numeric) / denom);
    }
    return worst;
}

// Checkpoints: one JSON header line, then one hex-float parameter per line.

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    return {{"n_users", s.n_users},         {"n_items", s.n_items},
            {"embedding_dim", s.embedding_dim}, {"mlp_layers", s.mlp_layers},
            {"dropout_rate", s.dropout_rate}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.n_users = j.at("n_users").get<std::size_t>();
    s.n_items = j.at("n_items").get<std::size_t>();
    s.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    s.mlp_layers = j.at("mlp_layers").get<std::vector<std::size_t>>();
    s.dropout_rate = j.at("dropout_rate").get<double>();
    s.validate();
    return s;
}

inline void save_checkpoint(const TrainedModel& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    nlohmann::json header{{"format", "calips-model"},
                          {"version", kCheckpointVersion},
                          {"spec", spec_to_json(m.spec)},
                          {"training_seed", m.training_seed},
                          {"n_parameters", m.parameters.size()}};
    out << header.dump() << '\n';
    char buf[64];
    for (double v : m.parameters) {
        std::snprintf(buf, sizeof buf, "%a\n", v);
        out << buf;
    }
}

inline TrainedModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
        throw LoadError(path.string() + ":1: bad checkpoint header: " + e.what());
    }
    if (header.value("format", "") != "calips-model" || header.value("version", 0) != kCheckpointVersion)
        throw LoadError(path.string() + ": unsupported checkpoint format/version");
    TrainedModel m;
    m.spec = spec_from_json(header.at("spec"));
    m.training_seed = header.at("training_seed").get<Seed>();
    const auto n = header.at("n_parameters").get<std::size_t>();
    if (n != parameter_count(m.spec)) throw LoadError(path.string() + ": parameter count does not match spec");
    m.parameters.reserve(n);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        char* end = nullptr;
        const double v = std::strtod(line.c_str(), &end);
        if (end == line.c_str()) throw LoadError(path.string() + ":" + std::to_string(line_no) + ": bad value");
        m.parameters.push_back(v);
    }
    if (m.parameters.size() != n) throw LoadError(path.string() + ": truncated parameter list");
    return m;
}

}  // namespace calips::nn
