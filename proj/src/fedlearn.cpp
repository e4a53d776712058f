#include "bikefed/fedlearn.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace bikefed {

void FedConfig::validate() const {
    if (n_clients < 1) throw ConfigError("fed: n_clients must be >= 1");
    if (!(p_train > 0.0 && p_train <= 1.0)) throw ConfigError("fed: p_train must lie in (0, 1]");
    if (e_local < 0 || e_global < 0) throw ConfigError("fed: epoch and round counts must be >= 0");
    if (patience < 1) throw ConfigError("fed: patience must be >= 1");
    if (!(mu_prox >= 0.0)) throw ConfigError("fed: mu_prox must be >= 0");
    if (trees_per_client < 1) throw ConfigError("fed: trees_per_client must be >= 1");
    if (channels < 1) throw ConfigError("fed: channels must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("fed: lr must be > 0");
    if (batch < 1) throw ConfigError("fed: batch must be >= 1");
}

nlohmann::json to_json(const FedConfig& c) {
    return {{"n_clients", c.n_clients},
            {"p_train", c.p_train},
            {"e_local", c.e_local},
            {"e_global", c.e_global},
            {"patience", c.patience},
            {"mu_prox", c.mu_prox},
            {"trees_per_client", c.trees_per_client},
            {"channels", c.channels},
            {"sgd", {{"lr", c.lr}, {"batch", c.batch}}},
            {"seed", c.seed},
            {"init", c.init == AggInit::warm_start ? "warm_start" : "random_participant"}};
}

FedConfig fed_config_from_json(const nlohmann::json& j) {
    FedConfig c;
    if (j.is_null()) return c;
    try {
        c.n_clients = j.value("n_clients", c.n_clients);
        c.p_train = j.value("p_train", c.p_train);
        c.e_local = j.value("e_local", c.e_local);
        c.e_global = j.value("e_global", c.e_global);
        c.patience = j.value("patience", c.patience);
        c.mu_prox = j.value("mu_prox", c.mu_prox);
        c.trees_per_client = j.value("trees_per_client", c.trees_per_client);
        c.channels = j.value("channels", c.channels);
        if (j.contains("sgd")) {
            c.lr = j["sgd"].value("lr", c.lr);
            c.batch = j["sgd"].value("batch", c.batch);
        }
        c.seed = j.value("seed", c.seed);
        c.n_threads = j.value("n_threads", c.n_threads);
        const auto init = j.value("init", std::string("warm_start"));
        if (init == "warm_start")
            c.init = AggInit::warm_start;
        else if (init == "random_participant")
            c.init = AggInit::random_participant;
        else
            throw ConfigError("fed: unknown init '" + init + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid federation config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Forest stage
// ---------------------------------------------------------------------------

Ensemble pad_ensemble(Ensemble ensemble, int M) {
    if (ensemble.n_trees() > M) throw ShapeError("pad_ensemble: ensemble already has more than M trees");
    while (ensemble.n_trees() < M) ensemble.trees.push_back(Tree::zero_leaf());
    return ensemble;
}

std::vector<Ensemble> local_fit_ensembles(const std::vector<ClientData>& clients, const GbtParams& params, int M,
                                          int patience, int n_threads) {
    for (const auto& c : clients)
        if (c.train.size() == 0) throw DataError("client " + std::to_string(c.id) + " has no training rows");
    GbtParams p = params;
    p.n_trees = M;
    std::vector<Ensemble> out(clients.size());
    parallel_for(clients.size(), n_threads, [&](std::size_t i) {
        const auto& c = clients[i];
        EarlyStop es{c.valid.X, c.valid.y, patience};
        out[i] = pad_ensemble(fit_ensemble(c.train.X, c.train.y, p, {}, c.valid.size() > 0 ? &es : nullptr), M);
    });
    return out;
}

GlobalForest aggregate_forest(std::vector<Ensemble> ensembles, const std::vector<int>& client_ids) {
    if (ensembles.empty()) throw DataError("aggregate_forest: no ensembles");
    if (ensembles.size() != client_ids.size()) throw ShapeError("aggregate_forest: one client id per ensemble");
    if (std::set<int>(client_ids.begin(), client_ids.end()).size() != client_ids.size())
        throw DataError("aggregate_forest: duplicate client ids");
    const auto M = ensembles.front().n_trees();
    for (const auto& e : ensembles) {
        if (e.feature_names != ensembles.front().feature_names)
            throw ShapeError("aggregate_forest: client ensembles disagree on feature names");
        if (e.n_trees() != M) throw ShapeError("aggregate_forest: client ensembles differ in tree count");
    }
    std::vector<std::size_t> order(ensembles.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return client_ids[a] < client_ids[b]; });
    GlobalForest forest;
    forest.trees_per_client = static_cast<int>(M);
    for (auto i : order) {
        forest.client_order.push_back(client_ids[i]);
        forest.blocks.push_back(std::move(ensembles[i]));
    }
    return forest;
}

Matrix forest_outputs(const GlobalForest& forest, const Matrix& X) {
    const Eigen::Index M = forest.trees_per_client;
    Matrix out(X.rows(), forest.n_trees());
    for (Eigen::Index c = 0; c < forest.n_blocks(); ++c)
        out.middleCols(c * M, M) = tree_outputs(forest.blocks[static_cast<std::size_t>(c)], X);
    return out;
}

AggLayer init_agg_layer(const GlobalForest& forest, double eta, int channels) {
    if (channels < 1) throw ConfigError("init_agg_layer: channels must be >= 1");
    const Eigen::Index K = forest.n_blocks();
    AggLayer l = AggLayer::zeros(K, forest.trees_per_client, channels);
    l.conv_weights.setConstant(eta);
    l.dense_weights.setConstant(1.0 / static_cast<double>(K * channels));
    double base = 0.0;
    for (const auto& b : forest.blocks) base += b.base_score;
    l.dense_bias = base / static_cast<double>(K);
    return l;
}

AggLayer init_from_participant(const GlobalForest& forest, std::size_t block, double eta, int channels) {
    if (block >= forest.blocks.size()) throw DataError("init_from_participant: block out of range");
    const Eigen::Index K = forest.n_blocks();
    AggLayer l = AggLayer::zeros(K, forest.trees_per_client, channels);
    l.conv_weights.setConstant(eta);
    for (Eigen::Index co = 0; co < channels; ++co)
        l.dense_weights[co * K + static_cast<Eigen::Index>(block)] = 1.0 / channels;
    l.dense_bias = forest.blocks[block].base_score;
    return l;
}

Vector predict_global_unclamped(const GlobalForest& forest, const AggLayer& layer, const Matrix& X) {
    if (layer.input_size() != forest.n_trees() || layer.kernel() != forest.trees_per_client)
        throw ShapeError("predict_global: aggregation layer does not match the forest");
    return agg_forward_batch(layer, forest_outputs(forest, X));
}

Vector predict_global(const GlobalForest& forest, const AggLayer& layer, const Matrix& X) {
    return predict_global_unclamped(forest, layer, X).cwiseMax(0.0);
}

// ---------------------------------------------------------------------------
// Aggregation-layer stage
// ---------------------------------------------------------------------------

namespace {

double mse(const AggLayer& layer, const Matrix& inputs, const Vector& y) {
    return (agg_forward_batch(layer, inputs) - y).squaredNorm() / static_cast<double>(y.size());
}

}  // namespace

LocalFitResult local_prox_epochs(const AggLayer& global, const Matrix& train_inputs, const Vector& train_y,
                                 const Matrix& valid_inputs, const Vector& valid_y, const FedConfig& cfg,
                                 std::uint64_t seed) {
    if (train_inputs.rows() != train_y.size() || train_y.size() == 0)
        throw ShapeError("local_prox_epochs: empty or mismatched training data");
    if (valid_inputs.rows() != valid_y.size()) throw ShapeError("local_prox_epochs: mismatched validation data");
    const bool has_valid = valid_y.size() > 0;

    LocalFitResult res;
    res.layer = global;
    AggLayer w = global;
    AggLayer grad;
    const Vector anchor = global.flatten();
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    Rng rng(seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(train_y.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    const auto batch = static_cast<Eigen::Index>(cfg.batch);

    for (int epoch = 0; epoch < cfg.e_local; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (Eigen::Index start = 0; start < train_y.size(); start += batch) {
            const Eigen::Index len = std::min(batch, train_y.size() - start);
            const std::vector<Eigen::Index> idx(order.begin() + start, order.begin() + start + len);
            const Matrix xb = train_inputs(idx, Eigen::all);
            const Vector yb = train_y(idx);
            const double loss = prox_objective(w, xb, yb, global, 0.0, &grad);
            if (!std::isfinite(loss)) throw DataError("local_prox_epochs: loss diverged (lower the learning rate)");
            // Gradient step on the data term, then the exact proximal map of
            // the quadratic pull, which stays stable for any mu.
            const double shrink = cfg.lr * cfg.mu_prox;
            w.assign((w.flatten() - cfg.lr * grad.flatten() + shrink * anchor) / (1.0 + shrink));
        }
        if (!w.all_finite()) throw DataError("local_prox_epochs: parameters diverged (lower the learning rate)");
        ++res.epochs_run;
        const double v = has_valid ? mse(w, valid_inputs, valid_y) : mse(w, train_inputs, train_y);
        if (!std::isfinite(v)) throw DataError("local_prox_epochs: validation loss is not finite");
        if (v < best) {
            best = v;
            res.layer = w;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    res.train_mse = mse(res.layer, train_inputs, train_y);
    res.valid_mse = has_valid ? mse(res.layer, valid_inputs, valid_y) : res.train_mse;
    return res;
}

AggLayer fedprox_aggregate(const std::vector<WeightedUpdate>& updates) {
    if (updates.empty()) throw DataError("fedprox_aggregate: no updates");
    const auto& shape = updates.front().layer;
    Vector acc = Vector::Zero(shape.parameter_count());
    double total = 0.0;
    for (const auto& u : updates) {
        if (u.layer.parameter_count() != shape.parameter_count() || u.layer.channels() != shape.channels())
            throw ShapeError("fedprox_aggregate: update shapes differ");
        if (!(u.n_samples > 0.0)) throw DataError("fedprox_aggregate: sample weight must be > 0");
        acc += u.n_samples * u.layer.flatten();
        total += u.n_samples;
    }
    AggLayer out = shape;
    out.assign(acc / total);
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

nlohmann::json to_json(const AggLayer& l) {
    nlohmann::json conv = nlohmann::json::array();
    for (Eigen::Index r = 0; r < l.conv_weights.rows(); ++r) {
        std::vector<double> row(l.conv_weights.row(r).begin(), l.conv_weights.row(r).end());
        conv.push_back(row);
    }
    return {{"version", kModelSchemaVersion},
            {"kind", "agg_layer"},
            {"conv_weights", conv},
            {"conv_bias", std::vector<double>(l.conv_bias.begin(), l.conv_bias.end())},
            {"dense_weights", std::vector<double>(l.dense_weights.begin(), l.dense_weights.end())},
            {"dense_bias", l.dense_bias}};
}

AggLayer agg_layer_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("version") || j["version"] != kModelSchemaVersion)
        throw SchemaError("aggregation layer document: missing or unsupported version");
    if (j.value("kind", std::string{}) != "agg_layer") throw SchemaError("aggregation layer document: wrong kind");
    AggLayer l;
    try {
        const auto conv = j.at("conv_weights").get<std::vector<std::vector<double>>>();
        const auto cb = j.at("conv_bias").get<std::vector<double>>();
        const auto dw = j.at("dense_weights").get<std::vector<double>>();
        const auto C = static_cast<Eigen::Index>(conv.size());
        if (C == 0 || static_cast<Eigen::Index>(cb.size()) != C || dw.size() % conv.size() != 0)
            throw SchemaError("aggregation layer document: inconsistent shapes");
        const auto M = static_cast<Eigen::Index>(conv.front().size());
        l = AggLayer::zeros(static_cast<Eigen::Index>(dw.size()) / C, M, C);
        for (Eigen::Index r = 0; r < C; ++r) {
            if (static_cast<Eigen::Index>(conv[static_cast<std::size_t>(r)].size()) != M)
                throw SchemaError("aggregation layer document: ragged conv weights");
            for (Eigen::Index c = 0; c < M; ++c) l.conv_weights(r, c) = conv[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        }
        l.conv_bias = Eigen::Map<const Vector>(cb.data(), C);
        l.dense_weights = Eigen::Map<const Vector>(dw.data(), static_cast<Eigen::Index>(dw.size()));
        if (!j.at("dense_bias").is_number()) throw SchemaError("aggregation layer document: dense_bias is not a number");
        l.dense_bias = j.at("dense_bias").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("aggregation layer document: ") + e.what());
    }
    if (!l.all_finite()) throw SchemaError("aggregation layer document: non-finite parameter");
    return l;
}

nlohmann::json to_json(const GlobalForest& f) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : f.blocks) blocks.push_back(serialize(b));
    return {{"version", kModelSchemaVersion},
            {"kind", "global_forest"},
            {"trees_per_client", f.trees_per_client},
            {"client_order", f.client_order},
            {"blocks", blocks}};
}

GlobalForest global_forest_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("version") || j["version"] != kModelSchemaVersion)
        throw SchemaError("forest document: missing or unsupported version");
    if (j.value("kind", std::string{}) != "global_forest") throw SchemaError("forest document: wrong kind");
    std::vector<Ensemble> blocks;
    std::vector<int> ids;
    try {
        for (const auto& b : j.at("blocks")) blocks.push_back(deserialize_ensemble(b));
        ids = j.at("client_order").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("forest document: ") + e.what());
    }
    auto forest = aggregate_forest(std::move(blocks), ids);
    if (forest.trees_per_client != j.value("trees_per_client", -1))
        throw SchemaError("forest document: trees_per_client disagrees with blocks");
    return forest;
}

nlohmann::json to_json(const RoundLog& r) {
    nlohmann::json losses = nlohmann::json::object();
    for (const auto& [id, l] : r.client_losses) losses[std::to_string(id)] = {{"train", l.train}, {"valid", l.valid}};
    return {{"round", r.round}, {"selected", r.selected}, {"client_losses", losses}, {"global_param_l2", r.global_param_l2}};
}

std::string FederationRun::log_jsonl() const {
    std::string out;
    for (const auto& r : rounds) out += to_json(r).dump() + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Protocol simulation
// ---------------------------------------------------------------------------

namespace {

/// In-process wire. Payloads are serialized on send and parsed on receipt, so
/// the receiving side only ever sees what the transcript records. Client
/// objects hold the raw rows and hand back payloads; only the orchestrator
/// moves payloads across.
class Channel {
public:
    explicit Channel(Transcript* transcript) : transcript_(transcript) {}

    nlohmann::json send(std::string from, std::string to, std::string kind, const nlohmann::json& payload) {
        std::string wire = payload.dump();
        if (transcript_) transcript_->messages.push_back({std::move(from), std::move(to), std::move(kind), wire});
        return nlohmann::json::parse(wire);
    }

private:
    Transcript* transcript_;
};

std::string client_name(int id) { return "client:" + std::to_string(id); }

class Client {
public:
    Client(const ClientData& data, const GbtParams& params, const FedConfig& cfg)
        : data_(&data), params_(params), cfg_(cfg) {}

    int id() const { return data_->id; }
    double n_samples() const { return static_cast<double>(data_->train.size()); }

    nlohmann::json local_ensemble() const {
        GbtParams p = params_;
        p.n_trees = cfg_.trees_per_client;
        p.n_threads = 1;
        EarlyStop es{data_->valid.X, data_->valid.y, cfg_.patience};
        const auto ens = pad_ensemble(
            fit_ensemble(data_->train.X, data_->train.y, p, {}, data_->valid.size() > 0 ? &es : nullptr),
            cfg_.trees_per_client);
        return serialize(ens);
    }

    void receive_forest(const nlohmann::json& doc) {
        const auto forest = global_forest_from_json(doc);
        train_inputs_ = forest_outputs(forest, data_->train.X);
        valid_inputs_ = forest_outputs(forest, data_->valid.X);
    }

    nlohmann::json train_round(const nlohmann::json& global_doc, std::uint64_t seed) const {
        const auto global = agg_layer_from_json(global_doc);
        const auto res =
            local_prox_epochs(global, train_inputs_, data_->train.y, valid_inputs_, data_->valid.y, cfg_, seed);
        nlohmann::json update = {{"layer", to_json(res.layer)},
                                 {"n_samples", n_samples()},
                                 {"train_mse", res.train_mse},
                                 {"valid_mse", res.valid_mse}};
        return update;
    }

private:
    const ClientData* data_;
    GbtParams params_;
    FedConfig cfg_;
    Matrix train_inputs_;
    Matrix valid_inputs_;
};

constexpr std::uint64_t kSelectionStream = 0x5e1ec7ULL;
constexpr std::uint64_t kInitStream = 0x1417ULL;

}  // namespace

FederationRun run_federation(const std::vector<ClientData>& clients, const GbtParams& params, const FedConfig& cfg,
                             Transcript* transcript) {
    cfg.validate();
    if (clients.empty()) throw DataError("run_federation: no clients");
    for (const auto& c : clients)
        if (c.train.size() == 0) throw DataError("client " + std::to_string(c.id) + " has no training rows");

    std::vector<Client> parties;
    for (const auto& c : clients) parties.emplace_back(c, params, cfg);
    std::sort(parties.begin(), parties.end(), [](const Client& a, const Client& b) { return a.id() < b.id(); });
    for (std::size_t i = 1; i < parties.size(); ++i)
        if (parties[i].id() == parties[i - 1].id()) throw DataError("run_federation: duplicate client ids");

    Channel channel(transcript);
    FederationRun run;
    run.config = cfg;

    // Stage 1: local ensembles. Fitting runs in parallel; messages are sent in client order.
    std::vector<nlohmann::json> ensemble_docs(parties.size());
    {
        std::vector<nlohmann::json> payloads(parties.size());
        parallel_for(parties.size(), cfg.n_threads, [&](std::size_t i) { payloads[i] = parties[i].local_ensemble(); });
        for (std::size_t i = 0; i < parties.size(); ++i)
            ensemble_docs[i] = channel.send(client_name(parties[i].id()), "server", "ensemble", payloads[i]);
    }

    // Stage 2: server sorts and concatenates, then broadcasts.
    std::vector<Ensemble> ensembles;
    std::vector<int> ids;
    for (std::size_t i = 0; i < parties.size(); ++i) {
        ensembles.push_back(deserialize_ensemble(ensemble_docs[i]));
        ids.push_back(parties[i].id());
    }
    run.forest = aggregate_forest(std::move(ensembles), ids);
    const auto forest_doc = to_json(run.forest);

    // Stage 3: every client precomputes its tree outputs once.
    for (auto& p : parties) p.receive_forest(channel.send("server", client_name(p.id()), "forest", forest_doc));

    const double eta = run.forest.blocks.front().eta;
    if (cfg.init == AggInit::warm_start) {
        run.layer = init_agg_layer(run.forest, eta, cfg.channels);
    } else {
        Rng rng(mix_seed(cfg.seed, kInitStream));
        run.layer = init_from_participant(run.forest, rng.below(parties.size()), eta, cfg.channels);
    }

    // Stage 4: FedProx rounds.
    for (int round = 1; round <= cfg.e_global; ++round) {
        RoundLog log;
        log.round = round;
        std::vector<std::size_t> chosen;
        for (std::uint64_t attempt = 0; chosen.empty(); ++attempt) {
            Rng rng(mix_seed(cfg.seed ^ kSelectionStream, static_cast<std::uint64_t>(round), attempt));
            for (std::size_t i = 0; i < parties.size(); ++i)
                if (rng.bernoulli(cfg.p_train)) chosen.push_back(i);
        }

        const auto global_doc = to_json(run.layer);
        std::vector<nlohmann::json> inbound(chosen.size());
        for (std::size_t k = 0; k < chosen.size(); ++k)
            inbound[k] = channel.send("server", client_name(parties[chosen[k]].id()), "agg_layer", global_doc);

        std::vector<nlohmann::json> replies(chosen.size());
        parallel_for(chosen.size(), cfg.n_threads, [&](std::size_t k) {
            const auto& party = parties[chosen[k]];
            const auto seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(party.id()) + 1);
            replies[k] = party.train_round(inbound[k], seed);
        });

        std::vector<WeightedUpdate> updates;
        for (std::size_t k = 0; k < chosen.size(); ++k) {
            const int id = parties[chosen[k]].id();
            const auto msg = channel.send(client_name(id), "server", "agg_update", replies[k]);
            updates.push_back({agg_layer_from_json(msg.at("layer")), msg.at("n_samples").get<double>()});
            log.selected.push_back(id);
            log.client_losses[id] = {msg.at("train_mse").get<double>(), msg.at("valid_mse").get<double>()};
        }
        run.layer = fedprox_aggregate(updates);
        log.global_param_l2 = run.layer.flatten().norm();
        run.rounds.push_back(std::move(log));
    }
    return run;
}

}  // namespace bikefed
