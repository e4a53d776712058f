#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bikefed/agg_layer.hpp"
#include "bikefed/common.hpp"
#include "bikefed/featurize.hpp"
#include "bikefed/gbt.hpp"

namespace bikefed {

enum class AggInit { warm_start, random_participant };

struct FedConfig {
    int n_clients = 8;
    double p_train = 0.25;
    int e_local = 10;
    int e_global = 15;
    int patience = 5;
    double mu_prox = 0.125;
    int trees_per_client = 37;
    int channels = 4;
    double lr = 0.01;
    int batch = 256;
    std::uint64_t seed = 42;
    AggInit init = AggInit::warm_start;
    int n_threads = 1;

    void validate() const;
};

nlohmann::json to_json(const FedConfig& c);
FedConfig fed_config_from_json(const nlohmann::json& j);

/// A client's private rows for one task. Never serialized, never sent.
struct ClientData {
    int id = 0;
    Dataset train;
    Dataset valid;
};

/// Client ensembles concatenated in ascending client-id order, each padded to
/// exactly M trees.
struct GlobalForest {
    std::vector<int> client_order;
    std::vector<Ensemble> blocks;
    int trees_per_client = 0;

    Eigen::Index n_blocks() const { return static_cast<Eigen::Index>(blocks.size()); }
    Eigen::Index n_trees() const { return n_blocks() * trees_per_client; }
    const std::vector<std::string>& feature_names() const { return blocks.front().feature_names; }
};

nlohmann::json to_json(const GlobalForest& forest);
GlobalForest global_forest_from_json(const nlohmann::json& j);

/// Appends zero-leaf trees up to M; predictions are unchanged.
Ensemble pad_ensemble(Ensemble ensemble, int M);

/// Fits one early-stopped ensemble of at most M trees per client, padded to M.
std::vector<Ensemble> local_fit_ensembles(const std::vector<ClientData>& clients, const GbtParams& params, int M,
                                          int patience, int n_threads = 1);

GlobalForest aggregate_forest(std::vector<Ensemble> ensembles, const std::vector<int>& client_ids);

/// rows x (K * M); column c * M + m is tree m of block c, unscaled.
Matrix forest_outputs(const GlobalForest& forest, const Matrix& X);

/// Every kernel entry eta, conv bias 0, dense weights 1 / (K C), dense bias the
/// mean block base score: the output equals the mean of the client-local predictions.
AggLayer init_agg_layer(const GlobalForest& forest, double eta, int channels);

/// Output equals block `block`'s local ensemble prediction.
AggLayer init_from_participant(const GlobalForest& forest, std::size_t block, double eta, int channels);

struct LocalFitResult {
    AggLayer layer;
    int epochs_run = 0;
    double train_mse = 0.0;
    double valid_mse = 0.0;
};

/// Proximal mini-batch descent on the FedProx objective starting from `global`. The
/// snapshot with the best validation MSE (no proximal term) over the epochs
/// run is returned; zero epochs return `global` unchanged.
LocalFitResult local_prox_epochs(const AggLayer& global, const Matrix& train_inputs, const Vector& train_y,
                                 const Matrix& valid_inputs, const Vector& valid_y, const FedConfig& cfg,
                                 std::uint64_t seed);

struct WeightedUpdate {
    AggLayer layer;
    double n_samples = 1.0;
};

/// Parameter-wise mean weighted by sample counts.
AggLayer fedprox_aggregate(const std::vector<WeightedUpdate>& updates);

struct ClientLoss {
    double train = 0.0;
    double valid = 0.0;
};

struct RoundLog {
    int round = 0;
    std::vector<int> selected;
    std::map<int, ClientLoss> client_losses;
    double global_param_l2 = 0.0;
};

nlohmann::json to_json(const RoundLog& r);

/// Everything that crossed the client/server boundary, as serialized payloads.
struct Message {
    std::string from;
    std::string to;
    std::string kind;  // "ensemble" | "forest" | "agg_layer" | "agg_update"
    std::string payload;
};

struct Transcript {
    std::vector<Message> messages;
};

struct FederationRun {
    FedConfig config;
    std::vector<RoundLog> rounds;
    GlobalForest forest;
    AggLayer layer;

    std::string log_jsonl() const;
};

/// Local ensembles, forest aggregation and broadcast, then e_global FedProx
/// rounds over the aggregation layer. All randomness derives from cfg.seed.
FederationRun run_federation(const std::vector<ClientData>& clients, const GbtParams& params, const FedConfig& cfg,
                             Transcript* transcript = nullptr);

/// Aggregation-layer output per row, clamped below at 0.
Vector predict_global(const GlobalForest& forest, const AggLayer& layer, const Matrix& X);
Vector predict_global_unclamped(const GlobalForest& forest, const AggLayer& layer, const Matrix& X);

}  // namespace bikefed
