#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bikefed/evalkit.hpp"
#include "bikefed/featurize.hpp"
#include "bikefed/fedlearn.hpp"
#include "bikefed/gbt.hpp"
#include "bikefed/ingest.hpp"

namespace bikefed {

enum class LogLevel { info, debug };

struct RunConfig {
    std::string dataset = "dataset";
    std::filesystem::path trips_path;
    TripSchema schema;
    CleanParams clean;
    std::optional<std::filesystem::path> holidays_path;
    std::optional<std::filesystem::path> school_path;
    FeatureSpec features;
    GbtParams gbt;
    FedConfig fed;
    int n_clients = 8;
    PartitionMode partition_mode = PartitionMode::hash;
    std::optional<std::filesystem::path> partition_path;
    SplitFractions split;
    std::vector<int> horizons{1, 2, 3, 4, 5, 6};
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 42;
    int threads = 1;
    LogLevel log = LogLevel::info;

    /// Canonical JSON; the input to config_hash().
    nlohmann::json to_json() const;
    /// FNV-1a over the canonical JSON minus execution-only knobs (output_dir, threads).
    std::string config_hash() const;
    /// Checks referenced input files exist.
    void validate() const;
};

/// Parses a config document. Path fields may be overridden by BIKEFED_TRIPS,
/// BIKEFED_OUTPUT_DIR, BIKEFED_PARTITION_FILE, BIKEFED_HOLIDAYS, BIKEFED_SCHOOL.
RunConfig load_run_config(const nlohmann::json& doc, bool apply_env = true);
RunConfig load_run_config_file(const std::filesystem::path& path, bool apply_env = true);

/// {config_hash, seed, code_version}
nlohmann::json artifact_meta(const RunConfig& cfg);
/// Throws ConfigError when `meta` was produced under another config.
void check_artifact_meta(const nlohmann::json& meta, const RunConfig& cfg, const std::string& what);

struct IngestSummary {
    std::size_t trips_parsed = 0;
    std::size_t malformed = 0;
    CleanReport clean;
    std::size_t stations = 0;
    Eigen::Index hours = 0;
};

IngestSummary cmd_ingest(const RunConfig& cfg);

enum class TrainVariant { cml, hfl };
TrainVariant train_variant_from(const std::string& s);

void cmd_train(const RunConfig& cfg, TrainVariant variant);

struct EvaluateSummary {
    std::optional<MetricsReport> cml;
    std::optional<MetricsReport> hfl;
    std::vector<StationId> representative;
};

EvaluateSummary cmd_evaluate(const RunConfig& cfg);

/// Prints the stored reports as tables.
std::string cmd_report(const RunConfig& cfg);

/// Per-task split matrices for every station, in station order.
struct TaskMatrices {
    std::vector<SplitMatrices> stations;
    std::vector<int> client_of;  // parallel to stations
};

TaskMatrices build_task_matrices(const DemandStore& store, const ClientPartition& partition, const TaskKey& task,
                                 const FeatureSpec& spec, const TemporalSplit& split);

/// One ClientData per client that owns at least one station, ascending id.
std::vector<ClientData> client_datasets(const TaskMatrices& tm);
Dataset pooled(const TaskMatrices& tm, int part);  // 0 train, 1 valid, 2 test

/// Pooled CML ensemble: all clients' rows, early-stopped on pooled validation.
Ensemble train_cml(const TaskMatrices& tm, const GbtParams& params, int patience);

void set_log_level(LogLevel level);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace bikefed
