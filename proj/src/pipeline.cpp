#include "bikefed/pipeline.hpp"

#include <cstdio>
#include <cstdlib>
#include <fcntl.h>
#include <iostream>
#include <sstream>
#include <unistd.h>

namespace bikefed {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

namespace {
LogLevel g_log_level = LogLevel::info;
}

void set_log_level(LogLevel level) { g_log_level = level; }
void log_info(const std::string& msg) { std::clog << "[info] " << msg << '\n'; }
void log_debug(const std::string& msg) {
    if (g_log_level == LogLevel::debug) std::clog << "[debug] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

nlohmann::json RunConfig::to_json() const {
    auto opt = [](const std::optional<fs::path>& p) -> nlohmann::json {
        return p ? nlohmann::json(p->string()) : nlohmann::json(nullptr);
    };
    nlohmann::json fed_json = bikefed::to_json(fed);
    fed_json.erase("seed");
    fed_json.erase("n_clients");
    return {{"dataset", dataset},
            {"trips",
             {{"path", trips_path.string()},
              {"schema",
               {{"start_station", schema.start_station},
                {"end_station", schema.end_station},
                {"started_at", schema.started_at},
                {"ended_at", schema.ended_at}}},
              {"delimiter", std::string(1, schema.delimiter)}}},
            {"clean",
             {{"min_roundtrip_s", clean.min_roundtrip.count()},
              {"max_duration_h", static_cast<double>(clean.max_duration.count()) / 3600.0},
              {"min_daily_rentals", clean.min_daily_rentals}}},
            {"calendar", {{"holidays", opt(holidays_path)}, {"school", opt(school_path)}}},
            {"features", bikefed::to_json(features)},
            {"gbt", bikefed::to_json(gbt)},
            {"federation", fed_json},
            {"partition",
             {{"n_clients", n_clients},
              {"mode", partition_mode == PartitionMode::hash ? "hash" : "file"},
              {"file", opt(partition_path)}}},
            {"split", {split.train, split.valid, split.test}},
            {"horizons", horizons},
            {"output_dir", output_dir.string()},
            {"seed", seed},
            {"threads", threads}};
}

std::string RunConfig::config_hash() const {
    auto j = to_json();
    j.erase("output_dir");
    j.erase("threads");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

void RunConfig::validate() const {
    auto must_exist = [](const fs::path& p, const char* what) {
        if (!fs::exists(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
    };
    if (trips_path.empty()) throw ConfigError("config: trips.path is required");
    must_exist(trips_path, "trip file");
    if (holidays_path) must_exist(*holidays_path, "holiday file");
    if (school_path) must_exist(*school_path, "school calendar file");
    if (partition_mode == PartitionMode::file) {
        if (!partition_path) throw ConfigError("config: partition.mode=file requires partition.file");
        must_exist(*partition_path, "partition file");
    }
    if (n_clients < 1) throw ConfigError("config: partition.n_clients must be >= 1");
    if (horizons.empty()) throw ConfigError("config: horizons must not be empty");
    for (int h : horizons)
        if (h < 1 || h > 6) throw ConfigError("config: horizons must lie in [1, 6]");
    if (threads < 1) throw ConfigError("config: threads must be >= 1");
}

RunConfig load_run_config(const nlohmann::json& doc, bool apply_env) {
    if (!doc.is_object()) throw ConfigError("config: top level must be a JSON object");
    RunConfig c;
    try {
        c.dataset = doc.value("dataset", c.dataset);
        if (doc.contains("trips")) {
            const auto& t = doc["trips"];
            c.trips_path = t.value("path", std::string{});
            if (t.contains("schema")) {
                const auto& s = t["schema"];
                c.schema.start_station = s.value("start_station", c.schema.start_station);
                c.schema.end_station = s.value("end_station", c.schema.end_station);
                c.schema.started_at = s.value("started_at", c.schema.started_at);
                c.schema.ended_at = s.value("ended_at", c.schema.ended_at);
            }
            const auto delim = t.value("delimiter", std::string(","));
            if (delim.size() != 1) throw ConfigError("config: trips.delimiter must be one character");
            c.schema.delimiter = delim[0];
        }
        if (doc.contains("clean")) {
            const auto& cl = doc["clean"];
            c.clean.min_roundtrip = std::chrono::seconds{cl.value("min_roundtrip_s", c.clean.min_roundtrip.count())};
            c.clean.max_duration = std::chrono::seconds{
                static_cast<std::int64_t>(std::llround(cl.value("max_duration_h", 24.0) * 3600.0))};
            c.clean.min_daily_rentals = cl.value("min_daily_rentals", c.clean.min_daily_rentals);
        }
        if (doc.contains("calendar")) {
            const auto& cal = doc["calendar"];
            if (cal.contains("holidays") && !cal["holidays"].is_null()) c.holidays_path = cal["holidays"].get<std::string>();
            if (cal.contains("school") && !cal["school"].is_null()) c.school_path = cal["school"].get<std::string>();
        }
        c.features = feature_spec_from_json(doc.value("features", nlohmann::json(nullptr)));
        c.gbt = gbt_params_from_json(doc.value("gbt", nlohmann::json(nullptr)));
        c.fed = fed_config_from_json(doc.value("federation", nlohmann::json(nullptr)));
        if (doc.contains("partition")) {
            const auto& p = doc["partition"];
            c.n_clients = p.value("n_clients", c.n_clients);
            const auto mode = p.value("mode", std::string("hash"));
            if (mode == "hash")
                c.partition_mode = PartitionMode::hash;
            else if (mode == "file")
                c.partition_mode = PartitionMode::file;
            else
                throw ConfigError("config: unknown partition mode '" + mode + "'");
            if (p.contains("file") && !p["file"].is_null()) c.partition_path = p["file"].get<std::string>();
        }
        if (doc.contains("split")) {
            const auto f = doc["split"].get<std::vector<double>>();
            if (f.size() != 3) throw ConfigError("config: split must have three fractions");
            c.split = {f[0], f[1], f[2]};
        }
        if (doc.contains("horizons")) c.horizons = doc["horizons"].get<std::vector<int>>();
        c.output_dir = doc.value("output_dir", c.output_dir.string());
        c.seed = doc.value("seed", c.seed);
        c.threads = doc.value("threads", c.threads);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (apply_env) {
        if (const char* v = std::getenv("BIKEFED_TRIPS")) c.trips_path = v;
        if (const char* v = std::getenv("BIKEFED_OUTPUT_DIR")) c.output_dir = v;
        if (const char* v = std::getenv("BIKEFED_PARTITION_FILE")) c.partition_path = fs::path(v);
        if (const char* v = std::getenv("BIKEFED_HOLIDAYS")) c.holidays_path = fs::path(v);
        if (const char* v = std::getenv("BIKEFED_SCHOOL")) c.school_path = fs::path(v);
    }
    c.fed.seed = c.seed;
    c.fed.n_clients = c.n_clients;
    c.fed.n_threads = c.threads;
    c.gbt.n_threads = c.threads;
    return c;
}

RunConfig load_run_config_file(const fs::path& path, bool apply_env) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    auto cfg = load_run_config(doc, apply_env);
    // Relative paths resolve against the config file's directory.
    const auto base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    auto resolve = [&](fs::path& p) {
        if (!p.empty() && p.is_relative()) p = base / p;
    };
    resolve(cfg.trips_path);
    resolve(cfg.output_dir);
    if (cfg.holidays_path) resolve(*cfg.holidays_path);
    if (cfg.school_path) resolve(*cfg.school_path);
    if (cfg.partition_path) resolve(*cfg.partition_path);
    return cfg;
}

nlohmann::json artifact_meta(const RunConfig& cfg) {
    return {{"config_hash", cfg.config_hash()}, {"seed", cfg.seed}, {"code_version", BIKEFED_VERSION}};
}

void check_artifact_meta(const nlohmann::json& meta, const RunConfig& cfg, const std::string& what) {
    const auto expected = artifact_meta(cfg);
    if (!meta.is_object() || meta.value("config_hash", std::string{}) != expected["config_hash"])
        throw ConfigError(what + " was produced under a different config (hash " +
                          (meta.is_object() ? meta.value("config_hash", std::string("?")) : std::string("?")) +
                          ", expected " + expected["config_hash"].get<std::string>() + "); re-run the earlier stages");
    if (meta.value("code_version", std::string{}) != BIKEFED_VERSION)
        throw ConfigError(what + " was produced by another code version");
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

namespace {

/// Exclusive lock on the output directory for the lifetime of one subcommand.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) throw Error("output directory is locked by another run: " + path_.string());
    }
    ~DirLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

nlohmann::json read_json(const fs::path& p) {
    if (!fs::exists(p)) throw Error("missing artifact: " + p.string());
    try {
        return nlohmann::json::parse(read_file(p));
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const nlohmann::json& j) { atomic_write(p, j.dump(1) + "\n"); }

struct LoadedData {
    DemandStore store;
    ClientPartition partition;
    TemporalSplit split;
    Timestamp t0;
};

FeatureSpec spec_with_calendar(const RunConfig& cfg) {
    FeatureSpec spec = cfg.features;
    if (cfg.holidays_path) spec.calendar.holidays = read_date_file(*cfg.holidays_path);
    if (cfg.school_path) spec.calendar.school_days = read_date_file(*cfg.school_path);
    return spec;
}

LoadedData load_ingested(const RunConfig& cfg) {
    const auto manifest = read_json(cfg.output_dir / "manifest.json");
    check_artifact_meta(manifest.value("meta", nlohmann::json{}), cfg, "demand store");
    LoadedData d;
    d.store = read_demand_store_csv(read_file(cfg.output_dir / "demand.csv"));
    const auto part = read_json(cfg.output_dir / "partition.json");
    std::set<StationId> stations;
    for (const auto& [s, ds] : d.store) stations.insert(s);
    const auto mapping = read_partition_json(part);
    d.partition = partition_clients(stations, cfg.n_clients, PartitionMode::file, &mapping);
    const auto L = d.store.begin()->second.size();
    d.split = temporal_split(L, cfg.split);
    d.t0 = d.store.begin()->second.t0;
    return d;
}

fs::path model_dir(const RunConfig& cfg, TrainVariant v) {
    return cfg.output_dir / "models" / (v == TrainVariant::cml ? "cml" : "hfl");
}

std::vector<TaskKey> configured_tasks(const RunConfig& cfg) { return all_tasks(cfg.horizons); }

std::uint64_t task_seed(std::uint64_t seed, const TaskKey& k) {
    return mix_seed(seed, static_cast<std::uint64_t>(k.horizon), k.target == TargetKind::arrivals ? 1 : 2);
}

}  // namespace

TrainVariant train_variant_from(const std::string& s) {
    if (s == "cml") return TrainVariant::cml;
    if (s == "hfl") return TrainVariant::hfl;
    throw UsageError("unknown variant '" + s + "' (expected cml or hfl)");
}

TaskMatrices build_task_matrices(const DemandStore& store, const ClientPartition& partition, const TaskKey& task,
                                 const FeatureSpec& spec, const TemporalSplit& split) {
    TaskMatrices tm;
    for (const auto& [id, series] : store) {
        const auto it = partition.assignment.find(id);
        if (it == partition.assignment.end()) throw DataError("station '" + id + "' has no client assignment");
        tm.stations.push_back(assemble_matrix(series, task.target, task.horizon, spec, split));
        tm.client_of.push_back(it->second);
    }
    return tm;
}

std::vector<ClientData> client_datasets(const TaskMatrices& tm) {
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < tm.stations.size(); ++i) members[tm.client_of[i]].push_back(i);
    std::vector<ClientData> out;
    for (const auto& [client, idx] : members) {
        std::vector<const FeatureMatrix*> train, valid;
        for (auto i : idx) {
            train.push_back(&tm.stations[i].train);
            valid.push_back(&tm.stations[i].valid);
        }
        out.push_back({client, stack(train), stack(valid)});
    }
    return out;
}

Dataset pooled(const TaskMatrices& tm, int part) {
    std::vector<const FeatureMatrix*> parts;
    for (const auto& s : tm.stations)
        parts.push_back(part == 0 ? &s.train : part == 1 ? &s.valid : &s.test);
    return stack(parts);
}

Ensemble train_cml(const TaskMatrices& tm, const GbtParams& params, int patience) {
    const auto train = pooled(tm, 0);
    const auto valid = pooled(tm, 1);
    EarlyStop es{valid.X, valid.y, patience};
    return fit_ensemble(train.X, train.y, params, tm.stations.front().train.feature_names,
                        valid.size() > 0 ? &es : nullptr);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

IngestSummary cmd_ingest(const RunConfig& cfg) {
    cfg.validate();
    DirLock lock(cfg.output_dir);
    IngestSummary sum;
    ParseResult parsed;
    try {
        parsed = parse_trips_file(cfg.trips_path, cfg.schema);
    } catch (const SchemaError& e) {
        throw SchemaError(cfg.trips_path.string() + ": " + e.what());
    }
    sum.trips_parsed = parsed.trips.size();
    sum.malformed = parsed.malformed;
    if (parsed.malformed > 0) {
        std::string lines;
        for (auto l : parsed.malformed_lines) lines += " " + std::to_string(l);
        log_info(std::to_string(parsed.malformed) + " malformed rows in " + cfg.trips_path.string() +
                 " (first at line(s)" + lines + ")");
    }
    auto cleaned = clean_trips(parsed.trips, cfg.clean);
    sum.clean = cleaned.report;
    if (cleaned.stations.empty()) throw DataError("no station survives cleaning");
    const auto store = aggregate_demand(cleaned.trips, cleaned.stations);

    ClientPartition partition;
    if (cfg.partition_mode == PartitionMode::file) {
        const auto mapping = read_partition_json(read_json(*cfg.partition_path));
        partition = partition_clients(cleaned.stations, cfg.n_clients, PartitionMode::file, &mapping);
    } else {
        partition = partition_clients(cleaned.stations, cfg.n_clients, PartitionMode::hash);
    }
    sum.stations = store.size();
    sum.hours = store.begin()->second.size();

    atomic_write(cfg.output_dir / "demand.csv", demand_store_csv(store));
    write_json(cfg.output_dir / "partition.json", partition_json(partition));
    nlohmann::json manifest = {{"meta", artifact_meta(cfg)},
                               {"grid", {{"t0", format_timestamp(store.begin()->second.t0)}, {"step_s", kSecondsPerHour}, {"length", sum.hours}}},
                               {"stations", nlohmann::json::array()},
                               {"malformed_rows", parsed.malformed},
                               {"clean_report", clean_report_json(cleaned.report)}};
    for (const auto& s : cleaned.stations) manifest["stations"].push_back(s);
    write_json(cfg.output_dir / "manifest.json", manifest);
    log_info("ingested " + std::to_string(sum.clean.retained) + " trips over " + std::to_string(sum.stations) +
             " stations and " + std::to_string(sum.hours) + " hours");
    return sum;
}

void cmd_train(const RunConfig& cfg, TrainVariant variant) {
    DirLock lock(cfg.output_dir);
    const auto data = load_ingested(cfg);
    const auto spec = spec_with_calendar(cfg);
    const auto dir = model_dir(cfg, variant);
    for (const auto& task : configured_tasks(cfg)) {
        const auto tm = build_task_matrices(data.store, data.partition, task, spec, data.split);
        if (variant == TrainVariant::cml) {
            GbtParams p = cfg.gbt;
            p.n_trees = cfg.fed.trees_per_client;
            const auto ens = train_cml(tm, p, cfg.fed.patience);
            write_json(dir / (task.name() + ".json"), {{"meta", artifact_meta(cfg)}, {"model", serialize(ens)}});
            log_info("cml " + task.name() + ": " + std::to_string(ens.n_trees()) + " trees");
        } else {
            const auto clients = client_datasets(tm);
            FedConfig fc = cfg.fed;
            fc.seed = task_seed(cfg.seed, task);
            const auto run = run_federation(clients, cfg.gbt, fc);
            write_json(dir / (task.name() + ".forest.json"), {{"meta", artifact_meta(cfg)}, {"forest", to_json(run.forest)}});
            write_json(dir / (task.name() + ".agg.json"), {{"meta", artifact_meta(cfg)}, {"layer", to_json(run.layer)}});
            atomic_write(cfg.output_dir / "logs" / ("hfl_" + task.name() + ".jsonl"), run.log_jsonl());
            log_info("hfl " + task.name() + ": " + std::to_string(clients.size()) + " clients, " +
                     std::to_string(run.rounds.size()) + " rounds");
        }
    }
}

EvaluateSummary cmd_evaluate(const RunConfig& cfg) {
    DirLock lock(cfg.output_dir);
    const auto data = load_ingested(cfg);
    const auto spec = spec_with_calendar(cfg);
    const auto tasks = configured_tasks(cfg);

    auto present = [&](TrainVariant v) {
        std::vector<std::string> missing;
        for (const auto& t : tasks) {
            const auto base = model_dir(cfg, v) / t.name();
            const bool ok = v == TrainVariant::cml ? fs::exists(fs::path(base.string() + ".json"))
                                                   : fs::exists(fs::path(base.string() + ".forest.json")) &&
                                                         fs::exists(fs::path(base.string() + ".agg.json"));
            if (!ok) missing.push_back(t.name());
        }
        return missing;
    };
    const auto missing_cml = present(TrainVariant::cml);
    const auto missing_hfl = present(TrainVariant::hfl);
    const bool have_cml = missing_cml.empty();
    const bool have_hfl = missing_hfl.empty();
    auto list = [](const std::vector<std::string>& v) {
        std::string s;
        for (const auto& x : v) s += " " + x;
        return s;
    };
    if (!have_cml && !have_hfl)
        throw Error("no complete set of trained models; cml missing:" + list(missing_cml) + "; hfl missing:" +
                    list(missing_hfl));
    if (!have_cml && missing_cml.size() != tasks.size()) throw Error("cml models missing for:" + list(missing_cml));
    if (!have_hfl && missing_hfl.size() != tasks.size()) throw Error("hfl models missing for:" + list(missing_hfl));

    std::map<TaskKey, Forecaster> cml_models, hfl_models;
    std::map<TaskKey, TaskMatrices> matrices;
    TestSet test;
    for (const auto& t : tasks) {
        const auto base = (model_dir(cfg, TrainVariant::cml) / t.name()).string();
        const auto hbase = (model_dir(cfg, TrainVariant::hfl) / t.name()).string();
        if (have_cml) {
            const auto doc = read_json(base + ".json");
            check_artifact_meta(doc.value("meta", nlohmann::json{}), cfg, "model " + base + ".json");
            auto ens = std::make_shared<Ensemble>(deserialize_ensemble(doc.at("model")));
            cml_models[t] = [ens](const Matrix& X) { return predict(*ens, X); };
        }
        if (have_hfl) {
            const auto fdoc = read_json(hbase + ".forest.json");
            const auto adoc = read_json(hbase + ".agg.json");
            check_artifact_meta(fdoc.value("meta", nlohmann::json{}), cfg, "model " + hbase + ".forest.json");
            check_artifact_meta(adoc.value("meta", nlohmann::json{}), cfg, "model " + hbase + ".agg.json");
            auto forest = std::make_shared<GlobalForest>(global_forest_from_json(fdoc.at("forest")));
            auto layer = std::make_shared<AggLayer>(agg_layer_from_json(adoc.at("layer")));
            hfl_models[t] = [forest, layer](const Matrix& X) { return predict_global(*forest, *layer, X); };
        }
        matrices.emplace(t, build_task_matrices(data.store, data.partition, t, spec, data.split));
        for (const auto& s : matrices.at(t).stations) test[t].push_back(&s.test);
    }

    EvaluateSummary sum;
    const auto reports = cfg.output_dir / "reports";
    if (have_cml) {
        sum.cml = evaluate(cml_models, test, Variant::cml, cfg.dataset);
        write_json(reports / "metrics_cml.json", {{"meta", artifact_meta(cfg)}, {"report", sum.cml->to_json()}});
        atomic_write(reports / "table_cml.csv", sum.cml->table());
    }
    if (have_hfl) {
        sum.hfl = evaluate(hfl_models, test, Variant::hfl_global, cfg.dataset);
        write_json(reports / "metrics_hfl.json", {{"meta", artifact_meta(cfg)}, {"report", sum.hfl->to_json()}});
        atomic_write(reports / "table_hfl.csv", sum.hfl->table());
    }
    if (have_cml && have_hfl) {
        atomic_write(reports / "comparison.csv", gap_table(compare(*sum.cml, *sum.hfl)));
    } else {
        log_info(std::string("only the ") + (have_cml ? "cml" : "hfl") + " variant is trained; comparison omitted");
        std::error_code ec;
        fs::remove(reports / "comparison.csv", ec);
    }

    // Percentile stations on horizon-1 arrivals RMSE.
    const TaskKey h1{cfg.horizons.front(), TargetKind::arrivals};
    const auto& primary = have_cml ? cml_models.at(h1) : hfl_models.at(h1);
    const auto rm = per_station_rmse(primary, test.at(h1));
    if (rm.size() >= 4) {
        sum.representative = representative_stations(rm);
        const int pct[] = {25, 50, 75};
        for (std::size_t i = 0; i < sum.representative.size(); ++i) {
            const auto& station = sum.representative[i];
            for (const auto* m : test.at(h1)) {
                if (m->station != station) continue;
                const Forecaster& a = have_cml ? cml_models.at(h1) : hfl_models.at(h1);
                const Forecaster* b = (have_cml && have_hfl) ? &hfl_models.at(h1) : nullptr;
                const auto tr = station_trace(*m, data.t0, a, b);
                atomic_write(reports / ("fig3_p" + std::to_string(pct[i]) + ".csv"), trace_csv(tr, data.t0));
            }
        }
    } else {
        log_info("fewer than 4 stations; percentile-station series skipped");
    }
    return sum;
}

std::string cmd_report(const RunConfig& cfg) {
    const auto reports = cfg.output_dir / "reports";
    std::ostringstream out;
    bool any = false;
    for (const char* name : {"metrics_cml.json", "metrics_hfl.json"}) {
        if (!fs::exists(reports / name)) continue;
        const auto doc = read_json(reports / name);
        check_artifact_meta(doc.value("meta", nlohmann::json{}), cfg, "report " + std::string(name));
        out << metrics_report_from_json(doc.at("report")).table() << '\n';
        any = true;
    }
    if (!any) throw Error("no reports in " + reports.string() + "; run evaluate first");
    if (fs::exists(reports / "comparison.csv")) out << "relative gap (HFL vs CML)\n" << read_file(reports / "comparison.csv");
    return out.str();
}

}  // namespace bikefed
