#include <iostream>

#include <CLI11.hpp>

#include "bikefed/pipeline.hpp"
#include "bikefed/synth.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated gradient-boosted bike demand forecasting"};
    app.require_subcommand(1);

    std::string config_path;
    std::string log_level = "info";
    app.add_option("--config", config_path, "Run config (JSON)");
    app.add_option("--log", log_level, "Log level")->check(CLI::IsMember({"info", "debug"}));

    auto* ingest = app.add_subcommand("ingest", "Parse, clean and aggregate trips into hourly demand");
    auto* train = app.add_subcommand("train", "Train the centralized or federated variant");
    std::string variant;
    train->add_option("--variant", variant, "cml | hfl")->required();
    auto* evaluate = app.add_subcommand("evaluate", "Score trained variants on the test split");
    auto* report = app.add_subcommand("report", "Print stored metric tables");

    auto* synth = app.add_subcommand("synth", "Write a synthetic trip file");
    std::string synth_out;
    bikefed::SynthSpec synth_spec;
    synth->add_option("--out", synth_out, "Output CSV path")->required();
    synth->add_option("--clients", synth_spec.n_clients, "Station groups");
    synth->add_option("--stations", synth_spec.stations_per_client, "Stations per group");
    synth->add_option("--days", synth_spec.days, "Days of trips");
    synth->add_option("--seed", synth_spec.seed, "Seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        bikefed::set_log_level(log_level == "debug" ? bikefed::LogLevel::debug : bikefed::LogLevel::info);
        if (synth->parsed()) {
            bikefed::atomic_write(synth_out, bikefed::synthetic_trip_csv(synth_spec));
            return kExitOk;
        }
        if (config_path.empty()) throw bikefed::UsageError("--config is required");
        const auto cfg = bikefed::load_run_config_file(config_path);
        if (ingest->parsed()) {
            bikefed::cmd_ingest(cfg);
        } else if (train->parsed()) {
            bikefed::cmd_train(cfg, bikefed::train_variant_from(variant));
        } else if (evaluate->parsed()) {
            bikefed::cmd_evaluate(cfg);
        } else if (report->parsed()) {
            std::cout << bikefed::cmd_report(cfg);
        }
        return kExitOk;
    } catch (const bikefed::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const bikefed::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const bikefed::SchemaError& e) {
        std::cerr << "schema error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}
