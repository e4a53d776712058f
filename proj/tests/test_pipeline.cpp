#include <doctest.h>

#include <unistd.h>

#include "pipeline_fixture.hpp"

using namespace bikefed;
namespace fs = std::filesystem;

TEST_CASE("end-to-end run writes every artifact") {
    fixtures::Workspace ws("e2e");
    const auto cfg = load_run_config(ws.config("out"), false);
    const auto ingest = cmd_ingest(cfg);
    CHECK(ingest.stations == 9);
    CHECK(ingest.malformed > 0);
    CHECK(ingest.clean.removed_short_roundtrip > 0);
    CHECK(ingest.hours >= 45 * 24 - 1);

    cmd_train(cfg, TrainVariant::cml);
    cmd_train(cfg, TrainVariant::hfl);
    const auto summary = cmd_evaluate(cfg);
    REQUIRE(summary.cml);
    REQUIRE(summary.hfl);
    CHECK(summary.cml->cells.size() == 4);
    CHECK(summary.representative.size() == 3);
    for (const auto& [task, cell] : summary.hfl->cells) {
        CHECK(cell.n_points > 0);
        CHECK(std::isfinite(cell.mae));
        CHECK(cell.mae <= cell.rmse + 1e-12);
    }

    const auto out = cfg.output_dir;
    for (const char* f : {"demand.csv", "partition.json", "manifest.json", "models/cml/h1_arrivals.json",
                          "models/hfl/h2_departures.forest.json", "models/hfl/h2_departures.agg.json",
                          "logs/hfl_h1_arrivals.jsonl", "reports/metrics_cml.json", "reports/metrics_hfl.json",
                          "reports/comparison.csv", "reports/fig3_p50.csv"})
        CHECK_MESSAGE(fs::exists(out / f), f);
    CHECK_FALSE(fs::exists(out / ".lock"));

    const auto manifest = nlohmann::json::parse(read_file(out / "manifest.json"));
    CHECK(manifest["meta"]["config_hash"] == cfg.config_hash());
    const auto model = nlohmann::json::parse(read_file(out / "models/cml/h1_arrivals.json"));
    CHECK(deserialize_ensemble(model["model"]).feature_names.size() == 57);

    const auto text = cmd_report(cfg);
    CHECK(text.find("CML") != std::string::npos);
    CHECK(text.find("HFL-global") != std::string::npos);
}

TEST_CASE("reruns are idempotent and independent of thread count") {
    fixtures::Workspace ws("det");
    const auto a = load_run_config(ws.config("a", 1), false);
    const auto b = load_run_config(ws.config("b", 3), false);
    CHECK(a.config_hash() == b.config_hash());
    fixtures::run_all(a);
    const auto first = fixtures::snapshot(a.output_dir);
    fixtures::run_all(a);
    CHECK(fixtures::snapshot(a.output_dir) == first);
    fixtures::run_all(b);
    const auto other = fixtures::snapshot(b.output_dir);
    REQUIRE(other.size() == first.size());
    for (const auto& [name, body] : first) CHECK_MESSAGE(other.at(name) == body, name);
}

TEST_CASE("artifacts from another config are refused") {
    fixtures::Workspace ws("hash");
    auto doc = ws.config("out");
    const auto cfg = load_run_config(doc, false);
    cmd_ingest(cfg);
    doc["seed"] = 6;
    const auto changed = load_run_config(doc, false);
    CHECK(changed.config_hash() != cfg.config_hash());
    CHECK_THROWS_AS(cmd_train(changed, TrainVariant::cml), ConfigError);
    CHECK_THROWS_AS(cmd_evaluate(cfg), Error);
}

TEST_CASE("configuration errors") {
    CHECK(train_variant_from("cml") == TrainVariant::cml);
    CHECK(train_variant_from("hfl") == TrainVariant::hfl);
    CHECK_THROWS_AS(train_variant_from("gnn"), UsageError);

    fixtures::Workspace ws("cfg");
    auto doc = ws.config("out");
    doc["trips"]["path"] = (ws.root() / "missing.csv").string();
    const auto cfg = load_run_config(doc, false);
    try {
        cfg.validate();
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("missing.csv") != std::string::npos);
    }
    auto bad = ws.config("out");
    bad["partition"]["mode"] = "round_robin";
    CHECK_THROWS_AS(load_run_config(bad, false), ConfigError);
    bad = ws.config("out");
    bad["federation"]["p_train"] = 0.0;
    CHECK_THROWS_AS(load_run_config(bad, false), ConfigError);

    ::setenv("BIKEFED_OUTPUT_DIR", "/tmp/elsewhere", 1);
    CHECK(load_run_config(ws.config("out"), true).output_dir == "/tmp/elsewhere");
    CHECK(load_run_config(ws.config("out"), false).output_dir != "/tmp/elsewhere");
    ::unsetenv("BIKEFED_OUTPUT_DIR");

    auto threads = ws.config("out", 4);
    auto moved = ws.config("elsewhere", 1);
    CHECK(load_run_config(threads, false).config_hash() == load_run_config(moved, false).config_hash());
}
