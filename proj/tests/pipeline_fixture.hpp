#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <unistd.h>

#include "bikefed/pipeline.hpp"
#include "bikefed/synth.hpp"

namespace fixtures {

namespace fs = std::filesystem;

/// A scratch directory holding a synthetic trips file, removed on destruction.
class Workspace {
public:
    explicit Workspace(const std::string& tag, bikefed::SynthSpec spec = small_spec()) {
        root_ = fs::temp_directory_path() / ("bikefed_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(root_);
        fs::create_directories(root_);
        bikefed::atomic_write(trips(), bikefed::synthetic_trip_csv(spec));
    }
    ~Workspace() {
        std::error_code ec;
        fs::remove_all(root_, ec);
    }
    Workspace(const Workspace&) = delete;
    Workspace& operator=(const Workspace&) = delete;

    static bikefed::SynthSpec small_spec() {
        bikefed::SynthSpec s;
        s.n_clients = 3;
        s.stations_per_client = 3;
        s.days = 45;
        s.seed = 17;
        return s;
    }

    fs::path root() const { return root_; }
    fs::path trips() const { return root_ / "trips.csv"; }

    nlohmann::json config(const std::string& out, int threads = 1) const {
        return {{"dataset", "synthetic"},
                {"trips", {{"path", trips().string()}}},
                {"partition", {{"n_clients", 3}, {"mode", "hash"}}},
                {"horizons", {1, 2}},
                {"gbt", {{"max_depth", 4}}},
                {"federation",
                 {{"p_train", 0.5},
                  {"e_local", 2},
                  {"e_global", 3},
                  {"trees_per_client", 10},
                  {"channels", 2},
                  {"sgd", {{"lr", 0.002}, {"batch", 128}}}}},
                {"output_dir", (root_ / out).string()},
                {"seed", 5},
                {"threads", threads}};
    }

private:
    fs::path root_;
};

/// Relative path -> contents for every file under `dir`.
inline std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = bikefed::read_file(e.path());
    return out;
}

inline void run_all(const bikefed::RunConfig& cfg) {
    bikefed::cmd_ingest(cfg);
    bikefed::cmd_train(cfg, bikefed::TrainVariant::cml);
    bikefed::cmd_train(cfg, bikefed::TrainVariant::hfl);
    bikefed::cmd_evaluate(cfg);
}

}  // namespace fixtures
