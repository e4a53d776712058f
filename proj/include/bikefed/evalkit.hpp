#pragma once

#include <compare>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bikefed/common.hpp"
#include "bikefed/featurize.hpp"
#include "bikefed/metrics.hpp"

namespace bikefed {

struct TaskKey {
    int horizon = 1;
    TargetKind target = TargetKind::arrivals;

    auto operator<=>(const TaskKey&) const = default;
    std::string name() const { return "h" + std::to_string(horizon) + "_" + to_string(target); }
};

std::vector<TaskKey> all_tasks(const std::vector<int>& horizons = {1, 2, 3, 4, 5, 6});

struct MetricCell {
    double smape = 0.0;  // fraction
    double maape = 0.0;  // radians
    double mae = 0.0;    // bikes
    double rmse = 0.0;   // bikes
    std::size_t n_points = 0;
};

MetricCell score(const Vector& actual, const Vector& predicted);

enum class Variant { cml, hfl_global };
const char* to_string(Variant v);

struct MetricsReport {
    std::string dataset;
    Variant variant = Variant::cml;
    std::map<TaskKey, MetricCell> cells;

    nlohmann::json to_json() const;
    /// Metric rows by horizon columns, each cell "arrivals / departures".
    std::string table() const;
};

MetricsReport metrics_report_from_json(const nlohmann::json& j);

using Forecaster = std::function<Vector(const Matrix&)>;
using TestSet = std::map<TaskKey, std::vector<const FeatureMatrix*>>;

/// Pools every (station, origin hour) test point per task before scoring.
/// Predictions are clamped at 0.
MetricsReport evaluate(const std::map<TaskKey, Forecaster>& models, const TestSet& test, Variant variant,
                       const std::string& dataset = "");

std::map<StationId, double> per_station_rmse(const Forecaster& model, const std::vector<const FeatureMatrix*>& test);

/// Nearest-rank percentile stations (rank ceil(p/100 * N) on ascending RMSE,
/// ties by station id). Supported percentiles: 25, 50, 75.
std::vector<StationId> representative_stations(const std::map<StationId, double>& rmse,
                                               const std::vector<int>& percentiles = {25, 50, 75});

struct StationTrace {
    StationId station;
    std::vector<Eigen::Index> hour_index;
    Vector actual;
    Vector cml;
    Vector hfl;
};

/// `hours` consecutive test rows starting at the first midnight origin.
StationTrace station_trace(const FeatureMatrix& test, Timestamp t0, const Forecaster& cml, const Forecaster* hfl,
                           Eigen::Index hours = 24);
std::string trace_csv(const StationTrace& trace, Timestamp t0);

struct GapCell {
    std::optional<double> mae;
    std::optional<double> rmse;
};

/// (hfl - cml) / cml per task; not applicable where the CML value is 0.
std::map<TaskKey, GapCell> compare(const MetricsReport& cml, const MetricsReport& hfl);
std::string gap_table(const std::map<TaskKey, GapCell>& gaps);

}  // namespace bikefed
