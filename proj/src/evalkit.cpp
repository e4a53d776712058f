#include "bikefed/evalkit.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

namespace bikefed {

std::vector<TaskKey> all_tasks(const std::vector<int>& horizons) {
    std::vector<TaskKey> out;
    for (int h : horizons)
        for (auto t : {TargetKind::arrivals, TargetKind::departures}) out.push_back({h, t});
    return out;
}

MetricCell score(const Vector& actual, const Vector& predicted) {
    MetricCell c;
    c.smape = smape(actual, predicted);
    c.maape = maape(actual, predicted);
    c.mae = mae(actual, predicted);
    c.rmse = rmse(actual, predicted);
    c.n_points = static_cast<std::size_t>(actual.size());
    return c;
}

const char* to_string(Variant v) { return v == Variant::cml ? "CML" : "HFL-global"; }

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& [k, c] : cells)
        tasks.push_back({{"horizon", k.horizon},
                         {"target", bikefed::to_string(k.target)},
                         {"smape_fraction", c.smape},
                         {"maape_rad", c.maape},
                         {"mae_bikes", c.mae},
                         {"rmse_bikes", c.rmse},
                         {"n_points", c.n_points}});
    return {{"dataset", dataset}, {"variant", bikefed::to_string(variant)}, {"tasks", tasks}};
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    try {
        r.dataset = j.at("dataset").get<std::string>();
        const auto v = j.at("variant").get<std::string>();
        if (v == "CML")
            r.variant = Variant::cml;
        else if (v == "HFL-global")
            r.variant = Variant::hfl_global;
        else
            throw SchemaError("metrics report: unknown variant '" + v + "'");
        for (const auto& t : j.at("tasks")) {
            TaskKey k{t.at("horizon").get<int>(), target_kind_from(t.at("target").get<std::string>())};
            r.cells[k] = {t.at("smape_fraction").get<double>(), t.at("maape_rad").get<double>(),
                          t.at("mae_bikes").get<double>(), t.at("rmse_bikes").get<double>(),
                          t.at("n_points").get<std::size_t>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("metrics report: ") + e.what());
    }
    return r;
}

std::string MetricsReport::table() const {
    std::set<int> horizons;
    for (const auto& [k, c] : cells) horizons.insert(k.horizon);
    std::ostringstream out;
    out << std::fixed << std::setprecision(3);
    out << "variant,metric";
    for (int h : horizons) out << ",h" << h;
    out << '\n';
    const std::pair<const char*, double MetricCell::*> metrics[] = {{"SMAPE (fraction)", &MetricCell::smape},
                                                                    {"MAAPE (rads)", &MetricCell::maape},
                                                                    {"MAE (bikes)", &MetricCell::mae},
                                                                    {"RMSE (bikes)", &MetricCell::rmse}};
    for (const auto& [label, field] : metrics) {
        out << bikefed::to_string(variant) << ',' << label;
        for (int h : horizons) {
            out << ',';
            auto a = cells.find({h, TargetKind::arrivals});
            auto d = cells.find({h, TargetKind::departures});
            if (a != cells.end()) out << a->second.*field;
            else out << "-";
            out << " / ";
            if (d != cells.end()) out << d->second.*field;
            else out << "-";
        }
        out << '\n';
    }
    return out.str();
}

MetricsReport evaluate(const std::map<TaskKey, Forecaster>& models, const TestSet& test, Variant variant,
                       const std::string& dataset) {
    std::vector<std::string> missing;
    for (const auto& [k, parts] : test)
        if (!models.count(k)) missing.push_back(k.name());
    if (!missing.empty()) {
        std::string msg = "evaluate: no model for task(s):";
        for (const auto& m : missing) msg += " " + m;
        throw DataError(msg);
    }
    MetricsReport report;
    report.dataset = dataset;
    report.variant = variant;
    for (const auto& [k, parts] : test) {
        Eigen::Index n = 0;
        for (const auto* p : parts) n += p->n_rows();
        if (n == 0) throw DataError("evaluate: task " + k.name() + " has no test rows");
        Vector actual(n), predicted(n);
        Eigen::Index at = 0;
        const auto& model = models.at(k);
        for (const auto* p : parts) {
            if (p->n_rows() == 0) continue;
            actual.segment(at, p->n_rows()) = p->targets;
            predicted.segment(at, p->n_rows()) = model(p->rows).cwiseMax(0.0);
            at += p->n_rows();
        }
        report.cells[k] = score(actual, predicted);
    }
    return report;
}

std::map<StationId, double> per_station_rmse(const Forecaster& model, const std::vector<const FeatureMatrix*>& test) {
    std::map<StationId, double> out;
    for (const auto* p : test) {
        if (p->n_rows() == 0) continue;
        out[p->station] = rmse(p->targets, model(p->rows).cwiseMax(0.0));
    }
    return out;
}

std::vector<StationId> representative_stations(const std::map<StationId, double>& rmse_by_station,
                                               const std::vector<int>& percentiles) {
    if (rmse_by_station.size() < 4) throw DataError("representative_stations: need at least 4 stations");
    std::vector<std::pair<double, StationId>> ranked;
    for (const auto& [s, r] : rmse_by_station) ranked.emplace_back(r, s);
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });  // map order breaks ties by id
    std::vector<StationId> out;
    const auto N = static_cast<long long>(ranked.size());
    for (int p : percentiles) {
        if (p != 25 && p != 50 && p != 75)
            throw ConfigError("representative_stations: percentile " + std::to_string(p) + " is not one of 25, 50, 75");
        const long long rank = (static_cast<long long>(p) * N + 99) / 100;  // ceil(p N / 100)
        out.push_back(ranked[static_cast<std::size_t>(std::max(1LL, rank) - 1)].second);
    }
    return out;
}

StationTrace station_trace(const FeatureMatrix& test, Timestamp t0, const Forecaster& cml, const Forecaster* hfl,
                           Eigen::Index hours) {
    Eigen::Index start = 0;
    while (start < test.n_rows() &&
           hour_of_day(t0 + Hours{test.origin_index[static_cast<std::size_t>(start)] + test.horizon}) != 0)
        ++start;
    if (start >= test.n_rows()) start = 0;
    const Eigen::Index len = std::min(hours, test.n_rows() - start);
    StationTrace tr;
    tr.station = test.station;
    const Matrix rows = test.rows.middleRows(start, len);
    tr.actual = test.targets.segment(start, len);
    tr.cml = cml(rows).cwiseMax(0.0);
    tr.hfl = hfl ? Vector((*hfl)(rows).cwiseMax(0.0)) : Vector();
    for (Eigen::Index i = 0; i < len; ++i)
        tr.hour_index.push_back(test.origin_index[static_cast<std::size_t>(start + i)] + test.horizon);
    return tr;
}

std::string trace_csv(const StationTrace& tr, Timestamp t0) {
    std::ostringstream out;
    out.precision(10);
    out << "station_id,hour_index,timestamp,actual,cml" << (tr.hfl.size() ? ",hfl" : "") << '\n';
    for (std::size_t i = 0; i < tr.hour_index.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out << tr.station << ',' << tr.hour_index[i] << ',' << format_timestamp(t0 + Hours{tr.hour_index[i]}) << ','
            << tr.actual[r] << ',' << tr.cml[r];
        if (tr.hfl.size()) out << ',' << tr.hfl[r];
        out << '\n';
    }
    return out.str();
}

std::map<TaskKey, GapCell> compare(const MetricsReport& cml, const MetricsReport& hfl) {
    std::map<TaskKey, GapCell> out;
    auto gap = [](double c, double h) -> std::optional<double> {
        if (c == 0.0) return std::nullopt;
        return (h - c) / c;
    };
    for (const auto& [k, c] : cml.cells) {
        const auto it = hfl.cells.find(k);
        if (it == hfl.cells.end()) throw ShapeError("compare: task " + k.name() + " missing from the HFL report");
        out[k] = {gap(c.mae, it->second.mae), gap(c.rmse, it->second.rmse)};
    }
    if (hfl.cells.size() != cml.cells.size()) throw ShapeError("compare: reports cover different tasks");
    return out;
}

std::string gap_table(const std::map<TaskKey, GapCell>& gaps) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "task,horizon,target,mae_gap_pct,rmse_gap_pct\n";
    auto cell = [&](const std::optional<double>& v) {
        if (v)
            out << *v * 100.0;
        else
            out << "n/a";
    };
    for (const auto& [k, g] : gaps) {
        out << k.name() << ',' << k.horizon << ',' << to_string(k.target) << ',';
        cell(g.mae);
        out << ',';
        cell(g.rmse);
        out << '\n';
    }
    return out.str();
}

}  // namespace bikefed
