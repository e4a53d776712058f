#include "bikefed/featurize.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace bikefed {

CalendarFlags calendar_flags(Timestamp t, const CalendarSpec& spec) {
    CalendarFlags f;
    const int dow = day_of_week(t);
    const int hour = hour_of_day(t);
    const auto day = days_since_epoch(t);
    f.is_weekend = dow >= 5 ? 1 : 0;
    f.is_workhour = (dow < 5 && hour >= spec.workhour_start && hour < spec.workhour_end) ? 1 : 0;
    f.is_holiday = spec.holidays.count(day) ? 1 : 0;
    f.is_school = spec.school_days.count(day) ? 1 : 0;
    return f;
}

std::set<std::int64_t> read_date_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open date file: " + path.string());
    std::set<std::int64_t> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto last = line.find_last_not_of(" \t");
        std::int64_t d = 0;
        if (!parse_date(std::string_view(line).substr(first, last - first + 1), d))
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": not an ISO date");
        out.insert(d);
    }
    return out;
}

const char* to_string(TargetKind k) { return k == TargetKind::arrivals ? "arrivals" : "departures"; }

TargetKind target_kind_from(const std::string& s) {
    if (s == "arrivals") return TargetKind::arrivals;
    if (s == "departures") return TargetKind::departures;
    throw ConfigError("unknown target kind '" + s + "'");
}

void FeatureSpec::validate() const {
    if (rbf_hour_k < 1 || rbf_dow_k < 1) throw ConfigError("RBF center counts must be >= 1");
    if (!(rbf_hour_sigma > 0) || !(rbf_dow_sigma > 0)) throw ConfigError("RBF bandwidths must be > 0");
    for (int l : lags)
        if (l < 1 || l > kLookBack) throw ConfigError("lags must lie in [1, 168]");
    for (int w : rolling_windows)
        if (w < 1 || w > kLookBack) throw ConfigError("rolling windows must lie in [1, 168]");
    for (double h : ewm_halflives)
        if (!(h > 0)) throw ConfigError("EWM halflives must be > 0");
    if (fourier_harmonics < 1) throw ConfigError("Fourier harmonics must be >= 1");
    for (double p : fourier_periods)
        if (!(p > 2.0 * fourier_harmonics)) throw ConfigError("Fourier period must exceed 2 * harmonics");
    if (!fourier_periods.empty() && burnin_len < 2 * (2 * fourier_harmonics + 1))
        throw ConfigError("Fourier burn-in too short for the requested harmonics");
    if (calendar.workhour_start < 0 || calendar.workhour_end > 24 || calendar.workhour_start >= calendar.workhour_end)
        throw ConfigError("work hours must satisfy 0 <= start < end <= 24");
}

std::vector<std::string> FeatureSpec::feature_names() const {
    std::vector<std::string> n;
    for (int j = 0; j < rbf_hour_k; ++j) n.push_back("rbf_hour_" + std::to_string(j));
    for (int j = 0; j < rbf_dow_k; ++j) n.push_back("rbf_dow_" + std::to_string(j));
    n.insert(n.end(), {"is_holiday", "is_workhour", "is_school", "is_weekend"});
    for (int l : lags) n.push_back("lag_arrivals_" + std::to_string(l));
    for (int l : lags) n.push_back("lag_departures_" + std::to_string(l));
    for (int w : rolling_windows) {
        n.push_back("roll_mean_" + std::to_string(w));
        n.push_back("roll_min_" + std::to_string(w));
        n.push_back("roll_max_" + std::to_string(w));
    }
    auto num = [](double v) {
        std::ostringstream s;
        s << v;
        return s.str();
    };
    for (double h : ewm_halflives) n.push_back("ewm_" + num(h));
    for (double p : fourier_periods) n.push_back("fourier_" + num(p));
    return n;
}

Eigen::Index FeatureSpec::feature_count() const {
    return rbf_hour_k + rbf_dow_k + 4 + 2 * static_cast<Eigen::Index>(lags.size()) +
           3 * static_cast<Eigen::Index>(rolling_windows.size()) + static_cast<Eigen::Index>(ewm_halflives.size()) +
           static_cast<Eigen::Index>(fourier_periods.size());
}

Eigen::Index FeatureSpec::first_origin() const {
    Eigen::Index first = 0;
    for (int l : lags) first = std::max<Eigen::Index>(first, l);
    for (int w : rolling_windows) first = std::max<Eigen::Index>(first, w - 1);
    return first;
}

nlohmann::json to_json(const FeatureSpec& s) {
    return {{"rbf_hour", {{"K", s.rbf_hour_k}, {"sigma", s.rbf_hour_sigma}}},
            {"rbf_dow", {{"K", s.rbf_dow_k}, {"sigma", s.rbf_dow_sigma}}},
            {"lags", s.lags},
            {"rolling_windows", s.rolling_windows},
            {"ewm_halflives", s.ewm_halflives},
            {"fourier",
             {{"periods", s.fourier_periods}, {"harmonics_per_period", s.fourier_harmonics}, {"burnin_len", s.burnin_len}}},
            {"workhours", {s.calendar.workhour_start, s.calendar.workhour_end}}};
}

FeatureSpec feature_spec_from_json(const nlohmann::json& j) {
    FeatureSpec s;
    if (j.is_null()) return s;
    try {
        if (j.contains("rbf_hour")) {
            s.rbf_hour_k = j["rbf_hour"].value("K", s.rbf_hour_k);
            s.rbf_hour_sigma = j["rbf_hour"].value("sigma", s.rbf_hour_sigma);
        }
        if (j.contains("rbf_dow")) {
            s.rbf_dow_k = j["rbf_dow"].value("K", s.rbf_dow_k);
            s.rbf_dow_sigma = j["rbf_dow"].value("sigma", s.rbf_dow_sigma);
        }
        if (j.contains("lags")) s.lags = j["lags"].get<std::vector<int>>();
        if (j.contains("rolling_windows")) s.rolling_windows = j["rolling_windows"].get<std::vector<int>>();
        if (j.contains("ewm_halflives")) s.ewm_halflives = j["ewm_halflives"].get<std::vector<double>>();
        if (j.contains("fourier")) {
            const auto& f = j["fourier"];
            if (f.contains("periods")) s.fourier_periods = f["periods"].get<std::vector<double>>();
            s.fourier_harmonics = f.value("harmonics_per_period", s.fourier_harmonics);
            s.burnin_len = f.value("burnin_len", s.burnin_len);
        }
        if (j.contains("workhours")) {
            const auto wh = j["workhours"].get<std::vector<int>>();
            if (wh.size() != 2) throw ConfigError("workhours must be [start, end]");
            s.calendar.workhour_start = wh[0];
            s.calendar.workhour_end = wh[1];
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid feature spec: ") + e.what());
    }
    s.validate();
    return s;
}

SplitMatrices assemble_matrix(const DemandSeries& series, TargetKind target, int horizon, const FeatureSpec& spec,
                              const TemporalSplit& split) {
    if (horizon < 1 || horizon > 6) throw ConfigError("horizon must lie in [1, 6]");
    spec.validate();
    const Eigen::Index L = series.size();
    if (split.length != L) throw DataError("temporal split length does not match series length");
    if (!spec.fourier_periods.empty() && spec.burnin_len > split.train_end)
        throw DataError("Fourier burn-in (" + std::to_string(spec.burnin_len) + " h) exceeds the training span (" +
                        std::to_string(split.train_end) + " h)");
    const Eigen::Index first = spec.first_origin();
    const Eigen::Index last = L - 1 - horizon;
    if (last < first) throw DataError("series too short for the feature look-back and horizon");

    const Vector arr = series.arrivals.cast<double>();
    const Vector dep = series.departures.cast<double>();
    const Vector& y = target == TargetKind::arrivals ? arr : dep;

    std::vector<FourierCoeffs> seasonal;
    for (double period : spec.fourier_periods)
        seasonal.push_back(fourier_fit(y.head(spec.burnin_len), period, spec.fourier_harmonics, 0));

    std::vector<Vector> ewm;
    for (double h : spec.ewm_halflives) {
        const double alpha = ewm_alpha(h);
        Vector m(L);
        m[0] = y[0];
        for (Eigen::Index i = 1; i < L; ++i) m[i] = alpha * y[i] + (1.0 - alpha) * m[i - 1];
        ewm.push_back(std::move(m));
    }

    const auto names = spec.feature_names();
    const Eigen::Index F = spec.feature_count();

    SplitMatrices out;
    FeatureMatrix* parts[3] = {&out.train, &out.valid, &out.test};
    std::vector<Eigen::Index> origins[3];
    for (Eigen::Index t = first; t <= last; ++t) {
        const Eigen::Index target_hour = t + horizon;
        const int p = target_hour < split.train_end ? 0 : (target_hour < split.valid_end ? 1 : 2);
        origins[p].push_back(t);
    }

    for (int p = 0; p < 3; ++p) {
        FeatureMatrix& m = *parts[p];
        m.station = series.station;
        m.target_kind = target;
        m.horizon = horizon;
        m.feature_names = names;
        m.origin_index = origins[p];
        const auto n = static_cast<Eigen::Index>(origins[p].size());
        m.rows.resize(n, F);
        m.targets.resize(n);
        for (Eigen::Index r = 0; r < n; ++r) {
            const Eigen::Index t = origins[p][static_cast<std::size_t>(r)];
            const Timestamp when = series.time_at(t);
            Eigen::Index c = 0;
            m.rows.row(r).segment(c, spec.rbf_hour_k) =
                rbf_encode<double>(hour_of_day(when), 24.0, spec.rbf_hour_k, spec.rbf_hour_sigma).transpose();
            c += spec.rbf_hour_k;
            m.rows.row(r).segment(c, spec.rbf_dow_k) =
                rbf_encode<double>(day_of_week(when), 7.0, spec.rbf_dow_k, spec.rbf_dow_sigma).transpose();
            c += spec.rbf_dow_k;
            const auto flags = calendar_flags(when, spec.calendar);
            m.rows(r, c++) = flags.is_holiday;
            m.rows(r, c++) = flags.is_workhour;
            m.rows(r, c++) = flags.is_school;
            m.rows(r, c++) = flags.is_weekend;
            for (int l : spec.lags) m.rows(r, c++) = arr[t - l];
            for (int l : spec.lags) m.rows(r, c++) = dep[t - l];
            for (int w : spec.rolling_windows) {
                const auto s = rolling_stats(y, t, w);
                m.rows(r, c++) = s.mean;
                m.rows(r, c++) = s.min;
                m.rows(r, c++) = s.max;
            }
            for (const auto& e : ewm) m.rows(r, c++) = e[t];
            for (const auto& coeffs : seasonal) m.rows(r, c++) = fourier_eval(coeffs, static_cast<double>(t));
            m.targets[r] = y[t + horizon];
        }
    }
    return out;
}

Dataset stack(const std::vector<const FeatureMatrix*>& parts) {
    Dataset d;
    Eigen::Index n = 0;
    Eigen::Index F = -1;
    for (const auto* p : parts) {
        if (F < 0) F = p->rows.cols();
        if (p->rows.cols() != F) throw ShapeError("stack: feature count mismatch");
        if (p->feature_names != parts.front()->feature_names) throw ShapeError("stack: feature names differ");
        n += p->n_rows();
    }
    d.X.resize(n, std::max<Eigen::Index>(F, 0));
    d.y.resize(n);
    Eigen::Index at = 0;
    for (const auto* p : parts) {
        d.X.middleRows(at, p->n_rows()) = p->rows;
        d.y.segment(at, p->n_rows()) = p->targets;
        at += p->n_rows();
    }
    return d;
}

std::string feature_matrix_csv(const FeatureMatrix& m) {
    std::ostringstream out;
    out.precision(17);
    for (const auto& n : m.feature_names) out << n << ',';
    out << "target\n";
    for (Eigen::Index r = 0; r < m.n_rows(); ++r) {
        for (Eigen::Index c = 0; c < m.rows.cols(); ++c) out << m.rows(r, c) << ',';
        out << m.targets[r] << '\n';
    }
    return out.str();
}

}  // namespace bikefed
