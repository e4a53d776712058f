#pragma once

#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bikefed/common.hpp"
#include "bikefed/ingest.hpp"

namespace bikefed {

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

/// Gaussian bumps on a circle of length `period`, centers at j * period / K.
/// Component j is exp(-d^2 / (2 sigma^2)) with d the circular distance.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rbf_encode(Scalar value, Scalar period, int K, Scalar sigma) {
    if (!(sigma > Scalar(0))) throw ConfigError("rbf_encode: sigma must be > 0");
    if (!(period > Scalar(0))) throw ConfigError("rbf_encode: period must be > 0");
    if (K < 1) throw ConfigError("rbf_encode: K must be >= 1");
    using std::abs, std::exp, std::fmod, std::min;
    Scalar v = fmod(value, period);
    if (v < Scalar(0)) v += period;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(K);
    for (int j = 0; j < K; ++j) {
        const Scalar center = Scalar(j) * period / Scalar(K);
        const Scalar diff = abs(v - center);
        const Scalar d = min(diff, period - diff);
        out[j] = exp(-d * d / (Scalar(2) * sigma * sigma));
    }
    return out;
}

/// mean + sum_k a_k cos(2 pi k t / T) + b_k sin(2 pi k t / T).
template <typename Scalar>
struct FourierCoeffsT {
    Scalar period{};
    Scalar mean{};
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> a;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> b;

    int harmonics() const { return static_cast<int>(a.size()); }
};
using FourierCoeffs = FourierCoeffsT<double>;

/// Design row [1, cos(w t), sin(w t), cos(2 w t), ...].
template <typename Scalar>
Eigen::Matrix<Scalar, 1, Eigen::Dynamic> fourier_basis_row(Scalar t, Scalar period, int K) {
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> row(1 + 2 * K);
    row[0] = Scalar(1);
    for (int k = 1; k <= K; ++k) {
        const Scalar angle = Scalar(2 * M_PI) * Scalar(k) * t / period;
        row[2 * k - 1] = std::cos(angle);
        row[2 * k] = std::sin(angle);
    }
    return row;
}

/// Least-squares harmonic fit over values observed at hours t_first, t_first+1, ...
template <typename Derived>
FourierCoeffsT<typename Derived::Scalar> fourier_fit(const Eigen::MatrixBase<Derived>& values,
                                                     typename Derived::Scalar period, int K,
                                                     Eigen::Index t_first = 0) {
    using Scalar = typename Derived::Scalar;
    if (K < 1) throw ConfigError("fourier_fit: harmonics must be >= 1");
    if (!(period > Scalar(2 * K))) throw ConfigError("fourier_fit: period must exceed 2 * harmonics");
    const Eigen::Index n = values.size();
    const int p = 1 + 2 * K;
    if (n < 2 * p) throw DataError("fourier_fit: burn-in of " + std::to_string(n) + " hours is too short for " +
                                   std::to_string(K) + " harmonics");
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> design(n, p);
    for (Eigen::Index i = 0; i < n; ++i) design.row(i) = fourier_basis_row<Scalar>(Scalar(t_first + i), period, K);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> beta = design.colPivHouseholderQr().solve(values.derived());
    FourierCoeffsT<Scalar> c;
    c.period = period;
    c.mean = beta[0];
    c.a.resize(K);
    c.b.resize(K);
    for (int k = 1; k <= K; ++k) {
        c.a[k - 1] = beta[2 * k - 1];
        c.b[k - 1] = beta[2 * k];
    }
    return c;
}

template <typename Scalar>
Scalar fourier_eval(const FourierCoeffsT<Scalar>& c, Scalar t) {
    Scalar v = c.mean;
    for (int k = 1; k <= c.harmonics(); ++k) {
        const Scalar angle = Scalar(2 * M_PI) * Scalar(k) * t / c.period;
        v += c.a[k - 1] * std::cos(angle) + c.b[k - 1] * std::sin(angle);
    }
    return v;
}

/// series[t - lag] for each lag.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> build_lags(const Eigen::MatrixBase<Derived>& series,
                                                                      Eigen::Index t, const std::vector<int>& lags) {
    Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> out(static_cast<Eigen::Index>(lags.size()));
    for (std::size_t i = 0; i < lags.size(); ++i) {
        const Eigen::Index at = t - lags[i];
        if (at < 0 || t >= series.size()) throw DataError("build_lags: insufficient history");
        out[static_cast<Eigen::Index>(i)] = series[at];
    }
    return out;
}

template <typename Scalar>
struct RollingStats {
    Scalar mean;
    Scalar min;
    Scalar max;
};

/// Statistics over [t - window + 1, t].
template <typename Derived>
RollingStats<typename Derived::Scalar> rolling_stats(const Eigen::MatrixBase<Derived>& series, Eigen::Index t,
                                                     int window) {
    if (window < 1) throw ConfigError("rolling_stats: window must be >= 1");
    if (t - window + 1 < 0 || t >= series.size()) throw DataError("rolling_stats: window leaves the series");
    const auto seg = series.derived().segment(t - window + 1, window);
    return {seg.mean(), seg.minCoeff(), seg.maxCoeff()};
}

inline double ewm_alpha(double halflife) { return 1.0 - std::pow(2.0, -1.0 / halflife); }

/// Recursive EWM m_i = alpha x_i + (1 - alpha) m_{i-1}, m_0 = x_0, evaluated at t.
template <typename Derived>
typename Derived::Scalar ewm_stats(const Eigen::MatrixBase<Derived>& series, Eigen::Index t, double halflife) {
    if (!(halflife > 0.0)) throw ConfigError("ewm_stats: halflife must be > 0");
    if (t < 0 || t >= series.size()) throw DataError("ewm_stats: origin outside the series");
    using Scalar = typename Derived::Scalar;
    const Scalar alpha = Scalar(ewm_alpha(halflife));
    Scalar m = series[0];
    for (Eigen::Index i = 1; i <= t; ++i) m = alpha * series[i] + (Scalar(1) - alpha) * m;
    return m;
}

// ---------------------------------------------------------------------------
// Calendar
// ---------------------------------------------------------------------------

struct CalendarSpec {
    std::set<std::int64_t> holidays;  // days since epoch
    int workhour_start = 9;
    int workhour_end = 17;
    std::set<std::int64_t> school_days;
};

struct CalendarFlags {
    int is_holiday = 0;
    int is_workhour = 0;
    int is_school = 0;
    int is_weekend = 0;

    bool operator==(const CalendarFlags&) const = default;
};

CalendarFlags calendar_flags(Timestamp t, const CalendarSpec& spec);

/// One ISO date per line; blank lines and '#' comments ignored.
std::set<std::int64_t> read_date_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Feature matrices
// ---------------------------------------------------------------------------

enum class TargetKind { arrivals, departures };
const char* to_string(TargetKind k);
TargetKind target_kind_from(const std::string& s);

struct FeatureSpec {
    int rbf_hour_k = 12;
    double rbf_hour_sigma = 2.0;
    int rbf_dow_k = 7;
    double rbf_dow_sigma = 1.0;
    std::vector<int> lags{1, 2, 3, 6, 12, 24, 168};
    std::vector<int> rolling_windows{3, 6, 12, 24, 168};
    std::vector<double> ewm_halflives{3, 12, 24};
    std::vector<double> fourier_periods{24, 168};
    int fourier_harmonics = 3;
    int burnin_len = 672;
    CalendarSpec calendar;

    static constexpr int kLookBack = 168;

    void validate() const;
    std::vector<std::string> feature_names() const;
    Eigen::Index feature_count() const;
    /// First origin hour whose lag and rolling windows stay inside the series.
    Eigen::Index first_origin() const;
};

nlohmann::json to_json(const FeatureSpec& spec);
/// Calendar date sets are not part of the JSON block; they come from files.
FeatureSpec feature_spec_from_json(const nlohmann::json& j);

struct FeatureMatrix {
    StationId station;
    TargetKind target_kind = TargetKind::arrivals;
    int horizon = 1;
    std::vector<std::string> feature_names;
    Matrix rows;
    Vector targets;
    std::vector<Eigen::Index> origin_index;

    Eigen::Index n_rows() const { return rows.rows(); }
};

struct SplitMatrices {
    FeatureMatrix train;
    FeatureMatrix valid;
    FeatureMatrix test;
};

/// Builds one row per origin hour t with t >= spec.first_origin() and
/// t + horizon < length. A row belongs to the split part containing its target
/// hour t + horizon. Deterministic features (RBF, calendar, Fourier) are taken
/// at the origin hour; Fourier coefficients come from the first burnin_len
/// hours of the training part of the target series.
SplitMatrices assemble_matrix(const DemandSeries& series, TargetKind target, int horizon, const FeatureSpec& spec,
                              const TemporalSplit& split);

/// Row-concatenation of several matrices sharing feature names.
struct Dataset {
    Matrix X;
    Vector y;

    Eigen::Index size() const { return y.size(); }
};
Dataset stack(const std::vector<const FeatureMatrix*>& parts);

std::string feature_matrix_csv(const FeatureMatrix& m);

}  // namespace bikefed
