#pragma once

#include <cmath>
#include <numbers>

#include "bikefed/common.hpp"

namespace bikefed {

namespace detail {

template <typename DA, typename DB>
void check_pair(const Eigen::MatrixBase<DA>& y, const Eigen::MatrixBase<DB>& yhat) {
    if (y.size() != yhat.size()) throw ShapeError("metric: actual and predicted lengths differ");
    if (y.size() == 0) throw ShapeError("metric: empty input");
}

}  // namespace detail

template <typename DA, typename DB>
double mae(const Eigen::MatrixBase<DA>& y, const Eigen::MatrixBase<DB>& yhat) {
    detail::check_pair(y, yhat);
    return static_cast<double>((y.derived() - yhat.derived()).cwiseAbs().mean());
}

template <typename DA, typename DB>
double rmse(const Eigen::MatrixBase<DA>& y, const Eigen::MatrixBase<DB>& yhat) {
    detail::check_pair(y, yhat);
    return std::sqrt(static_cast<double>((y.derived() - yhat.derived()).squaredNorm()) / static_cast<double>(y.size()));
}

/// Mean of 2|y - yhat| / (|y| + |yhat|), with 0/0 taken as 0. A fraction in [0, 2].
template <typename DA, typename DB>
double smape(const Eigen::MatrixBase<DA>& y, const Eigen::MatrixBase<DB>& yhat) {
    detail::check_pair(y, yhat);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double a = static_cast<double>(y(i));
        const double f = static_cast<double>(yhat(i));
        const double denom = std::abs(a) + std::abs(f);
        if (denom > 0.0) sum += 2.0 * std::abs(a - f) / denom;
    }
    return sum / static_cast<double>(y.size());
}

/// Mean arctangent absolute percentage error in radians. A zero actual scores
/// pi/2 unless the forecast is also zero.
template <typename DA, typename DB>
double maape(const Eigen::MatrixBase<DA>& y, const Eigen::MatrixBase<DB>& yhat) {
    detail::check_pair(y, yhat);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double a = static_cast<double>(y(i));
        const double err = std::abs(a - static_cast<double>(yhat(i)));
        if (err == 0.0) continue;
        sum += a == 0.0 ? std::numbers::pi / 2.0 : std::atan(err / std::abs(a));
    }
    return sum / static_cast<double>(y.size());
}

}  // namespace bikefed
