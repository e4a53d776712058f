#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bikefed/common.hpp"

namespace bikefed {

struct GbtParams {
    int max_depth = 6;
    double lambda = 1.0;
    double gamma = 0.0;
    double min_child_weight = 1.0;
    double eta = 0.1;
    int n_trees = 37;
    /// Split search is parallel over features; the result does not depend on this.
    int n_threads = 1;

    void validate() const;
};

/// Internal nodes route x[feature] < threshold to `left`, otherwise `right`.
/// Leaves carry an unscaled Newton weight.
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double weight = 0.0;

    bool is_leaf() const { return feature < 0; }
    bool operator==(const TreeNode&) const = default;
};

struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    template <typename Row>
    double leaf_value(const Row& x) const {
        int at = 0;
        while (!nodes[static_cast<std::size_t>(at)].is_leaf()) {
            const auto& n = nodes[static_cast<std::size_t>(at)];
            at = x[n.feature] < n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(at)].weight;
    }

    static Tree zero_leaf() { return Tree{{TreeNode{}}}; }
    bool operator==(const Tree&) const = default;
};

/// prediction(x) = base_score + eta * sum_m tree_m(x)
struct Ensemble {
    double base_score = 0.0;
    double eta = 0.1;
    GbtParams params;
    std::vector<std::string> feature_names;
    std::vector<Tree> trees;

    Eigen::Index n_trees() const { return static_cast<Eigen::Index>(trees.size()); }
};

struct SplitCandidate {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

/// Regularized second-order gain of splitting (G, H) into (G_L, H_L) and the remainder.
inline double split_gain(double GL, double HL, double G, double H, double lambda, double gamma) {
    const double GR = G - GL;
    const double HR = H - HL;
    return 0.5 * (GL * GL / (HL + lambda) + GR * GR / (HR + lambda) - G * G / (H + lambda)) - gamma;
}

/// Whether `gain` beats `incumbent` by more than rounding noise. Near-equal
/// gains keep the incumbent, which realizes the (feature, threshold) tie-break
/// when candidates are visited in ascending order.
inline bool improves(double gain, double incumbent) {
    return gain > incumbent + 1e-10 * std::max(1.0, std::abs(incumbent));
}

/// Midpoint threshold that sends `lo` left and `hi` right under x < t.
inline double midpoint_threshold(double lo, double hi) {
    const double mid = lo + (hi - lo) / 2.0;
    return (mid > lo && mid <= hi) ? mid : hi;
}

inline double leaf_weight(double G_sum, double H_sum, double lambda) {
    return -G_sum / (H_sum + lambda) + 0.0;  // + 0.0 folds -0 into +0
}

/// Best split of the given rows over every feature and midpoint threshold, or
/// nothing when no candidate has positive gain under the child-weight limit.
std::optional<SplitCandidate> best_split(std::span<const Eigen::Index> indices, const Vector& G, const Vector& H,
                                         const Matrix& X, const GbtParams& params);

struct EarlyStop {
    Matrix X_val;
    Vector y_val;
    int patience = 5;
};

/// Squared-error boosting with exact greedy trees. With early stopping the
/// ensemble is truncated to the tree count with the lowest validation RMSE.
Ensemble fit_ensemble(const Matrix& X, const Vector& y, const GbtParams& params,
                      std::vector<std::string> feature_names = {}, const EarlyStop* early_stop = nullptr);

Vector predict(const Ensemble& ensemble, const Matrix& X);
/// Column m holds tree m's unscaled leaf value for each row.
Matrix tree_outputs(const Ensemble& ensemble, const Matrix& X);

inline constexpr int kModelSchemaVersion = 1;

nlohmann::json serialize(const Ensemble& ensemble);
Ensemble deserialize_ensemble(const nlohmann::json& doc);

nlohmann::json to_json(const GbtParams& p);
GbtParams gbt_params_from_json(const nlohmann::json& j);

}  // namespace bikefed
