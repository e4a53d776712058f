#pragma once

// Exhaustive reference for small boosting problems: at every node each
// (feature, threshold) pair is scored from direct sums over the node's rows,
// with no presorting or shared scan state.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "bikefed/gbt.hpp"

namespace oracle {

struct Node {
    int feature = -1;
    double threshold = 0.0;
    double weight = 0.0;
    double gain = 0.0;
    std::unique_ptr<Node> left, right;
};

struct Params {
    int max_depth = 2;
    double lambda = 1.0;
    double gamma = 0.0;
    double min_child_weight = 1.0;
    double eta = 0.1;
    int n_trees = 3;
};

inline bool beats(double gain, double best) { return gain > best + 1e-10 * std::max(1.0, std::abs(best)); }

inline std::unique_ptr<Node> grow(const bikefed::Matrix& X, const std::vector<double>& g, const std::vector<int>& rows,
                                  int depth, const Params& p) {
    auto node = std::make_unique<Node>();
    double G = 0.0, H = 0.0;
    for (int i : rows) {
        G += g[static_cast<std::size_t>(i)];
        H += 1.0;
    }
    node->weight = -G / (H + p.lambda) + 0.0;
    if (depth >= p.max_depth) return node;

    double best = 0.0;
    int best_f = -1;
    double best_t = 0.0;
    for (int f = 0; f < X.cols(); ++f) {
        std::vector<double> values;
        for (int i : rows) values.push_back(X(i, f));
        std::sort(values.begin(), values.end());
        values.erase(std::unique(values.begin(), values.end()), values.end());
        for (std::size_t k = 0; k + 1 < values.size(); ++k) {
            double t = values[k] + (values[k + 1] - values[k]) / 2.0;
            if (!(t > values[k] && t <= values[k + 1])) t = values[k + 1];
            double GL = 0.0, HL = 0.0, GR = 0.0, HR = 0.0;
            for (int i : rows) {
                if (X(i, f) < t) {
                    GL += g[static_cast<std::size_t>(i)];
                    HL += 1.0;
                } else {
                    GR += g[static_cast<std::size_t>(i)];
                    HR += 1.0;
                }
            }
            if (HL < p.min_child_weight || HR < p.min_child_weight) continue;
            const double gain =
                0.5 * (GL * GL / (HL + p.lambda) + GR * GR / (HR + p.lambda) - G * G / (H + p.lambda)) - p.gamma;
            if (beats(gain, best)) {
                best = gain;
                best_f = f;
                best_t = t;
            }
        }
    }
    if (best_f < 0) return node;
    node->feature = best_f;
    node->threshold = best_t;
    node->gain = best;
    std::vector<int> l, r;
    for (int i : rows) (X(i, best_f) < best_t ? l : r).push_back(i);
    node->left = grow(X, g, l, depth + 1, p);
    node->right = grow(X, g, r, depth + 1, p);
    return node;
}

inline double eval(const Node& n, const bikefed::Matrix& X, int i) {
    if (n.feature < 0) return n.weight;
    return X(i, n.feature) < n.threshold ? eval(*n.left, X, i) : eval(*n.right, X, i);
}

struct Forest {
    double base = 0.0;
    std::vector<std::unique_ptr<Node>> trees;
};

inline Forest boost(const bikefed::Matrix& X, const bikefed::Vector& y, const Params& p) {
    Forest out;
    const int n = static_cast<int>(y.size());
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += y[i];
    out.base = sum / n;
    std::vector<double> pred(static_cast<std::size_t>(n), out.base), g(static_cast<std::size_t>(n));
    std::vector<int> all(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    for (int m = 0; m < p.n_trees; ++m) {
        for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(i)] - y[i];
        out.trees.push_back(grow(X, g, all, 0, p));
        for (int i = 0; i < n; ++i) pred[static_cast<std::size_t>(i)] += p.eta * eval(*out.trees.back(), X, i);
    }
    return out;
}

/// Empty string when the library tree matches the oracle node-for-node.
inline std::string compare(const Node& o, const bikefed::Tree& t, int id, double tol) {
    const auto& n = t.nodes[static_cast<std::size_t>(id)];
    if (o.feature != n.feature)
        return "feature " + std::to_string(n.feature) + " vs oracle " + std::to_string(o.feature);
    if (o.feature < 0)
        return std::abs(o.weight - n.weight) <= tol ? ""
                                                    : "leaf " + std::to_string(n.weight) + " vs " + std::to_string(o.weight);
    if (std::abs(o.threshold - n.threshold) > tol) return "threshold mismatch";
    auto l = compare(*o.left, t, n.left, tol);
    if (!l.empty()) return l;
    return compare(*o.right, t, n.right, tol);
}

}  // namespace oracle
