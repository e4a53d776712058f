#include "bikefed/gbt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bikefed {

void GbtParams::validate() const {
    if (max_depth < 1) throw ConfigError("gbt: max_depth must be >= 1");
    if (!(lambda >= 0.0)) throw ConfigError("gbt: lambda must be >= 0");
    if (!(gamma >= 0.0)) throw ConfigError("gbt: gamma must be >= 0");
    if (!(min_child_weight >= 0.0)) throw ConfigError("gbt: min_child_weight must be >= 0");
    if (!(eta > 0.0)) throw ConfigError("gbt: eta must be > 0");
    if (n_trees < 0) throw ConfigError("gbt: n_trees must be >= 0");
}

namespace {

using Order = std::vector<Eigen::Index>;

struct NodeStats {
    double G = 0.0;
    double H = 0.0;
};

struct ScanState {
    double GL = 0.0;
    double HL = 0.0;
    double last = 0.0;
    bool seen = false;
    std::optional<SplitCandidate> best;
};

// One pass over a feature's value-sorted rows, scoring every midpoint
// threshold for every active node at once. node_of[i] < 0 marks inactive rows.
void scan_feature(int feature, const Order& order, const std::vector<int>& node_of, const std::vector<NodeStats>& stats,
                  const Vector& G, const Vector& H, const Matrix& X, const GbtParams& p, std::vector<ScanState>& scan) {
    for (auto& s : scan) s = ScanState{};
    for (const Eigen::Index i : order) {
        const int nd = node_of[static_cast<std::size_t>(i)];
        if (nd < 0) continue;
        auto& s = scan[static_cast<std::size_t>(nd)];
        const double v = X(i, feature);
        if (s.seen && v != s.last) {
            const auto& tot = stats[static_cast<std::size_t>(nd)];
            const double HR = tot.H - s.HL;
            if (s.HL >= p.min_child_weight && HR >= p.min_child_weight) {
                const double gain = split_gain(s.GL, s.HL, tot.G, tot.H, p.lambda, p.gamma);
                if (improves(gain, s.best ? s.best->gain : 0.0))
                    s.best = SplitCandidate{feature, midpoint_threshold(s.last, v), gain};
            }
        }
        s.GL += G[i];
        s.HL += H[i];
        s.last = v;
        s.seen = true;
    }
}

// Reduces per-feature winners in ascending feature order.
std::vector<std::optional<SplitCandidate>> find_splits(const std::vector<Order>& orders, const std::vector<int>& node_of,
                                                       const std::vector<NodeStats>& stats, const Vector& G,
                                                       const Vector& H, const Matrix& X, const GbtParams& p) {
    const auto n_features = static_cast<std::size_t>(X.cols());
    std::vector<std::vector<ScanState>> per_feature(n_features, std::vector<ScanState>(stats.size()));
    parallel_for(n_features, p.n_threads, [&](std::size_t f) {
        scan_feature(static_cast<int>(f), orders[f], node_of, stats, G, H, X, p, per_feature[f]);
    });
    std::vector<std::optional<SplitCandidate>> best(stats.size());
    for (std::size_t f = 0; f < n_features; ++f) {
        for (std::size_t nd = 0; nd < stats.size(); ++nd) {
            const auto& cand = per_feature[f][nd].best;
            if (cand && improves(cand->gain, best[nd] ? best[nd]->gain : 0.0)) best[nd] = cand;
        }
    }
    return best;
}

std::vector<Order> sorted_orders(const Matrix& X, std::span<const Eigen::Index> rows) {
    std::vector<Order> orders(static_cast<std::size_t>(X.cols()));
    for (Eigen::Index f = 0; f < X.cols(); ++f) {
        Order o(rows.begin(), rows.end());
        std::stable_sort(o.begin(), o.end(), [&](Eigen::Index a, Eigen::Index b) { return X(a, f) < X(b, f); });
        orders[static_cast<std::size_t>(f)] = std::move(o);
    }
    return orders;
}

void preorder(const Tree& in, int id, Tree& out) {
    const auto& n = in.nodes[static_cast<std::size_t>(id)];
    const auto at = out.nodes.size();
    out.nodes.push_back(n);
    if (n.is_leaf()) return;
    out.nodes[at].left = static_cast<int>(out.nodes.size());
    preorder(in, n.left, out);
    out.nodes[at].right = static_cast<int>(out.nodes.size());
    preorder(in, n.right, out);
}

// Grows one tree level by level. Writes each row's unscaled leaf value to `leaf_out`.
Tree grow_tree(const std::vector<Order>& orders, const Vector& G, const Vector& H, const Matrix& X, const GbtParams& p,
               Vector& leaf_out) {
    const auto n = static_cast<std::size_t>(X.rows());
    Tree tree;
    tree.nodes.push_back(TreeNode{});

    // Level-local node slots map to tree node ids.
    std::vector<int> node_of(n, 0);
    std::vector<int> slot_to_node{0};

    for (int depth = 0;; ++depth) {
        std::vector<NodeStats> stats(slot_to_node.size());
        for (std::size_t i = 0; i < n; ++i) {
            const int s = node_of[i];
            if (s < 0) continue;
            stats[static_cast<std::size_t>(s)].G += G[static_cast<Eigen::Index>(i)];
            stats[static_cast<std::size_t>(s)].H += H[static_cast<Eigen::Index>(i)];
        }

        std::vector<std::optional<SplitCandidate>> splits(slot_to_node.size());
        if (depth < p.max_depth) splits = find_splits(orders, node_of, stats, G, H, X, p);

        std::vector<int> next_slot_to_node;
        std::vector<std::array<int, 2>> child_slots(slot_to_node.size(), {-1, -1});
        for (std::size_t s = 0; s < slot_to_node.size(); ++s) {
            const int id = slot_to_node[s];
            if (splits[s]) {
                const int left = static_cast<int>(tree.nodes.size());
                tree.nodes.push_back(TreeNode{});
                tree.nodes.push_back(TreeNode{});
                auto& node = tree.nodes[static_cast<std::size_t>(id)];
                node.feature = splits[s]->feature;
                node.threshold = splits[s]->threshold;
                node.left = left;
                node.right = left + 1;
                child_slots[s] = {static_cast<int>(next_slot_to_node.size()),
                                  static_cast<int>(next_slot_to_node.size()) + 1};
                next_slot_to_node.push_back(left);
                next_slot_to_node.push_back(left + 1);
            } else {
                tree.nodes[static_cast<std::size_t>(id)].weight = leaf_weight(stats[s].G, stats[s].H, p.lambda);
            }
        }

        for (std::size_t i = 0; i < n; ++i) {
            const int s = node_of[i];
            if (s < 0) continue;
            const auto& split = splits[static_cast<std::size_t>(s)];
            if (split) {
                const bool go_left = X(static_cast<Eigen::Index>(i), split->feature) < split->threshold;
                node_of[i] = child_slots[static_cast<std::size_t>(s)][go_left ? 0 : 1];
            } else {
                leaf_out[static_cast<Eigen::Index>(i)] =
                    tree.nodes[static_cast<std::size_t>(slot_to_node[static_cast<std::size_t>(s)])].weight;
                node_of[i] = -1;
            }
        }
        if (next_slot_to_node.empty()) break;
        slot_to_node = std::move(next_slot_to_node);
    }
    // Depth-first numbering, matching the nested JSON layout.
    Tree ordered;
    ordered.nodes.reserve(tree.nodes.size());
    preorder(tree, 0, ordered);
    return ordered;
}

double rmse_of(const Vector& pred, const Vector& y) { return std::sqrt((pred - y).squaredNorm() / static_cast<double>(y.size())); }

}  // namespace

std::optional<SplitCandidate> best_split(std::span<const Eigen::Index> indices, const Vector& G, const Vector& H,
                                         const Matrix& X, const GbtParams& params) {
    if (indices.size() < 2) return std::nullopt;
    std::vector<int> node_of(static_cast<std::size_t>(X.rows()), -1);
    std::vector<Eigen::Index> rows(indices.begin(), indices.end());
    std::sort(rows.begin(), rows.end());
    std::vector<NodeStats> stats(1);
    for (const auto i : rows) {
        node_of[static_cast<std::size_t>(i)] = 0;
        stats[0].G += G[i];
        stats[0].H += H[i];
    }
    return find_splits(sorted_orders(X, rows), node_of, stats, G, H, X, params)[0];
}

Ensemble fit_ensemble(const Matrix& X, const Vector& y, const GbtParams& params, std::vector<std::string> feature_names,
                      const EarlyStop* early_stop) {
    params.validate();
    if (X.rows() == 0 || y.size() == 0) throw DataError("fit_ensemble: zero training rows");
    if (X.rows() != y.size()) throw ShapeError("fit_ensemble: X has " + std::to_string(X.rows()) + " rows but y has " +
                                               std::to_string(y.size()));
    if (!X.allFinite() || !y.allFinite()) throw DataError("fit_ensemble: non-finite values in X or y");
    if (feature_names.empty())
        for (Eigen::Index f = 0; f < X.cols(); ++f) feature_names.push_back("f" + std::to_string(f));
    if (static_cast<Eigen::Index>(feature_names.size()) != X.cols())
        throw ShapeError("fit_ensemble: feature name count does not match X");
    if (early_stop) {
        if (early_stop->X_val.cols() != X.cols() || early_stop->X_val.rows() != early_stop->y_val.size())
            throw ShapeError("fit_ensemble: validation set shape mismatch");
        if (early_stop->y_val.size() == 0) early_stop = nullptr;
    }

    Ensemble ens;
    ens.base_score = y.mean();
    ens.eta = params.eta;
    ens.params = params;
    ens.feature_names = std::move(feature_names);

    std::vector<Eigen::Index> all(static_cast<std::size_t>(X.rows()));
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    const auto orders = sorted_orders(X, all);

    Vector pred = Vector::Constant(X.rows(), ens.base_score);
    const Vector H = Vector::Ones(X.rows());
    Vector leaf(X.rows());

    Vector val_pred;
    double best_rmse = 0.0;
    std::size_t best_count = 0;
    int stale = 0;
    if (early_stop) {
        val_pred = Vector::Constant(early_stop->y_val.size(), ens.base_score);
        best_rmse = rmse_of(val_pred, early_stop->y_val);
    }

    for (int m = 0; m < params.n_trees; ++m) {
        const Vector G = pred - y;
        ens.trees.push_back(grow_tree(orders, G, H, X, params, leaf));
        pred += params.eta * leaf;
        if (early_stop) {
            const auto& tree = ens.trees.back();
            for (Eigen::Index i = 0; i < val_pred.size(); ++i)
                val_pred[i] += params.eta * tree.leaf_value(early_stop->X_val.row(i));
            const double r = rmse_of(val_pred, early_stop->y_val);
            if (r < best_rmse) {
                best_rmse = r;
                best_count = ens.trees.size();
                stale = 0;
            } else if (++stale >= early_stop->patience) {
                break;
            }
        }
    }
    if (early_stop) ens.trees.resize(best_count);
    return ens;
}

Matrix tree_outputs(const Ensemble& ens, const Matrix& X) {
    if (X.cols() != static_cast<Eigen::Index>(ens.feature_names.size()))
        throw ShapeError("predict: X has " + std::to_string(X.cols()) + " columns, model expects " +
                         std::to_string(ens.feature_names.size()));
    Matrix out(X.rows(), ens.n_trees());
    for (Eigen::Index m = 0; m < ens.n_trees(); ++m) {
        const auto& tree = ens.trees[static_cast<std::size_t>(m)];
        for (Eigen::Index i = 0; i < X.rows(); ++i) out(i, m) = tree.leaf_value(X.row(i));
    }
    return out;
}

Vector predict(const Ensemble& ens, const Matrix& X) {
    const Matrix t = tree_outputs(ens, X);
    return (Vector::Constant(X.rows(), ens.base_score).array() + ens.eta * t.rowwise().sum().array()).matrix();
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

nlohmann::json to_json(const GbtParams& p) {
    return {{"max_depth", p.max_depth},   {"lambda", p.lambda}, {"gamma", p.gamma},
            {"min_child_weight", p.min_child_weight}, {"eta", p.eta}, {"n_trees", p.n_trees}};
}

GbtParams gbt_params_from_json(const nlohmann::json& j) {
    GbtParams p;
    if (j.is_null()) return p;
    try {
        p.max_depth = j.value("max_depth", p.max_depth);
        p.lambda = j.value("lambda", p.lambda);
        p.gamma = j.value("gamma", p.gamma);
        p.min_child_weight = j.value("min_child_weight", p.min_child_weight);
        p.eta = j.value("eta", p.eta);
        p.n_trees = j.value("n_trees", p.n_trees);
        p.n_threads = j.value("n_threads", p.n_threads);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid gbt params: ") + e.what());
    }
    p.validate();
    return p;
}

namespace {

nlohmann::json node_json(const Tree& tree, int id) {
    const auto& n = tree.nodes[static_cast<std::size_t>(id)];
    if (n.is_leaf()) return {{"w", n.weight}};
    return {{"f", n.feature}, {"t", n.threshold}, {"l", node_json(tree, n.left)}, {"r", node_json(tree, n.right)}};
}

double finite_number(const nlohmann::json& v, const char* what) {
    if (!v.is_number()) throw SchemaError(std::string("model document: '") + what + "' is not a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw SchemaError(std::string("model document: '") + what + "' is not finite");
    return d;
}

int read_node(const nlohmann::json& j, Tree& tree, int n_features, int depth) {
    if (!j.is_object()) throw SchemaError("model document: tree node is not an object");
    if (depth > 64) throw SchemaError("model document: tree too deep");
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(TreeNode{});
    if (j.contains("w")) {
        if (j.size() != 1) throw SchemaError("model document: leaf has extra fields");
        tree.nodes[static_cast<std::size_t>(id)].weight = finite_number(j["w"], "w");
        return id;
    }
    if (!j.contains("f") || !j.contains("t") || !j.contains("l") || !j.contains("r") || j.size() != 4)
        throw SchemaError("model document: internal node needs exactly f, t, l, r");
    if (!j["f"].is_number_integer()) throw SchemaError("model document: 'f' is not an integer");
    const int f = j["f"].get<int>();
    if (f < 0 || f >= n_features) throw SchemaError("model document: feature index out of range");
    const double t = finite_number(j["t"], "t");
    const int l = read_node(j["l"], tree, n_features, depth + 1);
    const int r = read_node(j["r"], tree, n_features, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = f;
    node.threshold = t;
    node.left = l;
    node.right = r;
    return id;
}

}  // namespace

nlohmann::json serialize(const Ensemble& ens) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : ens.trees) trees.push_back(node_json(t, 0));
    return {{"version", kModelSchemaVersion},
            {"base_score", ens.base_score},
            {"eta", ens.eta},
            {"params", to_json(ens.params)},
            {"feature_names", ens.feature_names},
            {"trees", std::move(trees)}};
}

Ensemble deserialize_ensemble(const nlohmann::json& doc) {
    if (!doc.is_object()) throw SchemaError("model document is not an object");
    if (!doc.contains("version")) throw SchemaError("model document has no version field");
    if (doc["version"] != kModelSchemaVersion)
        throw SchemaError("model document version " + doc["version"].dump() + " is not supported");
    for (const char* key : {"base_score", "eta", "params", "feature_names", "trees"})
        if (!doc.contains(key)) throw SchemaError(std::string("model document lacks '") + key + "'");
    Ensemble ens;
    ens.base_score = finite_number(doc["base_score"], "base_score");
    ens.eta = finite_number(doc["eta"], "eta");
    try {
        ens.params = gbt_params_from_json(doc["params"]);
        ens.feature_names = doc["feature_names"].get<std::vector<std::string>>();
    } catch (const ConfigError& e) {
        throw SchemaError(e.what());
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("model document: ") + e.what());
    }
    if (!doc["trees"].is_array()) throw SchemaError("model document: 'trees' is not an array");
    for (const auto& t : doc["trees"]) {
        Tree tree;
        read_node(t, tree, static_cast<int>(ens.feature_names.size()), 0);
        ens.trees.push_back(std::move(tree));
    }
    return ens;
}

}  // namespace bikefed
