#include <doctest.h>

#include <cmath>
#include <limits>

#include "bikefed/gbt.hpp"
#include "gbt_oracle.hpp"

using namespace bikefed;

namespace {

struct Problem {
    Matrix X;
    Vector y;
};

// Coarse integer grids make repeated values and tied gains common.
Problem random_problem(Rng& rng, int rows, int features, bool coarse) {
    Problem p{Matrix(rows, features), Vector(rows)};
    for (int i = 0; i < rows; ++i) {
        for (int f = 0; f < features; ++f)
            p.X(i, f) = coarse ? static_cast<double>(rng.below(6)) : rng.uniform() * 10.0 - 5.0;
        p.y[i] = coarse ? static_cast<double>(rng.below(10)) : 3.0 * std::sin(p.X(i, 0)) + rng.normal();
    }
    return p;
}

double rmse(const Vector& a, const Vector& b) { return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size())); }

}  // namespace

TEST_CASE("constant targets give zero-weight stumps") {
    Matrix X(5, 2);
    X << 1, 2, 3, 4, 5, 6, 7, 8, 9, 0;
    const Vector y = Vector::Constant(5, 4.0);
    const auto ens = fit_ensemble(X, y, GbtParams{});
    CHECK(ens.base_score == 4.0);
    CHECK(ens.n_trees() == 37);
    for (const auto& t : ens.trees) CHECK(t == Tree::zero_leaf());
    CHECK(predict(ens, X) == y);
}

TEST_CASE("single split example") {
    Matrix X(4, 1);
    X << 1, 2, 3, 4;
    const Vector y = (Vector(4) << 0, 0, 10, 10).finished();
    GbtParams p;
    p.max_depth = 1;
    p.lambda = 0;
    p.gamma = 0;
    p.eta = 1;
    p.n_trees = 1;
    const auto ens = fit_ensemble(X, y, p);
    REQUIRE(ens.trees.size() == 1);
    const auto& root = ens.trees[0].nodes[0];
    CHECK(root.feature == 0);
    CHECK(root.threshold == 2.5);
    const Vector pred = predict(ens, X);
    CHECK((pred - y).cwiseAbs().maxCoeff() < 1e-12);

    const Vector G = (Vector(4) << 5, 5, -5, -5).finished();
    const Vector H = Vector::Ones(4);
    const std::vector<Eigen::Index> rows{0, 1, 2, 3};
    const auto s = best_split(rows, G, H, X, p);
    REQUIRE(s);
    CHECK(s->gain == doctest::Approx(50.0));
    CHECK(s->threshold == 2.5);

    p.gamma = 60;
    CHECK_FALSE(best_split(rows, G, H, X, p));
    Matrix same = Matrix::Constant(4, 2, 1.0);
    p.gamma = 0;
    CHECK_FALSE(best_split(rows, G, H, same, p));
}

TEST_CASE("leaf weights") {
    CHECK(leaf_weight(0, 2, 0) == 0.0);
    CHECK(leaf_weight(-20, 2, 0) == 10.0);
    CHECK(leaf_weight(-20, 2, 2) == 5.0);
    CHECK(!std::signbit(leaf_weight(0.0, 2, 1)));
}

TEST_CASE("fit_ensemble input errors") {
    Matrix X(3, 1);
    X << 1, 2, 3;
    Vector y = Vector::Ones(3);
    CHECK_THROWS_AS(fit_ensemble(Matrix(0, 1), Vector(0), GbtParams{}), DataError);
    y[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fit_ensemble(X, y, GbtParams{}), DataError);
    CHECK_THROWS_AS(fit_ensemble(X, Vector::Ones(2), GbtParams{}), ShapeError);
    GbtParams bad;
    bad.eta = 0;
    CHECK_THROWS_AS(fit_ensemble(X, Vector::Ones(3), bad), ConfigError);
    const auto ens = fit_ensemble(X, Vector::Ones(3), GbtParams{});
    CHECK_THROWS_AS(predict(ens, Matrix(2, 3)), ShapeError);
}

TEST_CASE("property: trees match the exhaustive oracle") {
    Rng rng(2024);
    for (int rep = 0; rep < 60; ++rep) {
        const int rows = 2 + static_cast<int>(rng.below(63));
        const int features = 1 + static_cast<int>(rng.below(3));
        const auto prob = random_problem(rng, rows, features, rep % 2 == 0);
        oracle::Params op;
        op.max_depth = 1 + static_cast<int>(rng.below(2));
        op.n_trees = 1 + static_cast<int>(rng.below(3));
        op.lambda = rng.uniform() * 2.0;
        op.min_child_weight = static_cast<double>(rng.below(3));
        op.eta = 0.1 + 0.9 * rng.uniform();
        GbtParams p;
        p.max_depth = op.max_depth;
        p.n_trees = op.n_trees;
        p.lambda = op.lambda;
        p.min_child_weight = op.min_child_weight;
        p.eta = op.eta;
        const auto ens = fit_ensemble(prob.X, prob.y, p);
        const auto ref = oracle::boost(prob.X, prob.y, op);
        CHECK(std::abs(ens.base_score - ref.base) < 1e-12);
        REQUIRE(ens.trees.size() == ref.trees.size());
        for (std::size_t m = 0; m < ref.trees.size(); ++m) {
            const auto diff = oracle::compare(*ref.trees[m], ens.trees[m], 0, 1e-9);
            CHECK_MESSAGE(diff.empty(), "instance " << rep << " tree " << m << ": " << diff);
        }
    }
}

TEST_CASE("property: training loss never increases") {
    Rng rng(77);
    for (int rep = 0; rep < 10; ++rep) {
        const auto prob = random_problem(rng, 40 + static_cast<int>(rng.below(200)), 4, rep % 3 == 0);
        GbtParams p;
        p.lambda = rng.uniform() * 3.0;
        const auto ens = fit_ensemble(prob.X, prob.y, p);
        Vector pred = Vector::Constant(prob.y.size(), ens.base_score);
        double prev = rmse(pred, prob.y);
        const Matrix t = tree_outputs(ens, prob.X);
        for (Eigen::Index m = 0; m < t.cols(); ++m) {
            pred += p.eta * t.col(m);
            const double now = rmse(pred, prob.y);
            CHECK(now <= prev + 1e-12);
            prev = now;
        }
        CHECK((predict(ens, prob.X) - pred).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("ensembles do not depend on thread count") {
    Rng rng(5);
    const auto prob = random_problem(rng, 500, 9, true);
    GbtParams p;
    const auto a = fit_ensemble(prob.X, prob.y, p);
    p.n_threads = 4;
    const auto b = fit_ensemble(prob.X, prob.y, p);
    CHECK(a.trees == b.trees);
    CHECK(serialize(a).dump() != "");
}

TEST_CASE("shifting the targets only moves the base score") {
    Rng rng(6);
    const auto prob = random_problem(rng, 120, 3, false);
    const auto a = fit_ensemble(prob.X, prob.y, GbtParams{});
    const auto b = fit_ensemble(prob.X, (prob.y.array() + 12.5).matrix(), GbtParams{});
    CHECK(b.base_score == doctest::Approx(a.base_score + 12.5).epsilon(1e-12));
    REQUIRE(a.trees.size() == b.trees.size());
    for (std::size_t m = 0; m < a.trees.size(); ++m) {
        REQUIRE(a.trees[m].nodes.size() == b.trees[m].nodes.size());
        for (std::size_t k = 0; k < a.trees[m].nodes.size(); ++k) {
            const auto& x = a.trees[m].nodes[k];
            const auto& y = b.trees[m].nodes[k];
            CHECK(x.feature == y.feature);
            CHECK(x.threshold == y.threshold);
            CHECK(std::abs(x.weight - y.weight) < 1e-9);
        }
    }
}

TEST_CASE("early stopping keeps the best prefix") {
    Rng rng(8);
    const auto train = random_problem(rng, 200, 3, false);
    const auto valid = random_problem(rng, 100, 3, false);
    EarlyStop es{valid.X, valid.y, 5};
    GbtParams p;
    p.n_trees = 60;
    const auto ens = fit_ensemble(train.X, train.y, p, {}, &es);
    CHECK(ens.n_trees() <= 60);
    const auto full = fit_ensemble(train.X, train.y, p);
    const Matrix t = tree_outputs(full, valid.X);
    Vector pred = Vector::Constant(valid.y.size(), full.base_score);
    double best = rmse(pred, valid.y);
    Eigen::Index best_m = 0;
    int stale = 0;
    for (Eigen::Index m = 0; m < t.cols(); ++m) {
        pred += p.eta * t.col(m);
        const double r = rmse(pred, valid.y);
        if (r < best) {
            best = r;
            best_m = m + 1;
            stale = 0;
        } else if (++stale >= 5) {
            break;
        }
    }
    CHECK(ens.n_trees() == best_m);
    for (Eigen::Index m = 0; m < ens.n_trees(); ++m) CHECK(ens.trees[static_cast<std::size_t>(m)] == full.trees[static_cast<std::size_t>(m)]);
}

TEST_CASE("serialization round trip") {
    Rng rng(10);
    const auto prob = random_problem(rng, 150, 4, false);
    const auto ens = fit_ensemble(prob.X, prob.y, GbtParams{}, {"a", "b", "c", "d"});
    const auto doc = serialize(ens);
    const auto text = doc.dump();
    const auto back = deserialize_ensemble(nlohmann::json::parse(text));
    CHECK(back.trees == ens.trees);
    CHECK(back.base_score == ens.base_score);
    CHECK(back.feature_names == ens.feature_names);
    CHECK(predict(back, prob.X) == predict(ens, prob.X));
    CHECK(serialize(back).dump() == text);

    Ensemble empty = ens;
    empty.trees.clear();
    CHECK(predict(empty, prob.X) == Vector::Constant(prob.X.rows(), ens.base_score));

    auto no_version = doc;
    no_version.erase("version");
    CHECK_THROWS_AS(deserialize_ensemble(no_version), SchemaError);
    auto nan_doc = nlohmann::json::parse(text);
    nan_doc["base_score"] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(deserialize_ensemble(nan_doc), SchemaError);
    auto bad_feature = nlohmann::json::parse(text);
    bad_feature["trees"][0]["f"] = 9;
    CHECK_THROWS_AS(deserialize_ensemble(bad_feature), SchemaError);
}
