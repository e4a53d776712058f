#pragma once

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "bikefed/common.hpp"

namespace bikefed {

/// One-layer 1D convolution over the concatenated per-tree outputs of K client
/// blocks of M trees each. Kernel and stride are both M, so every output
/// channel applies one length-M weight vector (a set of per-tree learning
/// rates) to each client block. A dense head maps the K x C activations to a
/// scalar. Activation is linear.
///
/// Flattened activation index for (channel c_out, block c) is c_out * K + c.
template <typename Scalar>
struct AggLayerT {
    using MatrixS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    MatrixS conv_weights;  // C x M
    VectorS conv_bias;     // C
    VectorS dense_weights; // K * C
    Scalar dense_bias{};

    Eigen::Index channels() const { return conv_weights.rows(); }
    Eigen::Index kernel() const { return conv_weights.cols(); }
    Eigen::Index blocks() const { return channels() == 0 ? 0 : dense_weights.size() / channels(); }
    Eigen::Index input_size() const { return blocks() * kernel(); }
    Eigen::Index parameter_count() const {
        return conv_weights.size() + conv_bias.size() + dense_weights.size() + 1;
    }

    static AggLayerT zeros(Eigen::Index K, Eigen::Index M, Eigen::Index C) {
        AggLayerT l;
        l.conv_weights = MatrixS::Zero(C, M);
        l.conv_bias = VectorS::Zero(C);
        l.dense_weights = VectorS::Zero(K * C);
        l.dense_bias = Scalar(0);
        return l;
    }

    /// Parameters as one flat vector: conv (row-major), conv bias, dense, dense bias.
    VectorS flatten() const {
        VectorS v(parameter_count());
        Eigen::Index at = 0;
        for (Eigen::Index r = 0; r < conv_weights.rows(); ++r)
            for (Eigen::Index c = 0; c < conv_weights.cols(); ++c) v[at++] = conv_weights(r, c);
        v.segment(at, conv_bias.size()) = conv_bias;
        at += conv_bias.size();
        v.segment(at, dense_weights.size()) = dense_weights;
        at += dense_weights.size();
        v[at] = dense_bias;
        return v;
    }

    /// Inverse of flatten(); shapes are taken from *this.
    void assign(const VectorS& v) {
        if (v.size() != parameter_count()) throw ShapeError("AggLayer::assign: parameter count mismatch");
        Eigen::Index at = 0;
        for (Eigen::Index r = 0; r < conv_weights.rows(); ++r)
            for (Eigen::Index c = 0; c < conv_weights.cols(); ++c) conv_weights(r, c) = v[at++];
        conv_bias = v.segment(at, conv_bias.size());
        at += conv_bias.size();
        dense_weights = v.segment(at, dense_weights.size());
        at += dense_weights.size();
        dense_bias = v[at];
    }

    bool all_finite() const {
        return conv_weights.allFinite() && conv_bias.allFinite() && dense_weights.allFinite() && std::isfinite(static_cast<double>(dense_bias));
    }

    template <typename Other>
    AggLayerT<Other> cast() const {
        AggLayerT<Other> o;
        o.conv_weights = conv_weights.template cast<Other>();
        o.conv_bias = conv_bias.template cast<Other>();
        o.dense_weights = dense_weights.template cast<Other>();
        o.dense_bias = static_cast<Other>(dense_bias);
        return o;
    }
};

using AggLayer = AggLayerT<double>;

/// Batched forward pass; `inputs` is rows x (K * M).
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> agg_forward_batch(const AggLayerT<Scalar>& layer,
                                                           const Eigen::MatrixBase<Derived>& inputs) {
    const Eigen::Index K = layer.blocks();
    const Eigen::Index M = layer.kernel();
    const Eigen::Index C = layer.channels();
    if (inputs.cols() != K * M)
        throw ShapeError("agg_forward: expected " + std::to_string(K * M) + " tree outputs, got " +
                         std::to_string(inputs.cols()));
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out =
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Constant(inputs.rows(), layer.dense_bias);
    for (Eigen::Index c = 0; c < K; ++c) {
        // z: rows x C activations of block c
        const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> z =
            (inputs.middleCols(c * M, M) * layer.conv_weights.transpose()).rowwise() +
            layer.conv_bias.transpose();
        for (Eigen::Index co = 0; co < C; ++co) out += layer.dense_weights[co * K + c] * z.col(co);
    }
    return out;
}

template <typename Scalar, typename Derived>
Scalar agg_forward(const AggLayerT<Scalar>& layer, const Eigen::MatrixBase<Derived>& tree_vec) {
    if (tree_vec.size() != layer.input_size())
        throw ShapeError("agg_forward: expected " + std::to_string(layer.input_size()) + " tree outputs, got " +
                         std::to_string(tree_vec.size()));
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> row(tree_vec.size());
    for (Eigen::Index i = 0; i < tree_vec.size(); ++i) row[i] = static_cast<Scalar>(tree_vec(i));
    return agg_forward_batch(layer, row)[0];
}

/// FedProx local objective:
///   mean_i (f(x_i) - y_i)^2 + (mu / 2) * ||w - w_anchor||^2
/// Returns the value and writes the parameter gradient (same shapes as `layer`).
template <typename Scalar, typename DerivedX, typename DerivedY>
Scalar prox_objective(const AggLayerT<Scalar>& layer, const Eigen::MatrixBase<DerivedX>& inputs,
                      const Eigen::MatrixBase<DerivedY>& targets, const AggLayerT<Scalar>& anchor, Scalar mu,
                      AggLayerT<Scalar>* grad) {
    using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MatrixS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    const Eigen::Index n = inputs.rows();
    if (n == 0 || targets.size() != n) throw ShapeError("prox_objective: empty batch or target mismatch");
    const Eigen::Index K = layer.blocks();
    const Eigen::Index M = layer.kernel();
    const Eigen::Index C = layer.channels();

    const VectorS out = agg_forward_batch(layer, inputs);
    const VectorS resid = out - targets.template cast<Scalar>();
    const VectorS diff = layer.flatten() - anchor.flatten();
    const Scalar value = resid.squaredNorm() / Scalar(n) + mu / Scalar(2) * diff.squaredNorm();
    if (grad == nullptr) return value;

    *grad = AggLayerT<Scalar>::zeros(K, M, C);
    const VectorS r = Scalar(2) * resid / Scalar(n);
    grad->dense_bias = r.sum();
    for (Eigen::Index c = 0; c < K; ++c) {
        const auto block = inputs.middleCols(c * M, M);
        const MatrixS z = (block * layer.conv_weights.transpose()).rowwise() + layer.conv_bias.transpose();
        // dL/dz[:, co] = r * dense[co * K + c]
        VectorS dense_c(C);
        for (Eigen::Index co = 0; co < C; ++co) {
            dense_c[co] = layer.dense_weights[co * K + c];
            grad->dense_weights[co * K + c] = r.dot(z.col(co));
        }
        const MatrixS dz = r * dense_c.transpose();  // n x C
        grad->conv_weights.noalias() += dz.transpose() * block;
        grad->conv_bias += dz.colwise().sum().transpose();
    }
    if (mu != Scalar(0)) {
        VectorS g = grad->flatten();
        g += mu * diff;
        grad->assign(g);
    }
    return value;
}

nlohmann::json to_json(const AggLayer& layer);
AggLayer agg_layer_from_json(const nlohmann::json& j);

}  // namespace bikefed
