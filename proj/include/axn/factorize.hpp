#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "axn/core.hpp"
#include "axn/random.hpp"

namespace axn {

// ---------------------------------------------------------------------------
// Skip-connected two-layer MLP tower
//
//   x'  = b2 + W2^T gelu(b1 + W1^T x)
//   out = sigmoid(w_skip) x' + (1 - sigmoid(w_skip)) x
//
// Rows are samples throughout, so for a batch X (n x d):
//   Z = X W1 + 1 b1^T,  H = gelu(Z),  Y' = H W2 + 1 b2^T.
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar gelu(Scalar x) {
    using std::erf;
    return Scalar(0.5) * x * (Scalar(1) + erf(x / Scalar(std::numbers::sqrt2)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
    using std::erf;
    using std::exp;
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + erf(x / Scalar(std::numbers::sqrt2)));
    const Scalar pdf = exp(Scalar(-0.5) * x * x) * Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    using std::exp;
    return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-x)) : exp(x) / (Scalar(1) + exp(x));
}

template <typename Scalar>
struct MlpTower {
    RowMatrixT<Scalar> W1;  // d x 2d
    VectorT<Scalar> b1;     // 2d
    RowMatrixT<Scalar> W2;  // 2d x d
    VectorT<Scalar> b2;     // d
    Scalar w_skip = Scalar(-5);

    std::size_t dim() const noexcept { return static_cast<std::size_t>(W1.rows()); }

    static MlpTower zeros(std::size_t d, Scalar skip) {
        const auto n = static_cast<Eigen::Index>(d);
        MlpTower t;
        t.W1 = RowMatrixT<Scalar>::Zero(n, 2 * n);
        t.b1 = VectorT<Scalar>::Zero(2 * n);
        t.W2 = RowMatrixT<Scalar>::Zero(2 * n, n);
        t.b2 = VectorT<Scalar>::Zero(n);
        t.w_skip = skip;
        return t;
    }

    /// Fan-in uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    static MlpTower random(std::size_t d, Rng& rng, Scalar skip = Scalar(-5)) {
        MlpTower t = zeros(d, skip);
        auto fill = [&](auto& m, double fan_in) {
            const double bound = 1.0 / std::sqrt(fan_in);
            for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = Scalar(uniform_draw(rng, -bound, bound));
        };
        fill(t.W1, double(d));
        fill(t.b1, double(d));
        fill(t.W2, double(2 * d));
        fill(t.b2, double(2 * d));
        return t;
    }

    /// Throws Errc::invalid_matrix on inconsistent shapes or non-finite values.
    void validate() const;

    template <typename Other>
    MlpTower<Other> cast() const {
        return {W1.template cast<Other>(), b1.template cast<Other>(), W2.template cast<Other>(),
                b2.template cast<Other>(), Other(w_skip)};
    }
};

using MlpTowerParams = MlpTower<double>;

/// Intermediate activations kept for the backward pass.
template <typename Scalar>
struct MlpActivations {
    RowMatrixT<Scalar> X, Z, H, Yp, Y;
};

template <typename Scalar>
void MlpTower<Scalar>::validate() const {
    const auto d = W1.rows();
    if (d == 0 || W1.cols() != 2 * d || b1.size() != 2 * d || W2.rows() != 2 * d || W2.cols() != d ||
        b2.size() != d)
        throw Error(Errc::invalid_matrix, "MLP tower shapes inconsistent");
    using std::isfinite;
    if (!W1.allFinite() || !b1.allFinite() || !W2.allFinite() || !b2.allFinite() || !isfinite(w_skip))
        throw Error(Errc::invalid_matrix, "MLP tower has non-finite parameters");
}

/// Batched forward pass over the rows of X.
template <typename Derived, typename Scalar = typename Derived::Scalar>
MlpActivations<Scalar> mlp_forward_rows(const Eigen::MatrixBase<Derived>& X, const MlpTower<Scalar>& t) {
    if (static_cast<std::size_t>(X.cols()) != t.dim())
        throw Error(Errc::dimension_mismatch, "MLP input has " + std::to_string(X.cols()) + " columns, tower expects " +
                                                  std::to_string(t.dim()));
    MlpActivations<Scalar> a;
    a.X = X;
    a.Z = (a.X * t.W1).rowwise() + t.b1.transpose();
    a.H = a.Z.unaryExpr([](Scalar z) { return gelu(z); });
    a.Yp = (a.H * t.W2).rowwise() + t.b2.transpose();
    const Scalar s = sigmoid(t.w_skip);
    a.Y = s * a.Yp + (Scalar(1) - s) * a.X;
    return a;
}

template <typename Derived, typename Scalar = typename Derived::Scalar>
VectorT<Scalar> mlp_forward(const Eigen::MatrixBase<Derived>& x, const MlpTower<Scalar>& t) {
    if (static_cast<std::size_t>(x.size()) != t.dim())
        throw Error(Errc::dimension_mismatch, "MLP input has length " + std::to_string(x.size()) +
                                                  ", tower expects " + std::to_string(t.dim()));
    RowMatrixT<Scalar> row = x.derived().transpose();
    return mlp_forward_rows(row, t).Y.row(0).transpose();
}

template <typename Scalar>
struct MlpGradient {
    RowMatrixT<Scalar> W1, W2;
    VectorT<Scalar> b1, b2;
    Scalar w_skip = Scalar(0);
    RowMatrixT<Scalar> X;  // gradient w.r.t. the inputs, one row per sample
};

/// Vector-Jacobian product: given dL/dY for every row, returns dL/d(parameters) and dL/dX.
template <typename Scalar>
MlpGradient<Scalar> mlp_backward(const MlpActivations<Scalar>& a, const RowMatrixT<Scalar>& dY,
                                 const MlpTower<Scalar>& t) {
    const Scalar s = sigmoid(t.w_skip);
    MlpGradient<Scalar> g;
    const RowMatrixT<Scalar> dYp = s * dY;
    g.w_skip = dY.cwiseProduct(a.Yp - a.X).sum() * s * (Scalar(1) - s);
    g.W2 = a.H.transpose() * dYp;
    g.b2 = dYp.colwise().sum().transpose();
    const RowMatrixT<Scalar> dZ =
        (dYp * t.W2.transpose()).cwiseProduct(a.Z.unaryExpr([](Scalar z) { return gelu_derivative(z); }));
    g.W1 = a.X.transpose() * dZ;
    g.b1 = dZ.colwise().sum().transpose();
    g.X = dZ * t.W1.transpose() + (Scalar(1) - s) * dY;
    return g;
}

/// Gradient of the squared-error contribution (target - mlp(x) . partner)^2
/// with respect to every tower parameter and to x.
template <typename Scalar>
MlpGradient<Scalar> mlp_gradient(const VectorT<Scalar>& x, Scalar target, const VectorT<Scalar>& partner,
                                 const MlpTower<Scalar>& t) {
    RowMatrixT<Scalar> row = x.transpose();
    const auto a = mlp_forward_rows(row, t);
    const Scalar residual = a.Y.row(0).dot(partner.transpose()) - target;
    RowMatrixT<Scalar> dY = (Scalar(2) * residual) * partner.transpose();
    return mlp_backward(a, dY, t);
}

// ---------------------------------------------------------------------------
// Matrix factorization
// ---------------------------------------------------------------------------

/// sum over observed (q, i) of (G_qi - U_q . V_i)^2.
double mf_loss(const SparseScoreMatrix& g, const EmbeddingMatrix& U, const EmbeddingMatrix& V);
double mf_loss(std::span<const ScoreEntry> entries, const RowMatrix& U, const RowMatrix& V);

struct MfGradient {
    RowMatrix U, V;
};

/// Gradient of the summed squared error over `entries` w.r.t. U and V.
MfGradient mf_loss_gradient(std::span<const ScoreEntry> entries, const RowMatrix& U, const RowMatrix& V);

enum class OptimizerKind { sgd, adam };

struct MfHyperparams {
    std::size_t dim = 16;
    double learning_rate = 1e-3;
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    double max_wall_seconds = std::numeric_limits<double>::infinity();
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    /// Gradient shards for the transductive model; >1 may change the last bits.
    std::size_t workers = 1;

    void validate() const;
};

enum class MfKind { transductive, inductive };

struct TrainingTrace {
    std::vector<double> epoch_loss;  // mf_loss after each completed epoch
    double initial_loss = 0.0;
    std::size_t best_epoch = 0;      // 0 = initialization was never improved on
    bool stopped_on_wall_clock = false;
    double seconds = 0.0;
};

struct MfModel {
    MfKind kind = MfKind::transductive;
    EmbeddingMatrix U;  // train queries
    EmbeddingMatrix V;  // items
    std::optional<MlpTowerParams> query_tower;
    std::optional<MlpTowerParams> item_tower;
    /// Frozen inputs of the inductive towers.
    std::shared_ptr<const EmbeddingMatrix> base_queries;
    std::shared_ptr<const EmbeddingMatrix> base_items;
    TrainingTrace trace;
};

/// Free-parameter factorization; returns the parameters with the lowest
/// training loss seen (initialization included).
MfModel train_transductive(const SparseScoreMatrix& g, const EmbeddingMatrix& init_U, const EmbeddingMatrix& init_V,
                           const MfHyperparams& h);

/// Query and item towers over frozen base embeddings. Base query rows are
/// indexed by G's query ids.
MfModel train_inductive(const SparseScoreMatrix& g, std::shared_ptr<const EmbeddingMatrix> base_queries,
                        std::shared_ptr<const EmbeddingMatrix> base_items, const MfHyperparams& h);

EmbeddingMatrix embed_items(const MfModel& m);
/// Inductive: query tower applied to `base`. Transductive: `base` unchanged
/// (test queries have no free parameters).
EmbeddingMatrix embed_queries(const MfModel& m, const EmbeddingMatrix& base);

/// Row-wise application of a tower.
EmbeddingMatrix apply_tower(const MlpTowerParams& t, const EmbeddingMatrix& base);

EmbeddingMatrix random_embeddings(std::size_t rows, std::size_t dim, double scale, std::uint64_t seed, Role role);

/// Model directory: queries.axne, items.axne, model.json (kind, hyperparameters,
/// and for inductive models the tower parameters as flat row-major arrays).
void save_model(const MfModel& m, const std::filesystem::path& dir, const MfHyperparams& h);
MfModel load_model(const std::filesystem::path& dir);

}  // namespace axn
