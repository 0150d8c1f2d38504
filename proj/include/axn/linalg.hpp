#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "axn/core.hpp"

namespace axn {

/// Minimum-norm least-squares solution of rows * u = targets via the SVD
/// pseudo-inverse. Singular values at or below tol * sigma_max count as zero,
/// so rank-deficient and under-determined systems return the minimum-norm u.
template <typename DerivedRows, typename DerivedTargets>
VectorT<typename DerivedRows::Scalar> solve_query_embedding(const Eigen::MatrixBase<DerivedRows>& rows,
                                                            const Eigen::MatrixBase<DerivedTargets>& targets,
                                                            double tol = 1e-10) {
    using Scalar = typename DerivedRows::Scalar;
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    if (rows.rows() == 0) throw Error(Errc::degenerate_input, "no retrieved items to regress on");
    if (rows.rows() != targets.size())
        throw Error(Errc::size_mismatch, "item rows and exact scores differ in length");
    if (!(tol >= 0.0)) throw Error(Errc::invalid_spec, "pseudo-inverse tolerance must be >= 0");

    const Matrix A = rows;
    Eigen::BDCSVD<Matrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const Scalar cutoff = sv.size() ? Scalar(tol) * sv(0) : Scalar(0);
    VectorT<Scalar> coeff = svd.matrixU().transpose() * targets.derived().template cast<Scalar>();
    for (Eigen::Index j = 0; j < sv.size(); ++j) coeff(j) = sv(j) > cutoff ? coeff(j) / sv(j) : Scalar(0);
    return svd.matrixV() * coeff;
}

/// (1 - lambda) * u_linreg + lambda * u_param.
template <typename DerivedA, typename DerivedB>
VectorT<typename DerivedA::Scalar> mix_embedding(const Eigen::MatrixBase<DerivedA>& u_linreg,
                                                 const Eigen::MatrixBase<DerivedB>& u_param, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw Error(Errc::lambda_out_of_range, "lambda must lie in [0, 1], got " + std::to_string(lambda));
    if (u_linreg.size() != u_param.size())
        throw Error(Errc::dimension_mismatch, "embeddings to mix differ in dimension");
    if (lambda == 0.0) return u_linreg;
    if (lambda == 1.0) return u_param;
    using Scalar = typename DerivedA::Scalar;
    return Scalar(1.0 - lambda) * u_linreg + Scalar(lambda) * u_param;
}

}  // namespace axn
