#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "twostage/errors.hpp"
#include "twostage/random.hpp"

namespace twostage {

template <class Scalar, int Rows = Eigen::Dynamic, int Cols = Eigen::Dynamic>
using mat_type = Eigen::Matrix<Scalar, Rows, Cols>;

template <class Scalar, int Rows = Eigen::Dynamic>
using vec_type = Eigen::Matrix<Scalar, Rows, 1>;

using Matrix = mat_type<double>;
using Vector = vec_type<double>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Cholesky factor of a symmetric positive definite matrix.
///
/// The lower factor L (with A = L L') is the only representation kept; every
/// density and solve goes through it. Construction from a matrix fails hard on
/// asymmetry beyond 1e-10 (relative to the largest entry) or on a failed
/// factorization; there is no silent jitter.
template <class Scalar>
class BasicSpdFactor {
public:
    using matrix_type = mat_type<Scalar>;
    using vector_type = vec_type<Scalar>;

    BasicSpdFactor() = default;

    template <class Derived>
    explicit BasicSpdFactor(const Eigen::MatrixBase<Derived>& a)
    {
        if (a.rows() != a.cols() || a.rows() == 0)
            throw NumericalError("SpdFactor: matrix must be square and non-empty");
        if (!a.allFinite())
            throw NumericalError("SpdFactor: matrix has non-finite entries");
        const Scalar scale = std::max<Scalar>(Scalar(1), a.cwiseAbs().maxCoeff());
        if ((a - a.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-10) * scale)
            throw NumericalError("SpdFactor: matrix is not symmetric");
        Eigen::LLT<matrix_type> llt(a.template selfadjointView<Eigen::Lower>());
        if (llt.info() != Eigen::Success)
            throw NumericalError("SpdFactor: matrix is not positive definite");
        lower_ = llt.matrixL();
        finish();
    }

    template <class Derived>
    static BasicSpdFactor from_lower(const Eigen::MatrixBase<Derived>& l)
    {
        if (l.rows() != l.cols() || l.rows() == 0)
            throw NumericalError("SpdFactor: factor must be square and non-empty");
        BasicSpdFactor f;
        f.lower_ = l.template triangularView<Eigen::Lower>();
        if (!f.lower_.allFinite() || (f.lower_.diagonal().array() <= Scalar(0)).any())
            throw NumericalError("SpdFactor: factor needs a strictly positive diagonal");
        f.finish();
        return f;
    }

    static BasicSpdFactor identity(Eigen::Index dim, Scalar variance = Scalar(1))
    {
        return from_lower(matrix_type::Identity(dim, dim) * std::sqrt(variance));
    }

    Eigen::Index dim() const { return lower_.rows(); }
    const matrix_type& lower() const { return lower_; }
    Scalar log_determinant() const { return log_det_; }

    matrix_type matrix() const { return lower_ * lower_.transpose(); }

    matrix_type inverse() const
    {
        matrix_type linv = lower_.template triangularView<Eigen::Lower>().solve(
            matrix_type::Identity(dim(), dim()));
        return linv.transpose() * linv;
    }

    /// L^{-1} v
    template <class Derived>
    vector_type whiten(const Eigen::MatrixBase<Derived>& v) const
    {
        return lower_.template triangularView<Eigen::Lower>().solve(v);
    }

    /// v' A^{-1} v
    template <class Derived>
    Scalar quad_form(const Eigen::MatrixBase<Derived>& v) const
    {
        return whiten(v).squaredNorm();
    }

    /// A^{-1} v
    template <class Derived>
    vector_type solve(const Eigen::MatrixBase<Derived>& v) const
    {
        vector_type w = whiten(v);
        return lower_.transpose().template triangularView<Eigen::Upper>().solve(w);
    }

private:
    void finish() { log_det_ = Scalar(2) * lower_.diagonal().array().log().sum(); }

    matrix_type lower_;
    Scalar log_det_ = Scalar(0);
};

using SpdFactor = BasicSpdFactor<double>;

template <class Scalar>
struct BasicMvnParams {
    vec_type<Scalar> mean;
    BasicSpdFactor<Scalar> covariance;

    BasicMvnParams() = default;
    BasicMvnParams(vec_type<Scalar> m, BasicSpdFactor<Scalar> cov)
        : mean(std::move(m)), covariance(std::move(cov))
    {
        if (mean.size() != covariance.dim())
            throw NumericalError("MvnParams: mean length " + std::to_string(mean.size()) +
                                 " does not match covariance dim " +
                                 std::to_string(covariance.dim()));
    }

    Eigen::Index dim() const { return mean.size(); }
};

using MvnParams = BasicMvnParams<double>;

/// Wishart(scale, dof) with E[W] = dof * scale.
template <class Scalar>
struct BasicWishartParams {
    BasicSpdFactor<Scalar> scale;
    Scalar dof = Scalar(0);

    BasicWishartParams() = default;
    BasicWishartParams(BasicSpdFactor<Scalar> s, Scalar nu) : scale(std::move(s)), dof(nu)
    {
        if (!(dof >= Scalar(scale.dim())))
            throw NumericalError("WishartParams: dof " + std::to_string(double(dof)) +
                                 " is below dimension " + std::to_string(scale.dim()));
    }

    Eigen::Index dim() const { return scale.dim(); }
};

using WishartParams = BasicWishartParams<double>;

/// 2x2 axis rotation. The convention maps diag(4,1) at pi/4 to
/// [[2.5,-1.5],[-1.5,2.5]].
template <class Scalar>
mat_type<Scalar, 2, 2> rotation_matrix(Scalar angle)
{
    const Scalar c = std::cos(angle);
    const Scalar s = std::sin(angle);
    mat_type<Scalar, 2, 2> h;
    h << c, s, -s, c;
    return h;
}

/// H cov H'
template <class Scalar>
BasicSpdFactor<Scalar> rotate_cov(const BasicSpdFactor<Scalar>& cov, Scalar angle)
{
    if (cov.dim() != 2)
        throw NumericalError("rotate_cov: covariance must be 2x2");
    const mat_type<Scalar, 2, 2> h = rotation_matrix(angle);
    // H L is a (non-triangular) square root; re-factor the symmetrised product.
    const mat_type<Scalar> hl = h * cov.lower();
    mat_type<Scalar> rotated = hl * hl.transpose();
    rotated = Scalar(0.5) * (rotated + rotated.transpose()).eval();
    return BasicSpdFactor<Scalar>(rotated);
}

/// Two-component Gaussian error: N(0, base) with probability p, otherwise
/// N(0, H base H').
template <class Scalar>
struct BasicMixtureErrorParams {
    Scalar p = Scalar(1);
    BasicSpdFactor<Scalar> base_cov;
    Scalar rotation_angle = Scalar(0);
    BasicSpdFactor<Scalar> rotated_cov;

    BasicMixtureErrorParams() = default;
    BasicMixtureErrorParams(Scalar prob, BasicSpdFactor<Scalar> base, Scalar angle)
        : p(prob), base_cov(std::move(base)), rotation_angle(angle)
    {
        if (!(p >= Scalar(0) && p <= Scalar(1)))
            throw NumericalError("MixtureErrorParams: p must lie in [0,1]");
        rotated_cov = rotate_cov(base_cov, rotation_angle);
    }

    mat_type<Scalar, 2, 2> rotation() const { return rotation_matrix(rotation_angle); }
};

using MixtureErrorParams = BasicMixtureErrorParams<double>;

template <class Derived, class Scalar>
Scalar mvn_logpdf(const Eigen::MatrixBase<Derived>& x, const vec_type<Scalar>& mean,
                  const BasicSpdFactor<Scalar>& cov)
{
    if (x.size() != mean.size() || mean.size() != cov.dim())
        throw NumericalError("mvn_logpdf: dimension mismatch");
    if (!x.allFinite())
        throw NumericalError("mvn_logpdf: non-finite input");
    constexpr Scalar log_two_pi = Scalar(1.8378770664093454835606594728112);
    const Scalar d = Scalar(mean.size());
    return Scalar(-0.5) * (d * log_two_pi + cov.log_determinant() + cov.quad_form(x - mean));
}

template <class Derived, class Scalar>
Scalar mvn_logpdf(const Eigen::MatrixBase<Derived>& x, const BasicMvnParams<Scalar>& params)
{
    return mvn_logpdf(x, params.mean, params.covariance);
}

/// Log density of N(mean, P^{-1}) given the factor of the precision P.
template <class Derived, class Scalar>
Scalar mvn_logpdf_precision(const Eigen::MatrixBase<Derived>& x, const vec_type<Scalar>& mean,
                            const BasicSpdFactor<Scalar>& precision)
{
    if (x.size() != mean.size() || mean.size() != precision.dim())
        throw NumericalError("mvn_logpdf_precision: dimension mismatch");
    constexpr Scalar log_two_pi = Scalar(1.8378770664093454835606594728112);
    const vec_type<Scalar> w = precision.lower().transpose() * (x - mean);
    return Scalar(-0.5) * (Scalar(mean.size()) * log_two_pi - precision.log_determinant() +
                           w.squaredNorm());
}

template <class Scalar>
vec_type<Scalar> mvn_sample(Rng& rng, const BasicMvnParams<Scalar>& params)
{
    vec_type<Scalar> z(params.dim());
    for (Eigen::Index i = 0; i < z.size(); ++i)
        z[i] = Scalar(std_normal(rng));
    return params.mean + params.covariance.lower() * z;
}

/// Draw mean + L^{-T} z, i.e. N(mean, P^{-1}) given the factor of the precision P.
template <class Scalar>
vec_type<Scalar> mvn_sample_precision(Rng& rng, const vec_type<Scalar>& mean,
                                      const BasicSpdFactor<Scalar>& precision)
{
    vec_type<Scalar> z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i)
        z[i] = Scalar(std_normal(rng));
    return mean + precision.lower().transpose().template triangularView<Eigen::Upper>().solve(z);
}

/// Bartlett decomposition: W = (L A)(L A)' with A lower triangular,
/// A_ii = sqrt(chi2(dof - i)), A_ij ~ N(0,1) below the diagonal.
template <class Scalar>
BasicSpdFactor<Scalar> wishart_sample(Rng& rng, const BasicWishartParams<Scalar>& params)
{
    const Eigen::Index d = params.dim();
    if (!(params.dof >= Scalar(d)))
        throw NumericalError("wishart_sample: dof below dimension");
    mat_type<Scalar> a = mat_type<Scalar>::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        a(i, i) = std::sqrt(Scalar(chi_squared(rng, double(params.dof) - double(i))));
        for (Eigen::Index j = 0; j < i; ++j)
            a(i, j) = Scalar(std_normal(rng));
    }
    return BasicSpdFactor<Scalar>::from_lower(params.scale.lower() * a);
}

/// y log(lambda) - lambda - log(y!)
template <class Scalar>
Scalar poisson_logpmf(long long y, Scalar lambda)
{
    if (y < 0)
        throw NumericalError("poisson_logpmf: negative count");
    if (!(lambda > Scalar(0)) || !std::isfinite(double(lambda)))
        throw NumericalError("poisson_logpmf: rate must be positive and finite");
    return Scalar(y) * std::log(lambda) - lambda - std::lgamma(Scalar(y) + Scalar(1));
}

template <class Scalar>
Scalar log_sum_exp(Scalar a, Scalar b)
{
    if (a == -std::numeric_limits<Scalar>::infinity())
        return b;
    if (b == -std::numeric_limits<Scalar>::infinity())
        return a;
    const Scalar m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

template <class DerivedX, class DerivedM, class Scalar>
Scalar mixture2_logpdf(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedM>& mean,
                       const BasicMixtureErrorParams<Scalar>& params)
{
    const vec_type<Scalar> m = mean;
    const Scalar ninf = -std::numeric_limits<Scalar>::infinity();
    const Scalar a = params.p > Scalar(0)
                         ? std::log(params.p) + mvn_logpdf(x, m, params.base_cov)
                         : ninf;
    const Scalar b = params.p < Scalar(1)
                         ? std::log1p(-params.p) + mvn_logpdf(x, m, params.rotated_cov)
                         : ninf;
    return log_sum_exp(a, b);
}

} // namespace twostage
