#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "twostage/probdist.hpp"
#include "twostage/rsf.hpp"

namespace twostage {

/// B-spline basis on a clamped knot vector.
struct BSplineBasis {
    int degree = 3;
    Vector knots;
    int num_basis = 0;

    BSplineBasis() = default;
    BSplineBasis(int degree, Vector knots);

    /// `interior` equally spaced interior knots on [t0, t1], end knots
    /// repeated degree+1 times.
    static BSplineBasis clamped(double t0, double t1, int interior, int degree = 3);

    double lower() const { return knots[degree]; }
    double upper() const { return knots[knots.size() - degree - 1]; }

    /// Nonzero basis values at t (degree+1 of them) and the index of the first.
    int local(double t, Eigen::Ref<Vector> values) const;
    Vector row(double t) const;
};

/// |times| x num_basis matrix of basis values (Cox-de Boor recursion).
Matrix build_basis(const std::vector<double>& times, const BSplineBasis& basis);

struct FmmConfig {
    long iterations = 6000;
    long burnin = 1000;
    long thin = 1;
    /// 0 selects max(10, n/3)
    int interior_knots = 0;
    /// <= 0 selects 100 x the pooled variance of the centred positions
    double sigma_alpha_sq = 0.0;
    /// Measurement error; `error.p` is the starting mixture probability.
    MixtureErrorParams error{0.5, SpdFactor::identity(2), 1.5707963267948966};
    /// Per error-class multipliers of the error covariance (class 0 when absent).
    std::map<int, double> class_scale;
    /// Hold p fixed instead of sampling it.
    std::optional<double> fixed_p;

    void validate() const;
};

/// One posterior draw of the path model.
struct FmmState {
    Vector alpha_x;
    Vector alpha_y;
    double p = 0.5;
    std::vector<unsigned char> z;
    double sigma_alpha_sq = 1.0;
    MixtureErrorParams error;
};

struct FmmFit {
    std::string individual_id;
    BSplineBasis basis;
    Eigen::Vector2d offset = Eigen::Vector2d::Zero();
    double sigma_alpha_sq = 1.0;
    MixtureErrorParams error;
    RowMatrix alpha_draws; // K x 2B: alpha_x then alpha_y, in centred coordinates
    Vector p_draws;
    Vector z_mean; // posterior P(z_i = 1)
    std::vector<double> obs_times;

    Eigen::Index num_draws() const { return alpha_draws.rows(); }
    FmmState state(Eigen::Index k) const;
    /// |times| x 2 path for draw k, in original coordinates.
    Matrix path(Eigen::Index k, const std::vector<double>& times) const;
    /// Posterior mean path.
    Matrix mean_path(const std::vector<double>& times) const;
};

/// Gaussian full conditional of the stacked coefficients (alpha_x, alpha_y)
/// given component indicators z (1 = base covariance):
/// precision sum_i A_i' C_i^{-1} A_i + I / sigma_alpha_sq.
struct AlphaConditional {
    Vector mean;
    SpdFactor precision;
};

AlphaConditional fmm_alpha_conditional(const Matrix& W, const Matrix& obs,
                                       const std::vector<unsigned char>& z,
                                       const std::vector<double>& scale,
                                       const MixtureErrorParams& error, double sigma_alpha_sq);

/// P(z_i = 1 | residual, p) = p N1 / (p N1 + (1-p) N2).
double indicator_probability(const Eigen::Vector2d& residual, double p,
                             const MixtureErrorParams& error, double scale = 1.0);

/// Gibbs sampler: alpha | z, then z | alpha, p, then p | z ~ Beta(1 + sum z, 1 + sum(1-z)).
FmmFit fit_fmm(const PointSet& series, const FmmConfig& config, Rng& rng);

/// M posterior-predictive path realizations on a regular time grid.
struct PathDraws {
    std::string individual_id;
    double grid_start = 0.0;
    double grid_dt = 1.0;
    Eigen::Index grid_len = 0;
    RowMatrix draws; // M x (2 * grid_len), (x, y) interleaved per time

    Eigen::Index num_paths() const { return draws.rows(); }
    double time(Eigen::Index i) const { return grid_start + double(i) * grid_dt; }
    Eigen::Vector2d position(Eigen::Index m, Eigen::Index i) const
    {
        return {draws(m, 2 * i), draws(m, 2 * i + 1)};
    }
    void validate() const;
};

/// Evaluates W(T) alpha for M evenly spaced retained draws (k = floor(m K / M)).
PathDraws impute_paths(const FmmFit& fit, double grid_start, double grid_dt, Eigen::Index grid_len,
                       Eigen::Index M);

/// Manifest <stem>.json {individual_id, M, grid_start, grid_dt, grid_len} + <stem>.bin.
void save_path_draws(const PathDraws& paths, const std::filesystem::path& dir, const std::string& stem);
PathDraws load_path_draws(const std::filesystem::path& dir, const std::string& stem);

} // namespace twostage
