#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "twostage/errors.hpp"
#include "twostage/fmm.hpp"
#include "twostage/random.hpp"

using namespace twostage;

namespace {

// Textbook Cox-de Boor recursion, 0/0 taken as 0. Valid for t strictly inside the knot range.
double cox_de_boor(const Vector& k, int i, int d, double t)
{
    if (d == 0)
        return (k[i] <= t && t < k[i + 1]) ? 1.0 : 0.0;
    double a = 0.0, b = 0.0;
    if (k[i + d] != k[i])
        a = (t - k[i]) / (k[i + d] - k[i]) * cox_de_boor(k, i, d - 1, t);
    if (k[i + d + 1] != k[i + 1])
        b = (k[i + d + 1] - t) / (k[i + d + 1] - k[i + 1]) * cox_de_boor(k, i + 1, d - 1, t);
    return a + b;
}

// Ridge posterior for stacked (alpha_x, alpha_y) with a common 2x2 error covariance, built with
// explicit Kronecker blocks and dense inverses.
std::pair<Vector, Matrix> ridge_posterior(const Matrix& W, const Matrix& obs, const Matrix& cov, double s2)
{
    const Eigen::Index B = W.cols();
    const Matrix Pi = cov.inverse();
    Matrix Q = Matrix::Identity(2 * B, 2 * B) / s2;
    Vector b = Vector::Zero(2 * B);
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        Matrix A = Matrix::Zero(2, 2 * B);
        A.block(0, 0, 1, B) = W.row(i);
        A.block(1, B, 1, B) = W.row(i);
        Q += A.transpose() * Pi * A;
        b += A.transpose() * Pi * obs.row(i).transpose();
    }
    const Matrix V = Q.inverse();
    return {V * b, V};
}

MixtureErrorParams iso_error(double var, double angle = std::numbers::pi / 2)
{
    return MixtureErrorParams(0.5, SpdFactor::identity(2, var), angle);
}

// Random smooth path: a cubic spline with N(0, scale^2) coefficients.
Matrix spline_path(const BSplineBasis& basis, const std::vector<double>& times, double scale, Rng& rng,
                   Vector* alpha = nullptr)
{
    Vector a(2 * basis.num_basis);
    for (Eigen::Index i = 0; i < a.size(); ++i)
        a[i] = scale * std_normal(rng);
    const Matrix W = build_basis(times, basis);
    Matrix out(W.rows(), 2);
    out.col(0) = W * a.head(basis.num_basis);
    out.col(1) = W * a.tail(basis.num_basis);
    if (alpha)
        *alpha = a;
    return out;
}

PointSet to_points(const std::string& id, const std::vector<double>& times, const Matrix& xy)
{
    PointSet s;
    s.individual_id = id;
    s.times = times;
    for (Eigen::Index i = 0; i < xy.rows(); ++i)
        s.points.emplace_back(xy(i, 0), xy(i, 1));
    return s;
}

std::vector<double> linspace(double a, double b, int n)
{
    std::vector<double> t(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        t[std::size_t(i)] = a + (b - a) * double(i) / double(n - 1);
    return t;
}

FmmFit manual_fit(const BSplineBasis& basis, const RowMatrix& alpha, Eigen::Vector2d offset)
{
    FmmFit f;
    f.individual_id = "manual";
    f.basis = basis;
    f.offset = offset;
    f.alpha_draws = alpha;
    f.p_draws = Vector::Constant(alpha.rows(), 0.5);
    return f;
}

} // namespace

TEST_CASE("degree-zero basis is an indicator")
{
    const BSplineBasis b(0, (Vector(3) << 0.0, 1.0, 2.0).finished());
    CHECK(b.num_basis == 2);
    const Vector r = b.row(0.5);
    CHECK(r[0] == 1.0);
    CHECK(r[1] == 0.0);
    CHECK(b.row(1.5)[1] == 1.0);
}

TEST_CASE("clamped basis layout")
{
    const auto b = BSplineBasis::clamped(2.0, 12.0, 4);
    CHECK(b.num_basis == 4 + 3 + 1);
    CHECK(b.lower() == 2.0);
    CHECK(b.upper() == 12.0);
    CHECK(b.knots[4] == doctest::Approx(4.0));
    CHECK_THROWS_AS(b.row(12.5), DataError);
    CHECK_THROWS_AS(b.row(1.9), DataError);
    CHECK_THROWS_AS(BSplineBasis::clamped(1.0, 1.0, 3), DataError);
    CHECK_THROWS_AS(BSplineBasis(2, (Vector(4) << 0.0, 1.0, 2.0, 3.0).finished()), DataError);
    CHECK_THROWS_AS(BSplineBasis(1, (Vector(4) << 0.0, 2.0, 1.0, 3.0).finished()), DataError);
}

TEST_CASE("basis rows are a partition of unity")
{
    Rng rng(3);
    for (int degree : {0, 1, 2, 3, 5}) {
        const auto b = BSplineBasis::clamped(-3.0, 7.0, 6, degree);
        for (int i = 0; i < 200; ++i) {
            const double t = -3.0 + 10.0 * uniform01(rng);
            CHECK(std::abs(b.row(t).sum() - 1.0) < 1e-12);
        }
        CHECK(std::abs(b.row(7.0).sum() - 1.0) < 1e-12);
        CHECK(std::abs(b.row(-3.0).sum() - 1.0) < 1e-12);
        // knot values themselves
        for (Eigen::Index k = 0; k < b.knots.size(); ++k)
            CHECK(std::abs(b.row(b.knots[k]).sum() - 1.0) < 1e-12);
    }
}

TEST_CASE("cubic basis matches the textbook recursion on uneven knots")
{
    Rng rng(11);
    Vector k(12);
    k.head(4).setConstant(0.0);
    k.tail(4).setConstant(5.0);
    std::vector<double> inner{0.3, 1.7, 1.9, 3.6};
    for (int i = 0; i < 4; ++i)
        k[4 + i] = inner[std::size_t(i)];
    const BSplineBasis b(3, k);
    for (int trial = 0; trial < 300; ++trial) {
        const double t = 5.0 * uniform01(rng);
        const Vector r = b.row(t);
        for (int i = 0; i < b.num_basis; ++i)
            CHECK(std::abs(r[i] - cox_de_boor(k, i, 3, t)) < 1e-10);
    }
    // repeated interior knot
    k[6] = k[5];
    const BSplineBasis c(3, k);
    for (double t : {0.05, 1.7, 1.75, 2.5, 4.99}) {
        const Vector r = c.row(t);
        for (int i = 0; i < c.num_basis; ++i)
            CHECK(std::abs(r[i] - cox_de_boor(k, i, 3, t)) < 1e-10);
    }
}

TEST_CASE("build_basis stacks rows")
{
    const auto b = BSplineBasis::clamped(0.0, 1.0, 3);
    const std::vector<double> t{0.0, 0.1, 0.55, 1.0};
    const Matrix W = build_basis(t, b);
    for (std::size_t i = 0; i < t.size(); ++i)
        CHECK((W.row(Eigen::Index(i)).transpose() - b.row(t[i])).norm() == 0.0);
}

TEST_CASE("alpha conditional with every indicator on equals the ridge posterior")
{
    Rng rng(5);
    const auto basis = BSplineBasis::clamped(0.0, 4.0, 2);
    const std::vector<double> t{0.0, 0.7, 1.9, 2.2, 4.0};
    const Matrix W = build_basis(t, basis);
    Matrix obs(5, 2);
    for (Eigen::Index i = 0; i < obs.size(); ++i)
        obs.data()[i] = 2.0 * std_normal(rng);
    Matrix base(2, 2);
    base << 0.7, 0.2, 0.2, 0.4;
    const MixtureErrorParams err(1.0, SpdFactor(base), 0.6);
    const std::vector<unsigned char> z(5, 1);
    const std::vector<double> scale(5, 1.0);
    const auto c = fmm_alpha_conditional(W, obs, z, scale, err, 3.0);
    const auto [mean, cov] = ridge_posterior(W, obs, base, 3.0);
    CHECK((c.mean - mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((c.precision.inverse() - cov).cwiseAbs().maxCoeff() < 1e-8);

    SUBCASE("indicators off use the rotated covariance")
    {
        const std::vector<unsigned char> off(5, 0);
        const auto c2 = fmm_alpha_conditional(W, obs, off, scale, err, 3.0);
        const Matrix H = oracle::rotation(0.6);
        const auto [m2, v2] = ridge_posterior(W, obs, H * base * H.transpose(), 3.0);
        CHECK((c2.mean - m2).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((c2.precision.inverse() - v2).cwiseAbs().maxCoeff() < 1e-8);
    }
    SUBCASE("class scale multiplies the error covariance")
    {
        const std::vector<double> s4(5, 4.0);
        const auto c3 = fmm_alpha_conditional(W, obs, z, s4, err, 3.0);
        const auto [m3, v3] = ridge_posterior(W, obs, 4.0 * base, 3.0);
        CHECK((c3.mean - m3).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((c3.precision.inverse() - v3).cwiseAbs().maxCoeff() < 1e-8);
    }
    CHECK_THROWS_AS(fmm_alpha_conditional(W, obs.topRows(3), z, scale, err, 3.0), DataError);
    CHECK_THROWS_AS(fmm_alpha_conditional(W, obs, z, scale, err, 0.0), NumericalError);
}

TEST_CASE("indicator probability")
{
    Matrix base(2, 2);
    base << 2.0, 0.0, 0.0, 2.0;
    // isotropic base: rotation leaves it unchanged, so both densities agree everywhere
    const MixtureErrorParams same(0.5, SpdFactor(base), 1.1);
    Rng rng(2);
    for (double p : {0.1, 0.37, 0.5, 0.93}) {
        const Eigen::Vector2d r(std_normal(rng), std_normal(rng));
        CHECK(indicator_probability(r, p, same) == doctest::Approx(p).epsilon(1e-14));
    }
    // on the diagonal the X-pattern components have equal density
    const MixtureErrorParams x(0.3, SpdFactor((Matrix(2, 2) << 9.0, 0.0, 0.0, 1.0).finished()),
                               std::numbers::pi / 2);
    CHECK(indicator_probability({1.3, 1.3}, 0.3, x) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(indicator_probability({1.3, -1.3}, 0.3, x) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(indicator_probability({3.0, 0.0}, 0.5, x) > 0.5);
    CHECK(indicator_probability({0.0, 3.0}, 0.5, x) < 0.5);
    CHECK(indicator_probability({1.0, 0.0}, 0.0, x) == 0.0);
    CHECK(indicator_probability({1.0, 0.0}, 1.0, x) == 1.0);
    // against a direct density ratio
    const Eigen::Vector2d r(0.8, -1.4);
    const double n1 = std::exp(oracle::mvn_logpdf_naive(r, Vector::Zero(2), x.base_cov.matrix()));
    const double n2 = std::exp(oracle::mvn_logpdf_naive(r, Vector::Zero(2), x.rotated_cov.matrix()));
    CHECK(indicator_probability(r, 0.3, x) == doctest::Approx(0.3 * n1 / (0.3 * n1 + 0.7 * n2)).epsilon(1e-12));
}

TEST_CASE("fmm config validation")
{
    FmmConfig c;
    c.iterations = 10;
    c.burnin = 10;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.burnin = 2;
    c.fixed_p = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.fixed_p.reset();
    c.class_scale[2] = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.class_scale.clear();
    c.interior_knots = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("fit_fmm rejects unusable series")
{
    FmmConfig c;
    c.iterations = 20;
    c.burnin = 5;
    Rng rng(1);
    PointSet one{"one", {{0.0, 0.0}}, {0.0}, {}};
    CHECK_THROWS_AS(fit_fmm(one, c, rng), DataError);
    PointSet dup{"dup", {{0.0, 0.0}, {1.0, 1.0}, {2.0, 2.0}}, {0.0, 1.0, 1.0}, {}};
    CHECK_THROWS_AS(fit_fmm(dup, c, rng), DataError);
}

TEST_CASE("p fixed at one keeps every indicator on and samples the ridge posterior")
{
    Rng rng(21);
    const auto t = linspace(0.0, 10.0, 40);
    const auto basis = BSplineBasis::clamped(0.0, 10.0, 5);
    Matrix xy = spline_path(basis, t, 2.0, rng);
    for (Eigen::Index i = 0; i < xy.size(); ++i)
        xy.data()[i] += 0.5 * std_normal(rng);
    FmmConfig c;
    c.iterations = 8000;
    c.burnin = 500;
    c.interior_knots = 5;
    c.sigma_alpha_sq = 50.0;
    c.fixed_p = 1.0;
    c.error = MixtureErrorParams(1.0, SpdFactor::identity(2, 0.25), 0.4);
    Rng frng(4);
    const FmmFit fit = fit_fmm(to_points("p1", t, xy), c, frng);
    CHECK(fit.z_mean.minCoeff() == 1.0);
    CHECK(fit.p_draws.minCoeff() == 1.0);

    Matrix centred = xy;
    centred.col(0).array() -= fit.offset.x();
    centred.col(1).array() -= fit.offset.y();
    const auto [mean, cov] = ridge_posterior(build_basis(t, fit.basis), centred, 0.25 * Matrix::Identity(2, 2), 50.0);
    const Vector draw_mean = fit.alpha_draws.colwise().mean().transpose();
    const double K = double(fit.num_draws());
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        const double se = std::sqrt(cov(i, i) / K);
        CHECK(std::abs(draw_mean[i] - mean[i]) < 4.5 * se);
    }
}

TEST_CASE("identical mixture components collapse to ridge regression")
{
    Rng rng(8);
    const auto t = linspace(0.0, 20.0, 60);
    const auto basis = BSplineBasis::clamped(0.0, 20.0, 8);
    Matrix xy = spline_path(basis, t, 3.0, rng);
    for (Eigen::Index i = 0; i < xy.size(); ++i)
        xy.data()[i] += 0.8 * std_normal(rng);
    FmmConfig c;
    c.iterations = 6000;
    c.burnin = 500;
    c.interior_knots = 8;
    Matrix base(2, 2);
    base << 0.64, 0.1, 0.1, 0.3;
    c.error = MixtureErrorParams(0.5, SpdFactor(base), 0.0);
    Rng frng(6);
    const FmmFit fit = fit_fmm(to_points("c", t, xy), c, frng);

    Matrix centred = xy;
    centred.col(0).array() -= fit.offset.x();
    centred.col(1).array() -= fit.offset.y();
    const auto [mean, cov] = ridge_posterior(build_basis(t, fit.basis), centred, base, fit.sigma_alpha_sq);
    const RowMatrix& A = fit.alpha_draws;
    const Vector draw_mean = A.colwise().mean().transpose();
    const double K = double(fit.num_draws());
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        const double sd = std::sqrt(cov(i, i));
        CHECK(std::abs(draw_mean[i] - mean[i]) < 4.5 * sd / std::sqrt(K));
        const double draw_sd = std::sqrt((A.col(i).array() - draw_mean[i]).square().sum() / (K - 1.0));
        CHECK(std::abs(draw_sd / sd - 1.0) < 0.1);
    }
}

TEST_CASE("noiseless spline path is recovered")
{
    Rng rng(31);
    const auto t = linspace(0.0, 100.0, 200);
    const auto basis = BSplineBasis::clamped(0.0, 100.0, 10);
    const Matrix xy = spline_path(basis, t, 5.0, rng);
    FmmConfig c;
    c.iterations = 10000;
    c.burnin = 1000;
    c.interior_knots = 10;
    c.error = iso_error(1e-4);
    Rng frng(2);
    const FmmFit fit = fit_fmm(to_points("clean", t, xy), c, frng);
    const auto fine = linspace(0.0, 100.0, 1001);
    const Matrix truth = [&] {
        Matrix m(1001, 2);
        const Matrix W = build_basis(fine, basis);
        const Matrix Wt = build_basis(t, basis);
        // recover the generating coefficients exactly from the samples
        const Matrix coef = Wt.colPivHouseholderQr().solve(xy);
        m = W * coef;
        return m;
    }();
    const Matrix est = fit.mean_path(fine);
    CHECK((est - truth).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("X-pattern error: residual covariance matches the mixture moment")
{
    Rng rng(41);
    const int n = 2000;
    const auto t = linspace(0.0, 2000.0, n);
    const auto basis = BSplineBasis::clamped(0.0, 2000.0, 20);
    Matrix xy = spline_path(basis, t, 20.0, rng);
    const Matrix sigma = (Matrix(2, 2) << 9.0, 0.0, 0.0, 1.0).finished();
    const MixtureErrorParams err(0.5, SpdFactor(sigma), std::numbers::pi / 2);
    int base_count = 0;
    for (int i = 0; i < n; ++i) {
        const bool base = uniform01(rng) < 0.5;
        base_count += base;
        const Vector e = mvn_sample(rng, MvnParams(Vector::Zero(2), base ? err.base_cov : err.rotated_cov));
        xy.row(i) += e.transpose();
    }
    FmmConfig c;
    c.iterations = 1500;
    c.burnin = 300;
    c.interior_knots = 20;
    c.error = err;
    Rng frng(9);
    const FmmFit fit = fit_fmm(to_points("x", t, xy), c, frng);
    const Matrix resid = xy - fit.mean_path(t);
    const Matrix emp = resid.transpose() * resid / double(n);
    const Matrix H = oracle::rotation(std::numbers::pi / 2);
    const Matrix expected = 0.5 * sigma + 0.5 * H * sigma * H.transpose();
    CHECK(std::abs(emp(0, 0) / expected(0, 0) - 1.0) < 0.1);
    CHECK(std::abs(emp(1, 1) / expected(1, 1) - 1.0) < 0.1);
    CHECK(std::abs(emp(0, 1)) < 0.1 * expected(0, 0));
    CHECK(std::abs(fit.p_draws.mean() - double(base_count) / n) < 0.05);
}

TEST_CASE("imputation of a constant posterior gives a constant path")
{
    const auto basis = BSplineBasis::clamped(0.0, 10.0, 4);
    RowMatrix alpha(3, 2 * basis.num_basis);
    alpha.leftCols(basis.num_basis).setConstant(1.5);
    alpha.rightCols(basis.num_basis).setConstant(-2.0);
    const FmmFit fit = manual_fit(basis, alpha, {10.0, 20.0});
    const PathDraws p = impute_paths(fit, 0.0, 0.5, 21, 1);
    CHECK(p.num_paths() == 1);
    CHECK(p.grid_len == 21);
    for (Eigen::Index i = 0; i < p.grid_len; ++i) {
        CHECK(std::abs(p.position(0, i).x() - 11.5) < 1e-12);
        CHECK(std::abs(p.position(0, i).y() - 18.0) < 1e-12);
    }
}

TEST_CASE("imputed draws are basis evaluations of the retained coefficients")
{
    Rng rng(12);
    const auto basis = BSplineBasis::clamped(0.0, 6.0, 3);
    RowMatrix alpha(8, 2 * basis.num_basis);
    for (Eigen::Index i = 0; i < alpha.size(); ++i)
        alpha.data()[i] = std_normal(rng);
    const FmmFit fit = manual_fit(basis, alpha, {1.0, -1.0});
    const PathDraws p = impute_paths(fit, 0.0, 1.5, 5, 4);
    const Eigen::Index B = basis.num_basis;
    for (Eigen::Index m = 0; m < 4; ++m) {
        const Eigen::Index k = m * 8 / 4;
        for (Eigen::Index i = 0; i < 5; ++i) {
            const Vector w = basis.row(1.5 * double(i));
            CHECK(p.position(m, i).x() == doctest::Approx(w.dot(alpha.row(k).head(B)) + 1.0).epsilon(1e-12));
            CHECK(p.position(m, i).y() == doctest::Approx(w.dot(alpha.row(k).tail(B)) - 1.0).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(impute_paths(fit, 0.0, 1.0, 5, 9), ConfigError);
    CHECK_THROWS_AS(impute_paths(fit, 0.0, 1.0, 5, 0), ConfigError);
    CHECK_THROWS_AS(impute_paths(fit, -1.0, 1.0, 5, 2), DataError);
    CHECK_THROWS_AS(impute_paths(fit, 0.0, 1.0, 8, 2), DataError);
    // the last grid point may overshoot the knot range by rounding only
    CHECK_NOTHROW(impute_paths(fit, 0.0, 0.1, 61, 2));
}

TEST_CASE("imputation uncertainty grows away from the fixes")
{
    Rng rng(14);
    std::vector<double> t;
    for (int i = 0; i <= 20; ++i)
        t.push_back(0.5 * i);
    for (int i = 0; i <= 20; ++i)
        t.push_back(90.0 + 0.5 * i);
    Matrix xy(Eigen::Index(t.size()), 2);
    for (std::size_t i = 0; i < t.size(); ++i) {
        xy(Eigen::Index(i), 0) = 0.05 * t[i] + 0.3 * std_normal(rng);
        xy(Eigen::Index(i), 1) = -0.02 * t[i] + 0.3 * std_normal(rng);
    }
    FmmConfig c;
    c.iterations = 4000;
    c.burnin = 500;
    c.interior_knots = 10;
    c.error = iso_error(0.09);
    Rng frng(3);
    const FmmFit fit = fit_fmm(to_points("gap", t, xy), c, frng);
    const PathDraws p = impute_paths(fit, 0.0, 0.5, 201, 500);
    auto var_at = [&](Eigen::Index i) {
        Eigen::Vector2d m = Eigen::Vector2d::Zero();
        for (Eigen::Index k = 0; k < p.num_paths(); ++k)
            m += p.position(k, i);
        m /= double(p.num_paths());
        double v = 0.0;
        for (Eigen::Index k = 0; k < p.num_paths(); ++k)
            v += (p.position(k, i) - m).squaredNorm();
        return v / double(p.num_paths() - 1);
    };
    const double near = var_at(10);  // t = 5
    const double far = var_at(100);  // t = 50
    CHECK(near < far);
}

TEST_CASE("path draws round trip through files")
{
    const fixture::TempDir dir("paths");
    PathDraws p;
    p.individual_id = "lynx 7";
    p.grid_start = 0.25;
    p.grid_dt = 0.5;
    p.grid_len = 3;
    p.draws.resize(2, 6);
    p.draws << 1, 2, 3, 4, 5, 6, -1, -2, -3, -4, -5, std::numeric_limits<double>::denorm_min();
    save_path_draws(p, dir.path(), "paths_a");
    const PathDraws q = load_path_draws(dir.path(), "paths_a");
    CHECK(q.individual_id == p.individual_id);
    CHECK(q.grid_start == p.grid_start);
    CHECK(q.grid_dt == p.grid_dt);
    CHECK(q.grid_len == p.grid_len);
    CHECK(q.draws == p.draws);
    CHECK(q.time(2) == 1.25);

    std::filesystem::resize_file(dir.path() / "paths_a.bin", 40);
    CHECK_THROWS_AS(load_path_draws(dir.path(), "paths_a"), DataError);
    CHECK_THROWS_AS(load_path_draws(dir.path(), "nope"), DataError);

    p.draws(0, 0) = std::nan("");
    CHECK_THROWS_AS(save_path_draws(p, dir.path(), "bad"), DataError);
}
