#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "twostage/diagnostics.hpp"
#include "twostage/errors.hpp"
#include "twostage/stage2.hpp"

using namespace twostage;
using fixture::GaussianModel;
using fixture::iso_prior;

namespace {

HyperPriors scalar_hyper(double mu0, double var0, double s, double nu)
{
    return HyperPriors(MvnParams(Vector::Constant(1, mu0), SpdFactor::identity(1, var0)),
                       Matrix::Constant(1, 1, s), nu);
}

RowMatrix column(std::initializer_list<double> xs)
{
    RowMatrix m(Eigen::Index(xs.size()), 1);
    Eigen::Index i = 0;
    for (double x : xs)
        m(i++, 0) = x;
    return m;
}

// Exact stage-one posterior draws for y ~ N(beta, s2) with prior N(0, v0).
DrawMatrix exact_normal_pool(const std::string& id, double y, double s2, double v0, Eigen::Index K, Rng& rng)
{
    const double prec = 1.0 / s2 + 1.0 / v0;
    const double mean = (y / s2) / prec;
    DrawMatrix d;
    d.individual_id = id;
    d.p = 1;
    d.q = 0;
    d.draws.resize(K, 1);
    for (Eigen::Index k = 0; k < K; ++k)
        d.draws(k, 0) = mean + std_normal(rng) / std::sqrt(prec);
    d.acceptance_rate = 1.0;
    d.stage1_prior = iso_prior(1, v0);
    return d;
}

} // namespace

TEST_CASE("mu conditional matches grid integration")
{
    const RowMatrix betas = column({1.0, 3.0});
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 3.0);
    const auto cond = mu_full_conditional(betas, SpdFactor::identity(1, 1.0), hyper);

    const int n = 2001;
    const double lo = -8.0, hi = 12.0, h = (hi - lo) / (n - 1);
    double z = 0, m1 = 0, m2 = 0;
    for (int i = 0; i < n; ++i) {
        const double mu = lo + i * h;
        const double lw = -0.5 * ((1 - mu) * (1 - mu) + (3 - mu) * (3 - mu)) - 0.5 * mu * mu / 100.0;
        const double w = std::exp(lw) * ((i == 0 || i == n - 1) ? 0.5 : 1.0);
        z += w;
        m1 += w * mu;
        m2 += w * mu * mu;
    }
    const double gmean = m1 / z, gvar = m2 / z - gmean * gmean;
    CHECK(std::abs(cond.mean[0] - gmean) < 1e-3);
    CHECK(std::abs(cond.precision.inverse()(0, 0) - gvar) < 1e-3);
    CHECK(cond.mean[0] == doctest::Approx(4.0 / 2.01).epsilon(1e-12));
    CHECK(cond.precision.inverse()(0, 0) == doctest::Approx(1.0 / 2.01).epsilon(1e-12));
}

TEST_CASE("mu conditional without individuals is the prior")
{
    Vector m0(2);
    m0 << 1.5, -2.0;
    Matrix s0(2, 2);
    s0 << 2.0, 0.3, 0.3, 1.0;
    const HyperPriors hyper(MvnParams(m0, SpdFactor(s0)), Matrix::Identity(2, 2), 3.0);
    const auto cond = mu_full_conditional(RowMatrix(0, 2), SpdFactor::identity(2), hyper);
    CHECK((cond.mean - m0).norm() < 1e-12);
    CHECK((cond.precision.inverse() - s0).norm() < 1e-12);
}

TEST_CASE("mu conditional flat-prior limit is the sample mean")
{
    const auto cond =
        mu_full_conditional(column({1.0, 3.0}), SpdFactor::identity(1), scalar_hyper(0.0, 1e12, 1.0, 3.0));
    CHECK(std::abs(cond.mean[0] - 2.0) < 1e-6);
}

TEST_CASE("gibbs_update_mu draws have the conditional moments")
{
    const RowMatrix betas = column({1.0, 3.0});
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 3.0);
    Rng rng(4);
    const int n = 100000;
    double s = 0, ss = 0;
    for (int i = 0; i < n; ++i) {
        const double x = gibbs_update_mu(betas, SpdFactor::identity(1), hyper, rng)[0];
        s += x;
        ss += x * x;
    }
    const double mean = s / n, var = ss / n - mean * mean;
    CHECK(std::abs(mean - 4.0 / 2.01) < 4.0 * std::sqrt(1.0 / 2.01 / n));
    CHECK(std::abs(var / (1.0 / 2.01) - 1.0) < 0.02);
}

TEST_CASE("sigma_inv prior draws average to S inverse")
{
    Matrix s(2, 2);
    s << 2.0, 0.5, 0.5, 1.0;
    const HyperPriors hyper(iso_prior(2, 100.0), s, 3.0);
    Rng rng(12);
    Matrix mean = Matrix::Zero(2, 2);
    const int n = 100000;
    for (int i = 0; i < n; ++i)
        mean += gibbs_update_sigma_inv(RowMatrix(0, 2), Vector::Zero(2), hyper, rng).matrix();
    mean /= n;
    const Matrix target = s.inverse();
    CHECK((mean - target).cwiseAbs().maxCoeff() < 0.02 * target.cwiseAbs().maxCoeff());
    CHECK(std::abs(mean(0, 0) / target(0, 0) - 1.0) < 0.02);
    CHECK(std::abs(mean(1, 1) / target(1, 1) - 1.0) < 0.02);
}

TEST_CASE("sigma_inv conditional on three residuals")
{
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 3.0);
    const RowMatrix betas = column({1.0, -1.0, 2.0});
    const WishartParams w = sigma_inv_full_conditional(betas, Vector::Zero(1), hyper);
    CHECK(w.dof == doctest::Approx(6.0));
    CHECK(w.scale.matrix()(0, 0) == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
    Rng rng(8);
    double s = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i)
        s += gibbs_update_sigma_inv(betas, Vector::Zero(1), hyper, rng).matrix()(0, 0);
    CHECK(std::abs(s / n / (6.0 / 9.0) - 1.0) < 0.02);
}

TEST_CASE("zero scatter leaves the prior scale with more degrees of freedom")
{
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 3.0);
    RowMatrix betas = RowMatrix::Constant(50, 1, 0.7);
    const WishartParams w = sigma_inv_full_conditional(betas, Vector::Constant(1, 0.7), hyper);
    CHECK(w.dof == doctest::Approx(53.0));
    CHECK(w.dof * w.scale.matrix()(0, 0) == doctest::Approx(53.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("resampling ratio examples")
{
    const MvnParams prior = iso_prior(1, 100.0);
    const Vector one = Vector::Constant(1, 1.0), zero = Vector::Zero(1);

    SUBCASE("hand example")
    {
        // logN(1|1,1) + logN(0|0,100) - logN(0|1,1) - logN(1|0,100) = 0 + 0 + 0.5 + 0.005
        const double lr = log_resample_ratio(one, zero, one, SpdFactor::identity(1), prior);
        const double oracle = oracle::mvn_logpdf_naive(one, one, Matrix::Identity(1, 1)) +
                              oracle::mvn_logpdf_naive(zero, zero, Matrix::Constant(1, 1, 100.0)) -
                              oracle::mvn_logpdf_naive(zero, one, Matrix::Identity(1, 1)) -
                              oracle::mvn_logpdf_naive(one, zero, Matrix::Constant(1, 1, 100.0));
        CHECK(lr == doctest::Approx(0.505).epsilon(1e-12));
        CHECK(std::abs(lr - oracle) < 1e-12);
    }
    SUBCASE("candidate equal to current")
    {
        CHECK(log_resample_ratio(one, one, zero, SpdFactor::identity(1, 3.0), prior) == 0.0);
    }
    SUBCASE("population equal to stage-one prior")
    {
        Rng rng(2);
        for (int i = 0; i < 50; ++i) {
            const Vector a = Vector::Constant(1, 10 * std_normal(rng));
            const Vector b = Vector::Constant(1, 10 * std_normal(rng));
            CHECK(std::abs(log_resample_ratio(a, b, zero, SpdFactor::identity(1, 0.01), prior)) < 1e-12);
        }
    }
}

TEST_CASE("resampling ratio is antisymmetric")
{
    Rng rng(31);
    const MvnParams prior(Vector::Constant(2, 0.3), SpdFactor::identity(2, 50.0));
    Matrix prec(2, 2);
    prec << 2.0, 0.4, 0.4, 1.0;
    const SpdFactor pf(prec);
    for (int i = 0; i < 100; ++i) {
        Vector a(2), b(2), mu(2);
        for (int k = 0; k < 2; ++k) {
            a[k] = 3 * std_normal(rng);
            b[k] = 3 * std_normal(rng);
            mu[k] = std_normal(rng);
        }
        CHECK(log_resample_ratio(a, b, mu, pf, prior) == -log_resample_ratio(b, a, mu, pf, prior));
    }
}

TEST_CASE("mh_resample_beta accepts a repeat of the current row")
{
    DrawMatrix pool;
    pool.individual_id = "one";
    pool.p = 1;
    pool.draws = RowMatrix::Constant(1, 1, 0.4);
    pool.stage1_prior = iso_prior(1, 100.0);
    PopulationState st{Vector::Constant(1, 3.0), SpdFactor::identity(1, 0.1), RowMatrix::Constant(1, 1, 0.4), {0}};
    Rng rng(1);
    for (int i = 0; i < 100; ++i)
        CHECK(mh_resample_beta(0, pool, st, rng).accepted);
    pool.draws.resize(0, 1);
    CHECK_THROWS_AS(mh_resample_beta(0, pool, st, rng), DataError);
}

TEST_CASE("degenerate pools pin the betas")
{
    std::vector<DrawMatrix> pools;
    for (int j = 0; j < 2; ++j) {
        DrawMatrix d;
        d.individual_id = "d" + std::to_string(j);
        d.p = 1;
        d.draws = RowMatrix::Constant(1, 1, j == 0 ? 1.0 : 3.0);
        d.stage1_prior = iso_prior(1, 100.0);
        pools.push_back(d);
    }
    // Sigma^{-1} pinned near 1 by a very concentrated Wishart prior
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 1e8);
    Stage2Config c;
    c.iterations = 21000;
    c.burnin = 1000;
    c.seed = 3;
    const Stage2Output out = run_stage2(pools, hyper, c);
    CHECK((out.beta_draws.col(0).array() == 1.0).all());
    CHECK((out.beta_draws.col(1).array() == 3.0).all());
    const auto s = summarize(Matrix(out.mu_draws), {"mu"}).front();
    CHECK(std::abs(s.mean - 4.0 / 2.01) < 4.0 * s.sd / std::sqrt(s.ess));
    CHECK(std::abs(s.sd * s.sd / (1.0 / 2.01) - 1.0) < 0.05);
}

TEST_CASE("two-stage and full hierarchy agree on a conjugate problem")
{
    const std::vector<double> y{-0.8, 0.3, 1.9, 0.7, 1.2, -0.1, 2.4, 0.9};
    const double s2 = 0.25;
    Rng rng(44);
    std::vector<DrawMatrix> pools;
    std::vector<ModelPtr> models;
    for (std::size_t j = 0; j < y.size(); ++j) {
        pools.push_back(exact_normal_pool("i" + std::to_string(j), y[j], s2, 100.0, 20000, rng));
        models.push_back(std::make_shared<GaussianModel>("i" + std::to_string(j), Vector::Constant(1, y[j]),
                                                         std::sqrt(s2), iso_prior(1, 100.0)));
    }
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 3.0);
    Stage2Config c2;
    c2.iterations = 21000;
    c2.burnin = 1000;
    c2.seed = 5;
    FullConfig cf;
    cf.iterations = 25000;
    cf.burnin = 5000;
    cf.seed = 6;
    const auto a = summarize(Matrix(run_stage2(pools, hyper, c2).mu_draws), {"mu"}).front();
    const auto b = summarize(Matrix(run_full_hierarchy(models, hyper, cf).mu_draws), {"mu"}).front();
    const double se = std::sqrt(a.sd * a.sd / a.ess + b.sd * b.sd / b.ess);
    CHECK(std::abs(a.mean - b.mean) < 3.0 * se);
}

TEST_CASE("stage 2 is reproducible and independent of workers")
{
    Rng rng(7);
    std::vector<DrawMatrix> pools;
    for (int j = 0; j < 6; ++j)
        pools.push_back(exact_normal_pool("w" + std::to_string(j), 0.3 * j, 0.5, 100.0, 500, rng));
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 3.0);
    Stage2Config c;
    c.iterations = 3000;
    c.burnin = 500;
    c.seed = 11;
    const Stage2Output a = run_stage2(pools, hyper, c);
    c.workers = 3;
    const Stage2Output b = run_stage2(pools, hyper, c);
    CHECK(a == b);
    CHECK(a.mu_draws.rows() == c.retained());
    CHECK(a.sigma_inv_draws.cols() == 1);
}

TEST_CASE("initialisation at different pool rows gives the same mu summaries")
{
    Rng rng(70);
    std::vector<DrawMatrix> pools;
    for (int j = 0; j < 6; ++j)
        pools.push_back(exact_normal_pool("s" + std::to_string(j), 0.5 * j - 1.0, 0.3, 100.0, 5000, rng));
    const HyperPriors hyper = scalar_hyper(0.0, 100.0, 1.0, 3.0);
    Stage2Config c;
    c.iterations = 21000;
    c.burnin = 1000;
    c.seed = 2;
    c.initial_indices = std::vector<std::size_t>(6, 0);
    const auto a = summarize(Matrix(run_stage2(pools, hyper, c).mu_draws), {"mu"}).front();
    c.initial_indices = std::vector<std::size_t>(6, 4999);
    c.seed = 3;
    const auto b = summarize(Matrix(run_stage2(pools, hyper, c).mu_draws), {"mu"}).front();
    const double se = std::sqrt(a.sd * a.sd / a.ess + b.sd * b.sd / b.ess);
    CHECK(std::abs(a.mean - b.mean) < 3.5 * se);
}

TEST_CASE("single individual under flat hyperpriors matches the stage-one fit")
{
    const auto model = std::make_shared<GaussianModel>("solo", Vector::Constant(1, 1.3), 0.5, iso_prior(1, 100.0));
    // mu flat; Sigma_beta^{-1} pinned near 1e-6 so the population layer is flat too
    const HyperPriors hyper = scalar_hyper(0.0, 1e10, 1e6, 1e6);
    FullConfig cf;
    cf.iterations = 45000;
    cf.burnin = 5000;
    cf.seed = 8;
    const auto full = summarize(Matrix(run_full_hierarchy({model}, hyper, cf).beta_draws), {"b"}).front();
    ChainConfig c1;
    c1.iterations = 45000;
    c1.burnin = 5000;
    Rng rng = stage1_stream(9, 0);
    const auto solo = summarize(Matrix(adaptive_rwmh_fit(*model, c1, rng).draws), {"b"}).front();
    const double se = std::sqrt(full.sd * full.sd / full.ess + solo.sd * solo.sd / solo.ess);
    CHECK(std::abs(full.mean - solo.mean) < 3.5 * se);
    INFO(full.sd, " ", solo.sd, " ", full.mean, " ", solo.mean, " ", full.ess, " ", solo.ess);
    CHECK(std::abs(full.sd / solo.sd - 1.0) < 0.1);
}

TEST_CASE("stage 2 output round-trips and rejects inconsistent pools")
{
    Rng rng(1);
    std::vector<DrawMatrix> pools;
    for (int j = 0; j < 3; ++j)
        pools.push_back(exact_normal_pool("r" + std::to_string(j), 0.1 * j, 0.5, 100.0, 200, rng));
    Stage2Config c;
    c.iterations = 700;
    c.burnin = 100;
    const Stage2Output out = run_stage2(pools, scalar_hyper(0.0, 100.0, 1.0, 3.0), c);
    fixture::TempDir dir("s2");
    save_stage2(out, dir.path());
    CHECK(load_stage2(dir.path()) == out);
    const auto names = out.parameter_names();
    CHECK(names.front() == "mu[0]");
    CHECK(names.back() == "beta[r2,0]");

    DrawMatrix wide = pools[0];
    wide.p = 2;
    wide.draws = RowMatrix::Zero(5, 2);
    wide.stage1_prior = iso_prior(2, 100.0);
    pools.push_back(wide);
    CHECK_THROWS(run_stage2(pools, scalar_hyper(0.0, 100.0, 1.0, 3.0), c));
}
