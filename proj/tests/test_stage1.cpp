#include <cmath>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "twostage/diagnostics.hpp"
#include "twostage/errors.hpp"
#include "twostage/io.hpp"
#include "twostage/stage1.hpp"

using namespace twostage;
using fixture::GaussianModel;
using fixture::iso_prior;
using fixture::PoissonModel;

namespace {

ChainConfig standard_config(std::uint64_t seed = 1)
{
    ChainConfig c;
    c.iterations = 20000;
    c.burnin = 5000;
    c.seed = seed;
    return c;
}

std::vector<ModelPtr> gaussian_models(int J)
{
    std::vector<ModelPtr> models;
    for (int j = 0; j < J; ++j) {
        Vector c(2);
        c << 0.1 * j, -0.2 * j;
        models.push_back(std::make_shared<GaussianModel>("g" + std::to_string(j), c, 0.5, iso_prior(2, 100.0)));
    }
    return models;
}

} // namespace

TEST_CASE("default acceptance targets")
{
    CHECK(default_target_acceptance(1) == doctest::Approx(0.44));
    CHECK(default_target_acceptance(5) == doctest::Approx(0.234));
    CHECK(default_target_acceptance(9) == doctest::Approx(0.234));
    CHECK(default_target_acceptance(3) == doctest::Approx(0.44 + (0.234 - 0.44) * 0.5));
}

TEST_CASE("chain config validation")
{
    ChainConfig c;
    c.iterations = 100;
    c.burnin = 100;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.burnin = 10;
    c.thin = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.thin = 1;
    c.target_acceptance = 1.2;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("adaptive sampler recovers a standard normal target")
{
    const GaussianModel m("n", Vector::Zero(1), 1.0, iso_prior(1, 1e4));
    Rng rng = stage1_stream(17, 0);
    const DrawMatrix d = adaptive_rwmh_fit(m, standard_config(), rng);
    REQUIRE(d.size() == 15000);
    const Vector x = d.draws.col(0);
    const double mean = x.mean();
    const double var = (x.array() - mean).square().sum() / double(x.size() - 1);
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.1);
    CHECK(std::abs(d.acceptance_rate - 0.44) < 0.1);
}

TEST_CASE("acceptance after adaptation lies near the target in several dimensions")
{
    for (Eigen::Index p : {1, 2, 3, 5, 7}) {
        const GaussianModel m("n", Vector::Zero(p), 0.3, iso_prior(p, 100.0));
        Rng rng = stage1_stream(3, std::size_t(p));
        const DrawMatrix d = adaptive_rwmh_fit(m, standard_config(), rng);
        const double target = default_target_acceptance(p);
        CHECK(d.acceptance_rate >= target - 0.15);
        CHECK(d.acceptance_rate <= target + 0.15);
    }
}

TEST_CASE("poisson model posterior matches grid integration")
{
    const std::vector<int> y{3, 1, 4, 1, 5, 2, 0, 3};
    const MvnParams prior = iso_prior(1, 1.0);
    const PoissonModel m("pois", y, prior);

    // 2,001-point trapezoid over [-6, 6]
    const int n = 2001;
    const double lo = -6.0, hi = 6.0, h = (hi - lo) / (n - 1);
    std::vector<double> logw(n);
    double mx = -1e300;
    for (int i = 0; i < n; ++i) {
        const double b = lo + i * h;
        double ll = -0.5 * b * b;
        for (int v : y)
            ll += v * b - std::exp(b);
        logw[std::size_t(i)] = ll;
        mx = std::max(mx, ll);
    }
    double z = 0.0, m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double w = std::exp(logw[std::size_t(i)] - mx) * ((i == 0 || i == n - 1) ? 0.5 : 1.0);
        const double b = lo + i * h;
        z += w;
        m1 += w * b;
        m2 += w * b * b;
    }
    const double post_mean = m1 / z;
    const double post_sd = std::sqrt(m2 / z - post_mean * post_mean);

    Rng rng = stage1_stream(5, 0);
    const DrawMatrix d = adaptive_rwmh_fit(m, standard_config(), rng);
    const Vector x = d.draws.col(0);
    const auto s = summarize(Matrix(x), {"b"}).front();
    const double mcse = s.sd / std::sqrt(s.ess);
    CHECK(std::abs(s.mean - post_mean) < 3.0 * mcse);
    // sd of the sd estimate is roughly sd / sqrt(2 ess)
    CHECK(std::abs(s.sd - post_sd) < 3.0 * post_sd / std::sqrt(2.0 * s.ess));
}

TEST_CASE("fixed seed gives bit-identical draws")
{
    const GaussianModel m("n", Vector::Zero(2), 1.0, iso_prior(2, 10.0));
    ChainConfig c = standard_config();
    c.iterations = 3000;
    c.burnin = 1000;
    Rng a = stage1_stream(9, 2), b = stage1_stream(9, 2);
    CHECK(adaptive_rwmh_fit(m, c, a) == adaptive_rwmh_fit(m, c, b));
}

TEST_CASE("thinning keeps every thin-th post burn-in draw")
{
    const GaussianModel m("n", Vector::Zero(1), 1.0, iso_prior(1, 10.0));
    ChainConfig c = standard_config();
    c.iterations = 2000;
    c.burnin = 500;
    c.thin = 3;
    Rng rng = stage1_stream(1, 0);
    CHECK(adaptive_rwmh_fit(m, c, rng).size() == c.retained());
}

TEST_CASE("non-finite initial log posterior is an error")
{
    class Broken final : public IndividualModel {
    public:
        std::string id() const override { return "bad"; }
        Eigen::Index coef_dim() const override { return 1; }
        const MvnParams& beta_prior() const override { return prior_; }
        double log_likelihood(const Vector&, const Vector&, std::size_t) const override
        {
            return -std::numeric_limits<double>::infinity();
        }
        MvnParams prior_ = iso_prior(1, 1.0);
    } broken;
    Rng rng(1);
    ChainConfig c = standard_config();
    c.iterations = 100;
    c.burnin = 10;
    CHECK_THROWS_AS(adaptive_rwmh_fit(broken, c, rng), NumericalError);
}

TEST_CASE("run_parallel is independent of worker count")
{
    ChainConfig c = standard_config(4);
    c.iterations = 2000;
    c.burnin = 500;
    const auto models = gaussian_models(20);
    const auto one = run_parallel(models, c, 1);
    const auto four = run_parallel(models, c, 4);
    REQUIRE(one.size() == 20);
    for (std::size_t j = 0; j < one.size(); ++j)
        CHECK(one[j] == four[j]);
    CHECK_THROWS_AS(run_parallel({}, c, 2), DataError);
}

TEST_CASE("draw pools round-trip through files")
{
    ChainConfig c = standard_config(6);
    c.iterations = 1500;
    c.burnin = 500;
    const auto pools = run_parallel(gaussian_models(3), c, 2);
    fixture::TempDir dir("pools");
    save_draws(pools, dir.path());
    const auto back = load_draws(dir.path());
    REQUIRE(back.size() == 3);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(back[j] == pools[j]);
        CHECK(back[j].stage1_prior.covariance.lower() == pools[j].stage1_prior.covariance.lower());
    }
    const auto manifest = io::read_json(dir.path() / "pool_000.json");
    for (const char* key : {"individual_id", "p", "q", "K", "seed", "burnin", "thin", "acceptance_rate",
                            "prior_mean", "prior_cov"})
        CHECK(manifest.contains(key));
}

TEST_CASE("truncated payload names the individual")
{
    ChainConfig c = standard_config(6);
    c.iterations = 600;
    c.burnin = 100;
    const auto pools = run_parallel(gaussian_models(3), c, 1);
    fixture::TempDir dir("trunc");
    save_draws(pools, dir.path());
    std::filesystem::resize_file(dir.path() / "pool_001.bin", 100);
    try {
        load_draws(dir.path());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("'g1'") != std::string::npos);
    }
}

TEST_CASE("manifest K disagreeing with payload is an error")
{
    ChainConfig c = standard_config(6);
    c.iterations = 600;
    c.burnin = 100;
    const auto pools = run_parallel(gaussian_models(2), c, 1);
    fixture::TempDir dir("kbad");
    save_draws(pools, dir.path());
    auto m = io::read_json(dir.path() / "pool_000.json");
    m["K"] = m["K"].get<long long>() + 7;
    io::write_json(dir.path() / "pool_000.json", m);
    CHECK_THROWS_AS(load_draws(dir.path()), DataError);
}

TEST_CASE("missing pool file is named")
{
    ChainConfig c = standard_config(6);
    c.iterations = 600;
    c.burnin = 100;
    fixture::TempDir dir("missing");
    save_draws(run_parallel(gaussian_models(2), c, 1), dir.path());
    std::filesystem::remove(dir.path() / "pool_001.json");
    try {
        load_draws(dir.path());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("pool_001.json") != std::string::npos);
    }
}
