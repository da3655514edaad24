#include "twostage/stage2.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "twostage/io.hpp"
#include "twostage/parallel.hpp"

namespace twostage {

HyperPriors::HyperPriors(MvnParams mu_prior, const Matrix& s, double nu) : mu0(std::move(mu_prior))
{
    if (s.rows() != mu0.dim() || s.cols() != mu0.dim())
        throw ConfigError("hyperprior S must be " + std::to_string(mu0.dim()) + "x" +
                          std::to_string(mu0.dim()));
    if (!(nu > 0.0))
        throw ConfigError("hyperprior nu must be positive");
    scale_inverse = s * nu;
    const SpdFactor sv(scale_inverse);
    wishart = WishartParams(SpdFactor(sv.inverse()), nu);
}

HyperPriors HyperPriors::defaults(Eigen::Index p)
{
    MvnParams mu0(Vector::Zero(p), SpdFactor::identity(p, 100.0));
    return HyperPriors(std::move(mu0), Matrix::Identity(p, p), std::max(3.0, double(p)));
}

std::vector<std::string> Stage2Output::parameter_names() const
{
    std::vector<std::string> names;
    for (Eigen::Index k = 0; k < p; ++k)
        names.push_back("mu[" + std::to_string(k) + "]");
    for (Eigen::Index a = 0; a < p; ++a)
        for (Eigen::Index b = 0; b < p; ++b)
            names.push_back("sigma_inv[" + std::to_string(a) + "," + std::to_string(b) + "]");
    if (has_betas())
        for (const auto& id : individual_ids)
            for (Eigen::Index k = 0; k < p; ++k)
                names.push_back("beta[" + id + "," + std::to_string(k) + "]");
    return names;
}

RowMatrix Stage2Output::draw_table() const
{
    const Eigen::Index width = mu_draws.cols() + sigma_inv_draws.cols() + beta_draws.cols();
    RowMatrix t(num_draws(), width);
    t.leftCols(mu_draws.cols()) = mu_draws;
    t.middleCols(mu_draws.cols(), sigma_inv_draws.cols()) = sigma_inv_draws;
    if (has_betas())
        t.rightCols(beta_draws.cols()) = beta_draws;
    return t;
}

bool operator==(const Stage2Output& a, const Stage2Output& b)
{
    auto same = [](const auto& x, const auto& y) {
        return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    };
    return a.individual_ids == b.individual_ids && a.p == b.p && same(a.mu_draws, b.mu_draws) &&
           same(a.sigma_inv_draws, b.sigma_inv_draws) && same(a.beta_draws, b.beta_draws) &&
           same(a.acceptance_rates, b.acceptance_rates);
}

void Stage2Config::validate() const
{
    if (iterations <= 0 || burnin < 0 || burnin >= iterations)
        throw ConfigError("stage2: need 0 <= burnin < iterations");
    if (thin <= 0 || retained() < 1)
        throw ConfigError("stage2: thin must be positive and leave retained draws");
    if (workers < 1)
        throw ConfigError("stage2: workers must be positive");
}

void FullConfig::validate() const
{
    if (iterations <= 0 || burnin < 0 || burnin >= iterations)
        throw ConfigError("full: need 0 <= burnin < iterations");
    if (thin <= 0 || retained() < 1)
        throw ConfigError("full: thin must be positive and leave retained draws");
    if (workers < 1)
        throw ConfigError("full: workers must be positive");
    if (target_acceptance && !(*target_acceptance > 0.0 && *target_acceptance < 1.0))
        throw ConfigError("full: target_acceptance must lie in (0,1)");
}

MuConditional mu_full_conditional(const RowMatrix& betas, const SpdFactor& sigma_inv,
                                  const HyperPriors& hyper)
{
    const Eigen::Index p = hyper.dim();
    if (sigma_inv.dim() != p || (betas.rows() > 0 && betas.cols() != p))
        throw NumericalError("gibbs_update_mu: dimension mismatch");
    const Matrix prec_beta = sigma_inv.matrix();
    const Matrix prec0 = hyper.mu0.covariance.inverse();
    const double j = double(betas.rows());
    Matrix a = j * prec_beta + prec0;
    a = 0.5 * (a + a.transpose()).eval();
    Vector sum = Vector::Zero(p);
    if (betas.rows() > 0)
        sum = betas.colwise().sum().transpose();
    const Vector b = prec_beta * sum + prec0 * hyper.mu0.mean;
    MuConditional c{Vector(), SpdFactor(a)};
    c.mean = c.precision.solve(b);
    return c;
}

Vector gibbs_update_mu(const RowMatrix& betas, const SpdFactor& sigma_inv,
                       const HyperPriors& hyper, Rng& rng)
{
    const MuConditional c = mu_full_conditional(betas, sigma_inv, hyper);
    return mvn_sample_precision(rng, c.mean, c.precision);
}

WishartParams sigma_inv_full_conditional(const RowMatrix& betas, const Vector& mu_beta,
                                         const HyperPriors& hyper)
{
    const Eigen::Index p = hyper.dim();
    if (mu_beta.size() != p || (betas.rows() > 0 && betas.cols() != p))
        throw NumericalError("gibbs_update_sigma_inv: dimension mismatch");
    Matrix scatter = hyper.scale_inverse;
    for (Eigen::Index j = 0; j < betas.rows(); ++j) {
        const Vector r = betas.row(j).transpose() - mu_beta;
        scatter.noalias() += r * r.transpose();
    }
    scatter = 0.5 * (scatter + scatter.transpose()).eval();
    const SpdFactor sf(scatter);
    Matrix scale = sf.inverse();
    scale = 0.5 * (scale + scale.transpose()).eval();
    return WishartParams(SpdFactor(scale), hyper.wishart.dof + double(betas.rows()));
}

SpdFactor gibbs_update_sigma_inv(const RowMatrix& betas, const Vector& mu_beta,
                                 const HyperPriors& hyper, Rng& rng)
{
    return wishart_sample(rng, sigma_inv_full_conditional(betas, mu_beta, hyper));
}

double log_resample_ratio(const Vector& candidate, const Vector& current, const Vector& mu_beta,
                          const SpdFactor& sigma_inv, const MvnParams& stage1_prior)
{
    return (mvn_logpdf_precision(candidate, mu_beta, sigma_inv) + mvn_logpdf(current, stage1_prior)) -
           (mvn_logpdf_precision(current, mu_beta, sigma_inv) + mvn_logpdf(candidate, stage1_prior));
}

ResampleResult mh_resample_beta(std::size_t j, const DrawMatrix& pool,
                                const PopulationState& state, Rng& rng)
{
    if (pool.size() == 0)
        throw DataError("mh_resample_beta: empty pool for individual '" + pool.individual_id + "'");
    if (pool.stage1_prior.dim() != pool.p)
        throw DataError("mh_resample_beta: pool '" + pool.individual_id + "' lacks its stage-one prior");
    const Vector current = state.betas.row(static_cast<Eigen::Index>(j)).transpose();
    const std::size_t idx = uniform_index(rng, static_cast<std::size_t>(pool.size()));
    const Vector candidate = pool.beta(static_cast<Eigen::Index>(idx));
    const double log_r =
        log_resample_ratio(candidate, current, state.mu_beta, state.sigma_inv, pool.stage1_prior);
    const double u = uniform01(rng);
    if (std::log(u) < log_r)
        return {candidate, idx, true};
    return {current, state.pool_indices[j], false};
}

namespace {

SpdFactor wishart_prior_mean(const HyperPriors& hyper)
{
    Matrix m = hyper.wishart.dof * hyper.wishart.scale.matrix();
    m = 0.5 * (m + m.transpose()).eval();
    return SpdFactor(m);
}

void store_sigma(RowMatrix& dst, Eigen::Index row, const SpdFactor& s)
{
    const Matrix m = s.matrix();
    const Eigen::Index p = m.rows();
    for (Eigen::Index a = 0; a < p; ++a)
        for (Eigen::Index b = 0; b < p; ++b)
            dst(row, a * p + b) = m(a, b);
}

} // namespace

Stage2Output run_stage2(const std::vector<DrawMatrix>& pools, const HyperPriors& hyper,
                        const Stage2Config& config)
{
    config.validate();
    if (pools.empty())
        throw DataError("run_stage2: no pools");
    const Eigen::Index p = hyper.dim();
    const std::size_t J = pools.size();
    for (const auto& pool : pools) {
        pool.validate();
        if (pool.p != p)
            throw DataError("run_stage2: pool '" + pool.individual_id + "' has p=" +
                            std::to_string(pool.p) + ", hyperpriors have p=" + std::to_string(p));
    }
    if (config.initial_indices && config.initial_indices->size() != J)
        throw ConfigError("run_stage2: initial_indices length differs from number of pools");

    Rng pop_rng = make_stream(config.seed, StreamTag::stage2_population);
    std::vector<Rng> ind_rng;
    ind_rng.reserve(J);
    for (std::size_t j = 0; j < J; ++j)
        ind_rng.push_back(make_stream(config.seed, StreamTag::stage2_individual, {j}));

    PopulationState state;
    state.betas.resize(static_cast<Eigen::Index>(J), p);
    state.pool_indices.resize(J);
    for (std::size_t j = 0; j < J; ++j) {
        const auto k = static_cast<std::size_t>(pools[j].size());
        std::size_t idx = config.initial_indices ? (*config.initial_indices)[j]
                                                 : uniform_index(ind_rng[j], k);
        if (idx >= k)
            throw ConfigError("run_stage2: initial index out of range for '" + pools[j].individual_id + "'");
        state.pool_indices[j] = idx;
        state.betas.row(static_cast<Eigen::Index>(j)) = pools[j].beta(static_cast<Eigen::Index>(idx)).transpose();
    }
    state.mu_beta = state.betas.colwise().mean().transpose();
    state.sigma_inv = wishart_prior_mean(hyper);

    Stage2Output out;
    for (const auto& pool : pools)
        out.individual_ids.push_back(pool.individual_id);
    out.p = p;
    const long K = config.retained();
    out.mu_draws.resize(K, p);
    out.sigma_inv_draws.resize(K, p * p);
    if (config.store_betas)
        out.beta_draws.resize(K, static_cast<Eigen::Index>(J) * p);

    std::vector<long> accepted(J, 0);
    std::vector<ResampleResult> results(J);
    WorkerPool workers(std::min<int>(config.workers, static_cast<int>(J)));
    Eigen::Index row = 0;
    for (long k = 1; k <= config.iterations; ++k) {
        workers.run(J, [&](std::size_t j) { results[j] = mh_resample_beta(j, pools[j], state, ind_rng[j]); });
        for (std::size_t j = 0; j < J; ++j) {
            state.betas.row(static_cast<Eigen::Index>(j)) = results[j].beta.transpose();
            state.pool_indices[j] = results[j].pool_index;
            if (k > config.burnin && results[j].accepted)
                ++accepted[j];
        }
        state.mu_beta = gibbs_update_mu(state.betas, state.sigma_inv, hyper, pop_rng);
        state.sigma_inv = gibbs_update_sigma_inv(state.betas, state.mu_beta, hyper, pop_rng);

        if (k > config.burnin && (k - config.burnin) % config.thin == 0 && row < K) {
            out.mu_draws.row(row) = state.mu_beta.transpose();
            store_sigma(out.sigma_inv_draws, row, state.sigma_inv);
            if (config.store_betas)
                out.beta_draws.row(row) = Eigen::Map<const RowMatrix>(state.betas.data(), 1, state.betas.size());
            ++row;
        }
    }

    out.acceptance_rates.resize(static_cast<Eigen::Index>(J));
    const double n_after = double(config.iterations - config.burnin);
    for (std::size_t j = 0; j < J; ++j) {
        out.acceptance_rates[static_cast<Eigen::Index>(j)] = double(accepted[j]) / n_after;
        if (out.acceptance_rates[static_cast<Eigen::Index>(j)] < config.low_acceptance_warning)
            std::clog << "warning: stage-two acceptance for individual '" << pools[j].individual_id
                      << "' is " << out.acceptance_rates[static_cast<Eigen::Index>(j)]
                      << "; its stage-one pool may be too small or too diffuse\n";
    }
    return out;
}

namespace {

struct ChainSlot {
    Vector beta;
    Vector theta;
    double loglik = 0.0;
    double log_scale = 0.0;
    std::size_t dataset = 0;
    long accepted = 0;
    Rng rng;
    Rng pick_rng;
};

double safe_loglik(const IndividualModel& m, const Vector& beta, const Vector& theta, std::size_t ds)
{
    const double ll = m.log_likelihood(beta, theta, ds);
    return std::isnan(ll) ? -std::numeric_limits<double>::infinity() : ll;
}

} // namespace

Stage2Output run_full_hierarchy(const std::vector<ModelPtr>& models, const HyperPriors& hyper,
                                const FullConfig& config)
{
    config.validate();
    if (models.empty())
        throw DataError("run_full_hierarchy: no individual models");
    const Eigen::Index p = hyper.dim();
    const std::size_t J = models.size();
    for (const auto& m : models)
        if (m->coef_dim() != p)
            throw DataError("run_full_hierarchy: model '" + m->id() + "' has p=" +
                            std::to_string(m->coef_dim()) + ", hyperpriors have p=" + std::to_string(p));

    Rng pop_rng = make_stream(config.seed, StreamTag::full_population);
    std::vector<ChainSlot> slots(J);
    PopulationState state;
    state.betas.resize(static_cast<Eigen::Index>(J), p);
    for (std::size_t j = 0; j < J; ++j) {
        auto& s = slots[j];
        const IndividualModel& m = *models[j];
        s.rng = make_stream(config.seed, StreamTag::full_individual, {j});
        s.pick_rng = spawn(s.rng);
        s.beta = mvn_sample(s.rng, m.beta_prior());
        s.theta = m.sample_theta_prior(s.rng);
        s.log_scale = config.initial_log_scale;
        s.dataset = m.num_datasets() > 1 ? uniform_index(s.pick_rng, m.num_datasets()) : 0;
        s.loglik = safe_loglik(m, s.beta, s.theta, s.dataset);
        if (!std::isfinite(s.loglik))
            throw NumericalError("model '" + m.id() + "': non-finite initial log-likelihood");
        state.betas.row(static_cast<Eigen::Index>(j)) = s.beta.transpose();
    }
    state.mu_beta = state.betas.colwise().mean().transpose();
    state.sigma_inv = wishart_prior_mean(hyper);

    Stage2Output out;
    for (const auto& m : models)
        out.individual_ids.push_back(m->id());
    out.p = p;
    const long K = config.retained();
    out.mu_draws.resize(K, p);
    out.sigma_inv_draws.resize(K, p * p);
    if (config.store_betas)
        out.beta_draws.resize(K, static_cast<Eigen::Index>(J) * p);

    WorkerPool workers(std::min<int>(config.workers, static_cast<int>(J)));
    Eigen::Index row = 0;
    for (long k = 1; k <= config.iterations; ++k) {
        workers.run(J, [&](std::size_t j) {
            auto& s = slots[j];
            const IndividualModel& m = *models[j];
            if (m.num_datasets() > 1) {
                const std::size_t next = uniform_index(s.pick_rng, m.num_datasets());
                if (next != s.dataset) {
                    s.dataset = next;
                    s.loglik = safe_loglik(m, s.beta, s.theta, s.dataset);
                }
            }
            const Eigen::Index q = s.theta.size();
            const double step = std::exp(0.5 * s.log_scale);
            Vector beta_star(p);
            for (Eigen::Index i = 0; i < p; ++i)
                beta_star[i] = s.beta[i] + step * std_normal(s.rng);
            Vector theta_star(q);
            for (Eigen::Index i = 0; i < q; ++i)
                theta_star[i] = s.theta[i] + step * std_normal(s.rng);

            const double ll_star = safe_loglik(m, beta_star, theta_star, s.dataset);
            double alpha = 0.0;
            if (std::isfinite(ll_star)) {
                const double log_r =
                    (ll_star + mvn_logpdf_precision(beta_star, state.mu_beta, state.sigma_inv) +
                     m.log_prior_theta(theta_star)) -
                    (s.loglik + mvn_logpdf_precision(s.beta, state.mu_beta, state.sigma_inv) +
                     m.log_prior_theta(s.theta));
                alpha = std::min(1.0, std::exp(log_r));
            }
            const bool accept = uniform01(s.rng) < alpha;
            if (accept) {
                s.beta = beta_star;
                s.theta = theta_star;
                s.loglik = ll_star;
            }
            if (k <= config.burnin) {
                const double target = config.target_acceptance.value_or(default_target_acceptance(p + q));
                s.log_scale += std::pow(double(k), -0.6) * (alpha - target);
            } else if (accept) {
                ++s.accepted;
            }
        });
        for (std::size_t j = 0; j < J; ++j)
            state.betas.row(static_cast<Eigen::Index>(j)) = slots[j].beta.transpose();
        state.mu_beta = gibbs_update_mu(state.betas, state.sigma_inv, hyper, pop_rng);
        state.sigma_inv = gibbs_update_sigma_inv(state.betas, state.mu_beta, hyper, pop_rng);

        if (k > config.burnin && (k - config.burnin) % config.thin == 0 && row < K) {
            out.mu_draws.row(row) = state.mu_beta.transpose();
            store_sigma(out.sigma_inv_draws, row, state.sigma_inv);
            if (config.store_betas)
                out.beta_draws.row(row) = Eigen::Map<const RowMatrix>(state.betas.data(), 1, state.betas.size());
            ++row;
        }
    }
    out.acceptance_rates.resize(static_cast<Eigen::Index>(J));
    for (std::size_t j = 0; j < J; ++j)
        out.acceptance_rates[static_cast<Eigen::Index>(j)] =
            double(slots[j].accepted) / double(config.iterations - config.burnin);
    return out;
}

void save_stage2(const Stage2Output& out, const std::filesystem::path& dir, const std::string& stem)
{
    io::ensure_directory(dir);
    const Eigen::Index K = out.num_draws();
    const RowMatrix table = out.draw_table();
    io::json m;
    m["kind"] = "stage2";
    m["individual_ids"] = out.individual_ids;
    m["p"] = out.p;
    m["J"] = out.num_individuals();
    m["K"] = K;
    m["has_betas"] = out.has_betas();
    m["columns"] = table.cols();
    m["acceptance_rates"] = io::to_json(out.acceptance_rates);
    m["parameters"] = out.parameter_names();
    m["payload"] = stem + ".bin";
    io::write_json(dir / (stem + ".json"), m);
    io::write_f64(dir / (stem + ".bin"),
                  std::span<const double>(table.data(), static_cast<std::size_t>(table.size())));
}

Stage2Output load_stage2(const std::filesystem::path& dir, const std::string& stem)
{
    const auto manifest = dir / (stem + ".json");
    const io::json m = io::read_json(manifest);
    Stage2Output out;
    Eigen::Index J = 0, K = 0, cols = 0;
    bool has_betas = false;
    std::string payload;
    try {
        out.individual_ids = m.at("individual_ids").get<std::vector<std::string>>();
        out.p = m.at("p").get<Eigen::Index>();
        J = m.at("J").get<Eigen::Index>();
        K = m.at("K").get<Eigen::Index>();
        has_betas = m.at("has_betas").get<bool>();
        cols = m.at("columns").get<Eigen::Index>();
        payload = m.at("payload").get<std::string>();
    } catch (const io::json::exception& e) {
        throw DataError("malformed stage-two manifest " + manifest.string() + ": " + e.what());
    }
    const Eigen::Index p = out.p;
    const Eigen::Index expected = p + p * p + (has_betas ? J * p : 0);
    if (p < 1 || K < 1 || J != static_cast<Eigen::Index>(out.individual_ids.size()) || cols != expected)
        throw DataError("stage-two manifest " + manifest.string() + ": inconsistent p/J/K/columns");
    out.acceptance_rates = io::vector_from_json(m, "acceptance_rates");
    if (out.acceptance_rates.size() != J)
        throw DataError("stage-two manifest " + manifest.string() + ": acceptance_rates length differs from J");
    const auto values = io::read_f64(dir / payload, static_cast<std::size_t>(K * cols), "stage-two output");
    const Eigen::Map<const RowMatrix> table(values.data(), K, cols);
    out.mu_draws = table.leftCols(p);
    out.sigma_inv_draws = table.middleCols(p, p * p);
    if (has_betas)
        out.beta_draws = table.rightCols(J * p);
    return out;
}

} // namespace twostage
