#include "twostage/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "twostage/io.hpp"
#include "twostage/parallel.hpp"

namespace twostage {

double default_target_acceptance(Eigen::Index dim)
{
    if (dim <= 1)
        return 0.44;
    if (dim >= 5)
        return 0.234;
    return 0.44 + (0.234 - 0.44) * double(dim - 1) / 4.0;
}

void ChainConfig::validate() const
{
    if (iterations <= 0)
        throw ConfigError("iterations must be positive");
    if (burnin < 0 || burnin >= iterations)
        throw ConfigError("burnin must satisfy 0 <= burnin < iterations");
    if (thin <= 0)
        throw ConfigError("thin must be positive");
    if (retained() < 1)
        throw ConfigError("iterations, burnin and thin leave no retained draws");
    if (target_acceptance && !(*target_acceptance > 0.0 && *target_acceptance < 1.0))
        throw ConfigError("target_acceptance must lie in (0,1)");
    if (!std::isfinite(initial_log_scale))
        throw ConfigError("initial_log_scale must be finite");
}

double ChainConfig::target_for(Eigen::Index dim) const
{
    return target_acceptance.value_or(default_target_acceptance(dim));
}

void DrawMatrix::validate() const
{
    if (draws.rows() < 1)
        throw DataError("pool '" + individual_id + "' has no draws");
    if (draws.cols() != p + q && draws.cols() != p)
        throw DataError("pool '" + individual_id + "' has " + std::to_string(draws.cols()) +
                        " columns, expected p+q=" + std::to_string(p + q));
    if (!draws.allFinite())
        throw DataError("pool '" + individual_id + "' contains non-finite draws");
    if (stage1_prior.dim() != p)
        throw DataError("pool '" + individual_id + "' prior dimension differs from p");
}

bool operator==(const DrawMatrix& a, const DrawMatrix& b)
{
    return a.individual_id == b.individual_id && a.p == b.p && a.q == b.q &&
           a.draws.rows() == b.draws.rows() && a.draws.cols() == b.draws.cols() &&
           a.draws == b.draws && a.acceptance_rate == b.acceptance_rate &&
           a.stage1_prior.mean == b.stage1_prior.mean &&
           a.stage1_prior.covariance.lower() == b.stage1_prior.covariance.lower() &&
           a.seed == b.seed && a.burnin == b.burnin && a.thin == b.thin;
}

namespace {

double log_posterior(const IndividualModel& model, const Vector& beta, const Vector& theta,
                     std::size_t dataset)
{
    const double ll = model.log_likelihood(beta, theta, dataset);
    if (std::isnan(ll) || ll == -std::numeric_limits<double>::infinity())
        return -std::numeric_limits<double>::infinity();
    return ll + model.log_prior_beta(beta) + model.log_prior_theta(theta);
}

} // namespace

DrawMatrix adaptive_rwmh_fit(const IndividualModel& model, const ChainConfig& config, Rng& rng)
{
    config.validate();
    const Eigen::Index p = model.coef_dim();
    const Eigen::Index q = model.aux_dim();
    if (p < 1 || q < 0 || model.beta_prior().dim() != p)
        throw DataError("model '" + model.id() + "' has inconsistent dimensions");
    const std::size_t datasets = model.num_datasets();
    if (datasets == 0)
        throw DataError("model '" + model.id() + "' has no datasets");

    // Dataset selection runs on its own stream so that a pool of identical
    // datasets leaves the accept/reject sequence unchanged.
    Rng pick_rng = spawn(rng);
    const double target = config.target_for(p + q);

    Vector beta = mvn_sample(rng, model.beta_prior());
    Vector theta = model.sample_theta_prior(rng);
    if (theta.size() != q)
        throw DataError("model '" + model.id() + "' theta prior draw has wrong length");

    std::size_t dataset = datasets > 1 ? uniform_index(pick_rng, datasets) : 0;
    double current = log_posterior(model, beta, theta, dataset);
    if (!std::isfinite(current))
        throw NumericalError("model '" + model.id() + "': non-finite initial log-posterior");

    const Eigen::Index width = config.store_aux ? p + q : p;
    DrawMatrix out;
    out.individual_id = model.id();
    out.p = p;
    out.q = config.store_aux ? q : 0;
    out.stage1_prior = model.beta_prior();
    out.seed = config.seed;
    out.burnin = config.burnin;
    out.thin = config.thin;
    out.draws.resize(config.retained(), width);

    double log_scale = config.initial_log_scale;
    long accepted_after = 0;
    Eigen::Index row = 0;
    Vector z(p + q);
    for (long k = 1; k <= config.iterations; ++k) {
        if (datasets > 1) {
            const std::size_t next = uniform_index(pick_rng, datasets);
            if (next != dataset) {
                dataset = next;
                current = log_posterior(model, beta, theta, dataset);
            }
        }

        const double step = std::exp(0.5 * log_scale);
        for (Eigen::Index i = 0; i < z.size(); ++i)
            z[i] = std_normal(rng);
        const Vector beta_star = beta + step * z.head(p);
        const Vector theta_star = theta + step * z.tail(q);
        const double proposed = log_posterior(model, beta_star, theta_star, dataset);
        const double log_alpha = proposed - current;
        const double alpha = std::isfinite(proposed) ? std::min(1.0, std::exp(log_alpha)) : 0.0;
        const bool accept = uniform01(rng) < alpha;
        if (accept) {
            beta = beta_star;
            theta = theta_star;
            current = proposed;
        }

        if (k <= config.burnin) {
            log_scale += std::pow(double(k), -0.6) * (alpha - target);
            continue;
        }
        accepted_after += accept ? 1 : 0;
        if ((k - config.burnin) % config.thin == 0 && row < out.draws.rows()) {
            out.draws.row(row).head(p) = beta.transpose();
            if (config.store_aux && q > 0)
                out.draws.row(row).tail(q) = theta.transpose();
            ++row;
        }
    }
    out.acceptance_rate = double(accepted_after) / double(config.iterations - config.burnin);
    return out;
}

Rng stage1_stream(std::uint64_t seed, std::size_t index)
{
    return make_stream(seed, StreamTag::stage1_chain, {static_cast<std::uint64_t>(index)});
}

std::vector<DrawMatrix> run_parallel(const std::vector<ModelPtr>& models,
                                     const ChainConfig& config, int workers)
{
    if (models.empty())
        throw DataError("run_parallel: no individual models");
    if (workers < 1)
        throw ConfigError("workers must be positive");
    config.validate();
    std::vector<DrawMatrix> out(models.size());
    parallel_for(models.size(), workers, [&](std::size_t j) {
        Rng rng = stage1_stream(config.seed, j);
        out[j] = adaptive_rwmh_fit(*models[j], config, rng);
    });
    return out;
}

namespace {

std::string pool_stem(std::size_t j)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pool_%03zu", j);
    return buf;
}

} // namespace

void save_draws(const std::vector<DrawMatrix>& pool, const std::filesystem::path& dir)
{
    io::ensure_directory(dir);
    io::json index;
    index["individuals"] = io::json::array();
    for (std::size_t j = 0; j < pool.size(); ++j) {
        const DrawMatrix& d = pool[j];
        d.validate();
        const std::string stem = pool_stem(j);
        io::json m;
        m["individual_id"] = d.individual_id;
        m["p"] = d.p;
        m["q"] = d.q;
        m["K"] = d.draws.rows();
        m["seed"] = d.seed;
        m["burnin"] = d.burnin;
        m["thin"] = d.thin;
        m["acceptance_rate"] = d.acceptance_rate;
        m["prior_mean"] = io::to_json(d.stage1_prior.mean);
        m["prior_cov"] = io::to_json(Matrix(d.stage1_prior.covariance.matrix()));
        m["prior_cov_factor"] = io::to_json(d.stage1_prior.covariance.lower());
        m["payload"] = stem + ".bin";
        io::write_json(dir / (stem + ".json"), m);
        io::write_f64(dir / (stem + ".bin"),
                      std::span<const double>(d.draws.data(), static_cast<std::size_t>(d.draws.size())));
        index["individuals"].push_back({{"individual_id", d.individual_id},
                                        {"manifest", stem + ".json"}});
    }
    io::write_json(dir / "pools.json", index);
}

std::vector<DrawMatrix> load_draws(const std::filesystem::path& dir)
{
    const io::json index = io::read_json(dir / "pools.json");
    if (!index.contains("individuals") || !index["individuals"].is_array())
        throw DataError("pools.json in " + dir.string() + " lacks an 'individuals' array");
    std::vector<DrawMatrix> out;
    for (const auto& entry : index["individuals"]) {
        DrawMatrix d;
        std::string manifest_name;
        try {
            d.individual_id = entry.at("individual_id").get<std::string>();
            manifest_name = entry.at("manifest").get<std::string>();
        } catch (const io::json::exception& e) {
            throw DataError("malformed entry in " + (dir / "pools.json").string() + ": " + e.what());
        }
        const auto manifest_path = dir / manifest_name;
        if (!std::filesystem::exists(manifest_path))
            throw DataError("individual '" + d.individual_id + "': missing pool file " +
                            manifest_path.string());
        const io::json m = io::read_json(manifest_path);
        long long k = 0;
        std::string payload;
        try {
            if (m.at("individual_id").get<std::string>() != d.individual_id)
                throw DataError("manifest " + manifest_path.string() + " names individual '" +
                                m.at("individual_id").get<std::string>() + "', index says '" +
                                d.individual_id + "'");
            d.p = m.at("p").get<Eigen::Index>();
            d.q = m.at("q").get<Eigen::Index>();
            k = m.at("K").get<long long>();
            d.seed = m.at("seed").get<std::uint64_t>();
            d.burnin = m.at("burnin").get<long>();
            d.thin = m.at("thin").get<long>();
            d.acceptance_rate = m.at("acceptance_rate").get<double>();
            payload = m.at("payload").get<std::string>();
        } catch (const io::json::exception& e) {
            throw DataError("individual '" + d.individual_id + "': malformed manifest " +
                            manifest_path.string() + ": " + e.what());
        }
        if (d.p < 1 || d.q < 0 || k < 1)
            throw DataError("individual '" + d.individual_id + "': manifest " +
                            manifest_path.string() + " has invalid p/q/K");
        const Vector mean = io::vector_from_json(m, "prior_mean");
        const Matrix factor = io::matrix_from_json(m, "prior_cov_factor");
        if (mean.size() != d.p || factor.rows() != d.p || factor.cols() != d.p)
            throw DataError("individual '" + d.individual_id + "': prior dimension differs from p in " +
                            manifest_path.string());
        d.stage1_prior = MvnParams(mean, SpdFactor::from_lower(factor));
        const auto width = static_cast<std::size_t>(d.p + d.q);
        const auto values = io::read_f64(dir / payload, static_cast<std::size_t>(k) * width,
                                         "individual '" + d.individual_id + "'");
        d.draws = Eigen::Map<const RowMatrix>(values.data(), static_cast<Eigen::Index>(k),
                                              static_cast<Eigen::Index>(width));
        d.validate();
        out.push_back(std::move(d));
    }
    if (out.empty())
        throw DataError("pools.json in " + dir.string() + " lists no individuals");
    return out;
}

} // namespace twostage
