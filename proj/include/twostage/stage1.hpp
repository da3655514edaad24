#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "twostage/probdist.hpp"

namespace twostage {

/// An individual-level data model [y_j | beta_j, theta_j] together with the
/// stage-one priors [beta_j] and [theta_j].
///
/// Models that integrate over an imputation distribution expose several
/// datasets; the sampler picks one per iteration and passes its index to
/// log_likelihood. Implementations must be safe to call concurrently.
class IndividualModel {
public:
    virtual ~IndividualModel() = default;

    virtual std::string id() const = 0;
    virtual Eigen::Index coef_dim() const = 0;
    virtual Eigen::Index aux_dim() const { return 0; }
    virtual std::size_t num_datasets() const { return 1; }

    /// Returns -inf (never NaN) outside the support.
    virtual double log_likelihood(const Vector& beta, const Vector& theta,
                                  std::size_t dataset) const = 0;

    virtual const MvnParams& beta_prior() const = 0;
    virtual double log_prior_theta(const Vector& /*theta*/) const { return 0.0; }
    virtual Vector sample_theta_prior(Rng& /*rng*/) const { return Vector(0); }

    double log_prior_beta(const Vector& beta) const { return mvn_logpdf(beta, beta_prior()); }
};

using ModelPtr = std::shared_ptr<const IndividualModel>;

/// Optimal-scaling acceptance targets: 0.44 in one dimension, 0.234 from five
/// dimensions up, linear in between.
double default_target_acceptance(Eigen::Index dim);

struct ChainConfig {
    long iterations = 20000;
    long burnin = 5000;
    long thin = 1;
    std::uint64_t seed = 1;
    std::optional<double> target_acceptance;
    /// log of the random-walk proposal variance at the start of burn-in
    double initial_log_scale = -2.0;
    /// keep theta columns in the draw matrix
    bool store_aux = false;

    void validate() const;
    double target_for(Eigen::Index dim) const;
    long retained() const { return (iterations - burnin) / thin; }
};

/// Retained stage-one draws for one individual. Rows are (beta, theta) when
/// theta is stored, otherwise beta only.
struct DrawMatrix {
    std::string individual_id;
    Eigen::Index p = 0;
    Eigen::Index q = 0;
    RowMatrix draws;
    double acceptance_rate = 0.0;
    MvnParams stage1_prior;
    std::uint64_t seed = 0;
    long burnin = 0;
    long thin = 1;

    Eigen::Index size() const { return draws.rows(); }
    Vector beta(Eigen::Index k) const { return draws.row(k).head(p).transpose(); }

    void validate() const;
};

bool operator==(const DrawMatrix& a, const DrawMatrix& b);

/// Random-walk Metropolis with proposal N(x, exp(s) I). During burn-in the
/// log-scale s follows Robbins-Monro steps s += k^-0.6 (alpha_k - target);
/// afterwards it is frozen and draws are retained every `thin` iterations.
DrawMatrix adaptive_rwmh_fit(const IndividualModel& model, const ChainConfig& config, Rng& rng);

/// Fits every model with its own substream (seed, index); output does not
/// depend on `workers`.
std::vector<DrawMatrix> run_parallel(const std::vector<ModelPtr>& models,
                                     const ChainConfig& config, int workers);

/// Stream used for individual `index` by run_parallel.
Rng stage1_stream(std::uint64_t seed, std::size_t index);

/// Writes pools.json (ordered index) plus pool_NNN.json / pool_NNN.bin per individual.
void save_draws(const std::vector<DrawMatrix>& pool, const std::filesystem::path& dir);
std::vector<DrawMatrix> load_draws(const std::filesystem::path& dir);

} // namespace twostage
