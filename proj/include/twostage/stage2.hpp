#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "twostage/probdist.hpp"
#include "twostage/stage1.hpp"

namespace twostage {

/// mu_beta ~ N(mu0, Sigma0) and Sigma_beta^{-1} ~ Wish((S nu)^{-1}, nu).
struct HyperPriors {
    MvnParams mu0;
    WishartParams wishart;
    /// S nu, the inverse of the Wishart scale (needed by the conjugate update)
    Matrix scale_inverse;

    HyperPriors() = default;
    HyperPriors(MvnParams mu_prior, const Matrix& s, double nu);

    /// N(0, 100 I) and Wish((S nu)^{-1}, nu) with S = I, nu = max(3, p).
    static HyperPriors defaults(Eigen::Index p);

    Eigen::Index dim() const { return mu0.dim(); }
    Matrix s_matrix() const { return scale_inverse / wishart.dof; }
};

struct PopulationState {
    Vector mu_beta;
    SpdFactor sigma_inv;
    RowMatrix betas;
    std::vector<std::size_t> pool_indices;
};

struct Stage2Output {
    std::vector<std::string> individual_ids;
    Eigen::Index p = 0;
    RowMatrix mu_draws;        // K x p
    RowMatrix sigma_inv_draws; // K x (p*p), each row a row-major p x p matrix
    RowMatrix beta_draws;      // K x (J*p), empty when betas are not stored
    Vector acceptance_rates;   // per individual

    Eigen::Index num_draws() const { return mu_draws.rows(); }
    Eigen::Index num_individuals() const { return static_cast<Eigen::Index>(individual_ids.size()); }
    bool has_betas() const { return beta_draws.size() > 0; }

    /// Column names for draw_table(): mu[k], sigma_inv[a,b], beta[id,k].
    std::vector<std::string> parameter_names() const;
    /// All stored draws side by side in parameter_names() order.
    RowMatrix draw_table() const;
};

bool operator==(const Stage2Output& a, const Stage2Output& b);

struct Stage2Config {
    long iterations = 20000;
    long burnin = 1000;
    long thin = 1;
    std::uint64_t seed = 1;
    bool store_betas = true;
    int workers = 1;
    /// Start each beta_j at this pool row instead of a uniform draw.
    std::optional<std::vector<std::size_t>> initial_indices;
    /// Warn when an individual's acceptance rate falls below this.
    double low_acceptance_warning = 0.02;

    void validate() const;
    long retained() const { return (iterations - burnin) / thin; }
};

struct FullConfig {
    long iterations = 20000;
    long burnin = 5000;
    long thin = 1;
    std::uint64_t seed = 1;
    std::optional<double> target_acceptance;
    double initial_log_scale = -2.0;
    bool store_betas = true;
    int workers = 1;

    void validate() const;
    long retained() const { return (iterations - burnin) / thin; }
};

/// Gaussian full conditional of mu_beta: mean A^{-1} b and precision
/// A = J Sigma_beta^{-1} + Sigma0^{-1}, b = Sigma_beta^{-1} sum_j beta_j + Sigma0^{-1} mu0.
struct MuConditional {
    Vector mean;
    SpdFactor precision;
};

MuConditional mu_full_conditional(const RowMatrix& betas, const SpdFactor& sigma_inv,
                                  const HyperPriors& hyper);
Vector gibbs_update_mu(const RowMatrix& betas, const SpdFactor& sigma_inv,
                       const HyperPriors& hyper, Rng& rng);

/// Wishart full conditional of Sigma_beta^{-1}:
/// Wish((S nu + sum_j r_j r_j')^{-1}, nu + J), r_j = beta_j - mu_beta.
WishartParams sigma_inv_full_conditional(const RowMatrix& betas, const Vector& mu_beta,
                                         const HyperPriors& hyper);
SpdFactor gibbs_update_sigma_inv(const RowMatrix& betas, const Vector& mu_beta,
                                 const HyperPriors& hyper, Rng& rng);

/// log r for replacing `current` by `candidate`:
///   log N(cand | mu, Sigma) + log [current] - log N(current | mu, Sigma) - log [cand]
/// where [.] is the stage-one prior. No data enter the ratio.
double log_resample_ratio(const Vector& candidate, const Vector& current, const Vector& mu_beta,
                          const SpdFactor& sigma_inv, const MvnParams& stage1_prior);

struct ResampleResult {
    Vector beta;
    std::size_t pool_index = 0;
    bool accepted = false;
};

/// Independence Metropolis-Hastings step for beta_j with a candidate drawn
/// uniformly (with replacement) from the stage-one pool.
ResampleResult mh_resample_beta(std::size_t j, const DrawMatrix& pool,
                                const PopulationState& state, Rng& rng);

/// Second-stage sampler. Consumes only pools and hyperpriors.
Stage2Output run_stage2(const std::vector<DrawMatrix>& pools, const HyperPriors& hyper,
                        const Stage2Config& config);

/// Single-chain Metropolis-within-Gibbs fit of the full hierarchy, used as
/// the reference for the two-stage procedure.
Stage2Output run_full_hierarchy(const std::vector<ModelPtr>& models, const HyperPriors& hyper,
                                const FullConfig& config);

/// Manifest stage2.json + stage2.bin (row-major K x (p + p*p + J*p)).
void save_stage2(const Stage2Output& out, const std::filesystem::path& dir,
                 const std::string& stem = "stage2");
Stage2Output load_stage2(const std::filesystem::path& dir, const std::string& stem = "stage2");

} // namespace twostage
