#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "twostage/probdist.hpp"
#include "twostage/stage2.hpp"

namespace twostage {

/// N / (1 + 2 sum rho_t) with Geyer's initial positive sequence truncation.
/// A constant chain has ESS 0; the result is clamped to [0, N].
double effective_sample_size(const Vector& chain);

inline constexpr std::array<double, 5> summary_probs{0.025, 0.25, 0.5, 0.75, 0.975};

struct ChainSummary {
    std::string parameter;
    double mean = 0.0;
    double sd = 0.0;
    std::array<double, 5> q{}; // at summary_probs
    double ess = 0.0;

    double lo95() const { return q[0]; }
    double lo50() const { return q[1]; }
    double median() const { return q[2]; }
    double hi50() const { return q[3]; }
    double hi95() const { return q[4]; }
};

/// Linear interpolation of order statistics (type 7) on sorted data.
double quantile_sorted(const Vector& sorted, double prob);

/// One summary per column. ESS needs at least 10 rows; shorter inputs get ESS = N.
std::vector<ChainSummary> summarize(const Matrix& draws, const std::vector<std::string>& names);
std::vector<ChainSummary> summarize(const Stage2Output& out);

/// |mean_a - mean_b| / sqrt((sd_a^2 + sd_b^2) / 2) for each parameter of a.
struct RunComparison {
    std::vector<std::string> parameters;
    std::vector<double> standardized_difference;
};

RunComparison compare_runs(const Stage2Output& a, const Stage2Output& b);
RunComparison compare_summaries(const std::vector<ChainSummary>& a, const std::vector<ChainSummary>& b);

/// parameter,mean,sd,q2.5,q25,q50,q75,q97.5,ess
void write_summary_csv(const std::filesystem::path& path, const std::vector<ChainSummary>& rows);
/// parameter,mean,lo50,hi50,lo95,hi95
void write_interval_csv(const std::filesystem::path& path, const std::vector<ChainSummary>& rows);

} // namespace twostage
