#include "twostage/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <limits>

#include <unsupported/Eigen/FFT>

#include "twostage/errors.hpp"
#include "twostage/io.hpp"

namespace twostage {

namespace {

// Biased autocorrelations rho_0..rho_{n-1} through a zero-padded FFT.
std::vector<double> autocorrelation(const Vector& x)
{
    const auto n = std::size_t(x.size());
    std::size_t m = 1;
    while (m < 2 * n)
        m <<= 1;
    const double mean = x.mean();
    std::vector<double> padded(m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        padded[i] = x[Eigen::Index(i)] - mean;

    Eigen::FFT<double> fft;
    std::vector<std::complex<double>> spec;
    fft.fwd(spec, padded);
    for (auto& c : spec)
        c = std::complex<double>(std::norm(c), 0.0);
    std::vector<double> acov;
    fft.inv(acov, spec);

    std::vector<double> rho(n);
    for (std::size_t t = 0; t < n; ++t)
        rho[t] = acov[t] / acov[0];
    return rho;
}

} // namespace

double effective_sample_size(const Vector& chain)
{
    const auto n = chain.size();
    if (n < 10)
        throw DataError("effective_sample_size: chain of length " + std::to_string(n) + " is too short (< 10)");
    if (!chain.allFinite())
        throw NumericalError("effective_sample_size: non-finite draws");
    const double centred = (chain.array() - chain.mean()).square().sum();
    if (!(centred > 0.0))
        return 0.0;

    const std::vector<double> rho = autocorrelation(chain);
    double tau = -1.0;
    for (std::size_t m = 0; 2 * m + 1 < rho.size(); ++m) {
        const double gamma = rho[2 * m] + rho[2 * m + 1];
        if (!(gamma > 0.0))
            break;
        tau += 2.0 * gamma;
    }
    const double ess = double(n) / tau;
    return std::clamp(ess, 0.0, double(n));
}

double quantile_sorted(const Vector& s, double prob)
{
    if (s.size() == 0)
        throw DataError("quantile: empty input");
    const double h = (double(s.size()) - 1.0) * prob;
    const auto lo = Eigen::Index(std::floor(h));
    const auto hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (h - double(lo)) * (s[hi] - s[lo]);
}

std::vector<ChainSummary> summarize(const Matrix& draws, const std::vector<std::string>& names)
{
    if (draws.rows() == 0 || draws.cols() == 0)
        throw DataError("summarize: empty draw matrix");
    if (Eigen::Index(names.size()) != draws.cols())
        throw DataError("summarize: " + std::to_string(names.size()) + " names for " +
                        std::to_string(draws.cols()) + " columns");
    std::vector<ChainSummary> out;
    out.reserve(names.size());
    const double n = double(draws.rows());
    for (Eigen::Index c = 0; c < draws.cols(); ++c) {
        const Vector col = draws.col(c);
        ChainSummary s;
        s.parameter = names[std::size_t(c)];
        s.mean = col.mean();
        s.sd = draws.rows() > 1 ? std::sqrt((col.array() - s.mean).square().sum() / (n - 1.0)) : 0.0;
        Vector sorted = col;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t k = 0; k < summary_probs.size(); ++k)
            s.q[k] = quantile_sorted(sorted, summary_probs[k]);
        s.ess = draws.rows() >= 10 ? effective_sample_size(col) : n;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<ChainSummary> summarize(const Stage2Output& out)
{
    return summarize(out.draw_table(), out.parameter_names());
}

RunComparison compare_summaries(const std::vector<ChainSummary>& a, const std::vector<ChainSummary>& b)
{
    if (a.size() != b.size())
        throw DataError("compare_runs: parameter sets differ in size");
    RunComparison r;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].parameter != b[i].parameter)
            throw DataError("compare_runs: parameter '" + a[i].parameter + "' does not match '" +
                            b[i].parameter + "'");
        const double pooled = std::sqrt(0.5 * (a[i].sd * a[i].sd + b[i].sd * b[i].sd));
        const double diff = std::abs(a[i].mean - b[i].mean);
        r.parameters.push_back(a[i].parameter);
        r.standardized_difference.push_back(
            pooled > 0.0 ? diff / pooled : (diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity()));
    }
    return r;
}

RunComparison compare_runs(const Stage2Output& a, const Stage2Output& b)
{
    if (a.parameter_names() != b.parameter_names())
        throw DataError("compare_runs: runs have different parameter sets");
    return compare_summaries(summarize(a), summarize(b));
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<ChainSummary>& rows)
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << "parameter,mean,sd,q2.5,q25,q50,q75,q97.5,ess\n";
    for (const auto& s : rows) {
        out << '"' << s.parameter << '"' << ',' << io::format_double(s.mean) << ',' << io::format_double(s.sd);
        for (double q : s.q)
            out << ',' << io::format_double(q);
        out << ',' << io::format_double(s.ess) << '\n';
    }
    if (!out)
        throw DataError("failed writing " + path.string());
}

void write_interval_csv(const std::filesystem::path& path, const std::vector<ChainSummary>& rows)
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << "parameter,mean,lo50,hi50,lo95,hi95\n";
    for (const auto& s : rows)
        out << '"' << s.parameter << '"' << ',' << io::format_double(s.mean) << ',' << io::format_double(s.lo50())
            << ',' << io::format_double(s.hi50()) << ',' << io::format_double(s.lo95()) << ','
            << io::format_double(s.hi95()) << '\n';
    if (!out)
        throw DataError("failed writing " + path.string());
}

} // namespace twostage
