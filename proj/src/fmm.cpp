#include "twostage/fmm.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "twostage/io.hpp"

namespace twostage {

BSplineBasis::BSplineBasis(int d, Vector k) : degree(d), knots(std::move(k))
{
    if (degree < 0)
        throw DataError("BSplineBasis: degree must be nonnegative");
    if (knots.size() < 2 * (degree + 1))
        throw DataError("BSplineBasis: too few knots for the degree");
    for (Eigen::Index i = 1; i < knots.size(); ++i)
        if (knots[i] < knots[i - 1])
            throw DataError("BSplineBasis: knots must be nondecreasing");
    num_basis = int(knots.size()) - degree - 1;
    if (!(upper() > lower()))
        throw DataError("BSplineBasis: empty knot range");
}

BSplineBasis BSplineBasis::clamped(double t0, double t1, int interior, int degree)
{
    if (!(t1 > t0) || interior < 0)
        throw DataError("BSplineBasis::clamped: need t1 > t0 and interior >= 0");
    Vector k(2 * (degree + 1) + interior);
    Eigen::Index i = 0;
    for (int r = 0; r <= degree; ++r)
        k[i++] = t0;
    for (int r = 1; r <= interior; ++r)
        k[i++] = t0 + (t1 - t0) * double(r) / double(interior + 1);
    for (int r = 0; r <= degree; ++r)
        k[i++] = t1;
    return BSplineBasis(degree, std::move(k));
}

int BSplineBasis::local(double t, Eigen::Ref<Vector> values) const
{
    if (!(t >= lower() && t <= upper()))
        throw DataError("B-spline: time " + io::format_double(t) + " outside knot range [" +
                        io::format_double(lower()) + ", " + io::format_double(upper()) + "]");
    // Knot span: largest i in [degree, num_basis-1] with knots[i] <= t < knots[i+1].
    const double* begin = knots.data();
    const double* end = knots.data() + knots.size();
    Eigen::Index span = std::upper_bound(begin, end, t) - begin - 1;
    span = std::clamp<Eigen::Index>(span, degree, num_basis - 1);
    while (span > degree && knots[span] == knots[span + 1])
        --span;

    const int d = degree;
    values.setZero();
    values[0] = 1.0;
    Vector left(d + 1), right(d + 1);
    for (int j = 1; j <= d; ++j) {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            const double denom = right[r + 1] + left[j - r];
            const double temp = denom != 0.0 ? values[r] / denom : 0.0;
            values[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        values[j] = saved;
    }
    return int(span) - d;
}

Vector BSplineBasis::row(double t) const
{
    Vector out = Vector::Zero(num_basis);
    Vector vals(degree + 1);
    const int first = local(t, vals);
    out.segment(first, degree + 1) = vals;
    return out;
}

Matrix build_basis(const std::vector<double>& times, const BSplineBasis& basis)
{
    Matrix W = Matrix::Zero(Eigen::Index(times.size()), basis.num_basis);
    Vector vals(basis.degree + 1);
    for (std::size_t i = 0; i < times.size(); ++i) {
        const int first = basis.local(times[i], vals);
        W.row(Eigen::Index(i)).segment(first, basis.degree + 1) = vals.transpose();
    }
    return W;
}

void FmmConfig::validate() const
{
    if (iterations <= 0 || burnin < 0 || burnin >= iterations || thin <= 0 ||
        (iterations - burnin) / thin < 1)
        throw ConfigError("fmm: need 0 <= burnin < iterations, thin > 0 and retained draws");
    if (interior_knots < 0)
        throw ConfigError("fmm: interior_knots must be nonnegative");
    if (fixed_p && !(*fixed_p >= 0.0 && *fixed_p <= 1.0))
        throw ConfigError("fmm: fixed_p must lie in [0,1]");
    for (const auto& [cls, s] : class_scale)
        if (!(s > 0.0))
            throw ConfigError("fmm: error-class scale for class " + std::to_string(cls) + " must be positive");
}

FmmState FmmFit::state(Eigen::Index k) const
{
    FmmState s;
    const Eigen::Index B = basis.num_basis;
    s.alpha_x = alpha_draws.row(k).head(B).transpose();
    s.alpha_y = alpha_draws.row(k).tail(B).transpose();
    s.p = p_draws[k];
    s.sigma_alpha_sq = sigma_alpha_sq;
    s.error = error;
    return s;
}

Matrix FmmFit::path(Eigen::Index k, const std::vector<double>& times) const
{
    const Matrix W = build_basis(times, basis);
    const Eigen::Index B = basis.num_basis;
    Matrix out(W.rows(), 2);
    out.col(0) = W * alpha_draws.row(k).head(B).transpose();
    out.col(1) = W * alpha_draws.row(k).tail(B).transpose();
    out.col(0).array() += offset.x();
    out.col(1).array() += offset.y();
    return out;
}

Matrix FmmFit::mean_path(const std::vector<double>& times) const
{
    const Matrix W = build_basis(times, basis);
    const Eigen::Index B = basis.num_basis;
    const Vector mean = alpha_draws.colwise().mean().transpose();
    Matrix out(W.rows(), 2);
    out.col(0) = W * mean.head(B);
    out.col(1) = W * mean.tail(B);
    out.col(0).array() += offset.x();
    out.col(1).array() += offset.y();
    return out;
}

double indicator_probability(const Eigen::Vector2d& residual, double p, const MixtureErrorParams& error,
                             double scale)
{
    if (p <= 0.0)
        return 0.0;
    if (p >= 1.0)
        return 1.0;
    const Vector r = residual / std::sqrt(scale);
    const Vector zero = Vector::Zero(2);
    const double l1 = std::log(p) + mvn_logpdf(r, zero, error.base_cov);
    const double l2 = std::log1p(-p) + mvn_logpdf(r, zero, error.rotated_cov);
    return 1.0 / (1.0 + std::exp(l2 - l1));
}

AlphaConditional fmm_alpha_conditional(const Matrix& W, const Matrix& obs, const std::vector<unsigned char>& z,
                                       const std::vector<double>& scale, const MixtureErrorParams& error,
                                       double sigma_alpha_sq)
{
    const Eigen::Index n = W.rows();
    const Eigen::Index B = W.cols();
    if (obs.rows() != n || obs.cols() != 2 || Eigen::Index(z.size()) != n || Eigen::Index(scale.size()) != n)
        throw DataError("fmm_alpha_conditional: dimension mismatch");
    if (!(sigma_alpha_sq > 0.0))
        throw NumericalError("fmm_alpha_conditional: sigma_alpha_sq must be positive");
    const Matrix p1 = error.base_cov.inverse();
    const Matrix p2 = error.rotated_cov.inverse();

    Matrix Q = Matrix::Zero(2 * B, 2 * B);
    Vector b = Vector::Zero(2 * B);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index lo = 0;
        while (lo < B && W(i, lo) == 0.0)
            ++lo;
        if (lo == B)
            continue;
        Eigen::Index hi = B - 1;
        while (hi > lo && W(i, hi) == 0.0)
            --hi;
        const Eigen::Index len = hi - lo + 1;
        const Matrix P = (z[std::size_t(i)] ? p1 : p2) / scale[std::size_t(i)];
        const Vector w = W.row(i).segment(lo, len).transpose();
        const Matrix ww = w * w.transpose();
        Q.block(lo, lo, len, len) += P(0, 0) * ww;
        Q.block(lo, B + lo, len, len) += P(0, 1) * ww;
        Q.block(B + lo, lo, len, len) += P(1, 0) * ww;
        Q.block(B + lo, B + lo, len, len) += P(1, 1) * ww;
        const double sx = obs(i, 0);
        const double sy = obs(i, 1);
        b.segment(lo, len) += w * (P(0, 0) * sx + P(0, 1) * sy);
        b.segment(B + lo, len) += w * (P(1, 0) * sx + P(1, 1) * sy);
    }
    Q.diagonal().array() += 1.0 / sigma_alpha_sq;
    Q = 0.5 * (Q + Q.transpose()).eval();
    AlphaConditional c{Vector(), SpdFactor(Q)};
    c.mean = c.precision.solve(b);
    return c;
}

FmmFit fit_fmm(const PointSet& series, const FmmConfig& config, Rng& rng)
{
    config.validate();
    const std::size_t n = series.size();
    if (n < 2 || series.times.size() != n)
        throw DataError("fit_fmm: individual '" + series.individual_id + "' needs at least two timed fixes");
    for (std::size_t i = 1; i < n; ++i)
        if (!(series.times[i] > series.times[i - 1]))
            throw DataError("fit_fmm: individual '" + series.individual_id + "' times must be strictly increasing");

    FmmFit fit;
    fit.individual_id = series.individual_id;
    fit.obs_times = series.times;
    Eigen::Vector2d offset = Eigen::Vector2d::Zero();
    for (const auto& pt : series.points)
        offset += pt;
    offset /= double(n);
    fit.offset = offset;

    Matrix obs(Eigen::Index(n), 2);
    for (std::size_t i = 0; i < n; ++i)
        obs.row(Eigen::Index(i)) = (series.points[i] - offset).transpose();

    const int interior = config.interior_knots > 0 ? config.interior_knots : std::max(10, int(n) / 3);
    fit.basis = BSplineBasis::clamped(series.times.front(), series.times.back(), interior, 3);
    const Eigen::Index B = fit.basis.num_basis;
    if (Eigen::Index(n) < B)
        std::clog << "warning: individual '" << series.individual_id << "' has " << n << " fixes for " << B
                  << " basis functions; the path is prior-dominated between fixes\n";

    const double data_var = obs.squaredNorm() / double(2 * n);
    fit.sigma_alpha_sq = config.sigma_alpha_sq > 0.0 ? config.sigma_alpha_sq : 100.0 * std::max(data_var, 1e-12);
    fit.error = config.error;

    std::vector<double> scale(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = i < series.error_class.size() ? series.error_class[i] : 0;
        if (auto it = config.class_scale.find(cls); it != config.class_scale.end())
            scale[i] = it->second;
    }

    const Matrix W = build_basis(series.times, fit.basis);
    double p = config.fixed_p.value_or(config.error.p);
    std::vector<unsigned char> z(n);
    for (auto& zi : z)
        zi = uniform01(rng) < p ? 1 : 0;

    const long K = (config.iterations - config.burnin) / config.thin;
    fit.alpha_draws.resize(K, 2 * B);
    fit.p_draws.resize(K);
    fit.z_mean = Vector::Zero(Eigen::Index(n));
    Eigen::Index row = 0;
    for (long k = 1; k <= config.iterations; ++k) {
        const AlphaConditional c = fmm_alpha_conditional(W, obs, z, scale, fit.error, fit.sigma_alpha_sq);
        const Vector alpha = mvn_sample_precision(rng, c.mean, c.precision);
        const Vector mx = W * alpha.head(B);
        const Vector my = W * alpha.tail(B);

        std::size_t ones = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto ii = Eigen::Index(i);
            const Eigen::Vector2d r(obs(ii, 0) - mx[ii], obs(ii, 1) - my[ii]);
            const double prob = indicator_probability(r, p, fit.error, scale[i]);
            z[i] = uniform01(rng) < prob ? 1 : 0;
            ones += z[i];
        }
        if (!config.fixed_p)
            p = beta_sample(rng, 1.0 + double(ones), 1.0 + double(n - ones));

        if (k > config.burnin && (k - config.burnin) % config.thin == 0 && row < K) {
            fit.alpha_draws.row(row) = alpha.transpose();
            fit.p_draws[row] = p;
            for (std::size_t i = 0; i < n; ++i)
                fit.z_mean[Eigen::Index(i)] += z[i];
            ++row;
        }
    }
    fit.z_mean /= double(K);
    return fit;
}

void PathDraws::validate() const
{
    if (draws.rows() < 1)
        throw DataError("path draws for '" + individual_id + "' are empty");
    if (grid_len < 1 || draws.cols() != 2 * grid_len)
        throw DataError("path draws for '" + individual_id + "' do not match grid_len");
    if (!(grid_dt > 0.0) || !std::isfinite(grid_start))
        throw DataError("path draws for '" + individual_id + "' have an invalid time grid");
    if (!draws.allFinite())
        throw DataError("path draws for '" + individual_id + "' contain non-finite positions");
}

PathDraws impute_paths(const FmmFit& fit, double grid_start, double grid_dt, Eigen::Index grid_len, Eigen::Index M)
{
    if (M < 1 || M > fit.num_draws())
        throw ConfigError("impute_paths: M must lie in [1, " + std::to_string(fit.num_draws()) + "]");
    if (grid_len < 1 || !(grid_dt > 0.0))
        throw ConfigError("impute_paths: invalid time grid");
    std::vector<double> times(static_cast<std::size_t>(grid_len));
    for (Eigen::Index i = 0; i < grid_len; ++i)
        times[std::size_t(i)] = grid_start + double(i) * grid_dt;
    // absorb rounding in grid_start + i * grid_dt at the ends of the knot range
    const double slack = 1e-9 * (fit.basis.upper() - fit.basis.lower());
    for (double& t : times) {
        if (t < fit.basis.lower() && t >= fit.basis.lower() - slack)
            t = fit.basis.lower();
        if (t > fit.basis.upper() && t <= fit.basis.upper() + slack)
            t = fit.basis.upper();
    }
    if (times.front() < fit.basis.lower() || times.back() > fit.basis.upper())
        throw DataError("impute_paths: time grid [" + io::format_double(times.front()) + ", " +
                        io::format_double(times.back()) + "] leaves the knot range of '" + fit.individual_id + "'");
    const Matrix W = build_basis(times, fit.basis);
    const Eigen::Index B = fit.basis.num_basis;

    PathDraws out;
    out.individual_id = fit.individual_id;
    out.grid_start = grid_start;
    out.grid_dt = grid_dt;
    out.grid_len = grid_len;
    out.draws.resize(M, 2 * grid_len);
    const Eigen::Index K = fit.num_draws();
    for (Eigen::Index m = 0; m < M; ++m) {
        const Eigen::Index k = m * K / M;
        const Vector x = W * fit.alpha_draws.row(k).head(B).transpose();
        const Vector y = W * fit.alpha_draws.row(k).tail(B).transpose();
        for (Eigen::Index i = 0; i < grid_len; ++i) {
            out.draws(m, 2 * i) = x[i] + fit.offset.x();
            out.draws(m, 2 * i + 1) = y[i] + fit.offset.y();
        }
    }
    return out;
}

void save_path_draws(const PathDraws& paths, const std::filesystem::path& dir, const std::string& stem)
{
    paths.validate();
    io::ensure_directory(dir);
    io::json m;
    m["individual_id"] = paths.individual_id;
    m["M"] = paths.num_paths();
    m["grid_start"] = paths.grid_start;
    m["grid_dt"] = paths.grid_dt;
    m["grid_len"] = paths.grid_len;
    m["payload"] = stem + ".bin";
    io::write_json(dir / (stem + ".json"), m);
    io::write_f64(dir / (stem + ".bin"),
                  std::span<const double>(paths.draws.data(), static_cast<std::size_t>(paths.draws.size())));
}

PathDraws load_path_draws(const std::filesystem::path& dir, const std::string& stem)
{
    const auto manifest = dir / (stem + ".json");
    const io::json m = io::read_json(manifest);
    PathDraws out;
    Eigen::Index M = 0;
    std::string payload;
    try {
        out.individual_id = m.at("individual_id").get<std::string>();
        M = m.at("M").get<Eigen::Index>();
        out.grid_start = m.at("grid_start").get<double>();
        out.grid_dt = m.at("grid_dt").get<double>();
        out.grid_len = m.at("grid_len").get<Eigen::Index>();
        payload = m.at("payload").get<std::string>();
    } catch (const io::json::exception& e) {
        throw DataError("malformed path manifest " + manifest.string() + ": " + e.what());
    }
    if (M < 1 || out.grid_len < 1)
        throw DataError("path manifest " + manifest.string() + ": M and grid_len must be positive");
    const auto values = io::read_f64(dir / payload, static_cast<std::size_t>(M * 2 * out.grid_len),
                                     "paths of '" + out.individual_id + "'");
    out.draws = Eigen::Map<const RowMatrix>(values.data(), M, 2 * out.grid_len);
    out.validate();
    return out;
}

} // namespace twostage
