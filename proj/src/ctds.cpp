#include "twostage/ctds.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include "twostage/errors.hpp"
#include "twostage/io.hpp"

namespace twostage {

Cell neighbor(Cell c, Direction d)
{
    switch (d) {
    case Direction::north: return {c.row - 1, c.col};
    case Direction::east: return {c.row, c.col + 1};
    case Direction::south: return {c.row + 1, c.col};
    case Direction::west: return {c.row, c.col - 1};
    }
    throw DataError("invalid direction code " + std::to_string(int(d)));
}

std::string_view direction_name(Direction d)
{
    switch (d) {
    case Direction::north: return "N";
    case Direction::east: return "E";
    case Direction::south: return "S";
    case Direction::west: return "W";
    }
    throw DataError("invalid direction code " + std::to_string(int(d)));
}

namespace {

std::optional<Direction> rook_direction(Cell a, Cell b)
{
    const int dr = b.row - a.row;
    const int dc = b.col - a.col;
    if (dr == -1 && dc == 0) return Direction::north;
    if (dr == 0 && dc == 1) return Direction::east;
    if (dr == 1 && dc == 0) return Direction::south;
    if (dr == 0 && dc == -1) return Direction::west;
    return std::nullopt;
}

std::string fmt(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace

void CellPath::validate() const
{
    if (cells.empty())
        throw DataError("cell path is empty");
    if (cells.size() != entry_times.size())
        throw DataError("cell path: cells and entry_times differ in length");
    for (std::size_t i = 1; i < cells.size(); ++i) {
        if (!rook_direction(cells[i - 1], cells[i]))
            throw DataError("cell path: cells " + std::to_string(i - 1) + " and " + std::to_string(i) +
                            " are not rook neighbours");
        if (!(entry_times[i] > entry_times[i - 1]))
            throw DataError("cell path: entry times not strictly increasing at " + std::to_string(i));
    }
}

CellPath discretize_path(const std::vector<double>& times, const Matrix& pos, const RasterGrid& grid)
{
    if (times.empty() || pos.rows() != Eigen::Index(times.size()) || pos.cols() != 2)
        throw DataError("discretize_path: need one (x, y) row per time");
    const auto locate = [&](std::size_t i) {
        const auto c = grid.locate(pos(Eigen::Index(i), 0), pos(Eigen::Index(i), 1));
        if (!c)
            throw DataError("discretize_path: path leaves the raster extent at t=" + fmt(times[i]));
        return *c;
    };

    CellPath out;
    Cell cur = locate(0);
    out.cells.push_back(cur);
    out.entry_times.push_back(times[0]);

    const auto push = [&](Cell c, double t, double t_next) {
        // keep entry times strictly increasing when a crossing lands on a grid time
        if (!(t > out.entry_times.back()))
            t = 0.5 * (out.entry_times.back() + t_next);
        out.cells.push_back(c);
        out.entry_times.push_back(t);
    };

    for (std::size_t k = 0; k + 1 < times.size(); ++k) {
        const double t0 = times[k];
        const double t1 = times[k + 1];
        if (!(t1 > t0))
            throw DataError("discretize_path: times must be strictly increasing");
        const Cell next = locate(k + 1);
        const int dr = next.row - cur.row;
        const int dc = next.col - cur.col;
        if (dr == 0 && dc == 0)
            continue;
        if (std::abs(dr) > 1 || std::abs(dc) > 1)
            throw DataError("discretize_path: jump of more than one cell between t=" + fmt(t0) + " and t=" +
                            fmt(t1) + "; refine the time grid");

        const double x0 = pos(Eigen::Index(k), 0), y0 = pos(Eigen::Index(k), 1);
        const double x1 = pos(Eigen::Index(k + 1), 0), y1 = pos(Eigen::Index(k + 1), 1);
        const double xb = grid.xll + std::max(cur.col, next.col) * grid.cellsize;
        const double yb = grid.yll + (grid.nrows - std::max(cur.row, next.row)) * grid.cellsize;
        const double sx = dc != 0 ? std::clamp((xb - x0) / (x1 - x0), 0.0, 1.0) : 0.0;
        const double sy = dr != 0 ? std::clamp((yb - y0) / (y1 - y0), 0.0, 1.0) : 0.0;

        if (dr == 0) {
            push(next, t0 + sx * (t1 - t0), t1);
        } else if (dc == 0) {
            push(next, t0 + sy * (t1 - t0), t1);
        } else if (sx <= sy) {
            push({cur.row, next.col}, t0 + sx * (t1 - t0), t1);
            push(next, sx < sy ? t0 + sy * (t1 - t0) : 0.5 * (out.entry_times.back() + t1), t1);
        } else {
            push({next.row, cur.col}, t0 + sy * (t1 - t0), t1);
            push(next, t0 + sx * (t1 - t0), t1);
        }
        cur = next;
    }
    return out;
}

CellPath discretize_path(const PathDraws& paths, Eigen::Index m, const RasterGrid& grid)
{
    if (m < 0 || m >= paths.num_paths())
        throw DataError("discretize_path: realization " + std::to_string(m) + " not in pool of " +
                        std::to_string(paths.num_paths()));
    std::vector<double> times(static_cast<std::size_t>(paths.grid_len));
    Matrix pos(paths.grid_len, 2);
    for (Eigen::Index i = 0; i < paths.grid_len; ++i) {
        times[std::size_t(i)] = paths.time(i);
        pos.row(i) = paths.position(m, i).transpose();
    }
    return discretize_path(times, pos, grid);
}

double StayMovePairs::duration() const
{
    double s = censored_time;
    for (const auto& p : pairs)
        s += p.tau;
    return s;
}

StayMovePairs extract_pairs(const CellPath& path, double end_time)
{
    path.validate();
    if (end_time < path.entry_times.back())
        throw DataError("extract_pairs: end time precedes the last cell entry");
    StayMovePairs out;
    out.start_time = path.entry_times.front();
    out.pairs.reserve(path.size() - 1);
    for (std::size_t l = 0; l + 1 < path.size(); ++l)
        out.pairs.push_back({path.cells[l], path.entry_times[l + 1] - path.entry_times[l],
                             *rook_direction(path.cells[l], path.cells[l + 1])});
    out.final_cell = path.cells.back();
    out.censored_time = end_time - path.entry_times.back();
    return out;
}

Eigen::Matrix<int, 5, 1> encode_multinomial(Move m)
{
    const int code = static_cast<int>(m);
    if (code < 0 || code > 4)
        throw DataError("encode_multinomial: invalid move code " + std::to_string(code));
    Eigen::Matrix<int, 5, 1> y = Eigen::Matrix<int, 5, 1>::Zero();
    y[code] = 1;
    return y;
}

Move move_for(Direction d)
{
    switch (d) {
    case Direction::north: return Move::up;
    case Direction::east: return Move::right;
    case Direction::south: return Move::down;
    case Direction::west: return Move::left;
    }
    throw DataError("invalid direction code " + std::to_string(int(d)));
}

void CtdsDesign::validate() const
{
    const auto n = X.rows();
    if (tau.size() != n || y.size() != n || Eigen::Index(pair.size()) != n || Eigen::Index(direction.size()) != n)
        throw DataError("ctds design: column lengths differ");
    std::vector<int> moves(static_cast<std::size_t>(num_pairs), 0);
    for (Eigen::Index r = 0; r < n; ++r) {
        if (!(tau[r] > 0.0) || !std::isfinite(std::log(tau[r])))
            throw DataError("ctds design: non-positive residence time in row " + std::to_string(r));
        const int l = pair[std::size_t(r)];
        if (l < 0 || l > num_pairs)
            throw DataError("ctds design: pair index out of range in row " + std::to_string(r));
        if (y[r] != 0.0 && y[r] != 1.0)
            throw DataError("ctds design: y must be 0 or 1");
        if (l == num_pairs) {
            if (y[r] != 0.0)
                throw DataError("ctds design: censored residence cannot record a move");
        } else {
            moves[std::size_t(l)] += int(y[r]);
        }
    }
    for (int l = 0; l < num_pairs; ++l)
        if (moves[std::size_t(l)] != 1)
            throw DataError("ctds design: pair " + std::to_string(l) + " has " +
                            std::to_string(moves[std::size_t(l)]) + " recorded moves");
}

CtdsDesign build_ctds_design(const StayMovePairs& sm, const std::vector<RasterGrid>& covariates)
{
    if (covariates.empty())
        throw DataError("ctds design: at least one covariate raster is required");
    const RasterGrid& g = covariates.front();
    for (const auto& c : covariates)
        if (!c.same_geometry(g))
            throw DataError("ctds design: covariate rasters are not aligned");
    const auto p = Eigen::Index(covariates.size()) + 1;

    struct Row {
        Cell source;
        double tau;
        int pair;
        Direction dir;
        double y;
    };
    std::vector<Row> rows;
    rows.reserve(4 * (sm.pairs.size() + 1));
    const auto add = [&](Cell src, double tau, int l, std::optional<Direction> moved) {
        if (!g.in_bounds(src))
            throw DataError("ctds design: source cell outside the raster");
        if (moved && !g.in_bounds(neighbor(src, *moved)))
            throw DataError("ctds design: pair " + std::to_string(l) + " moves off the raster");
        for (Direction d : all_directions)
            if (g.in_bounds(neighbor(src, d)))
                rows.push_back({src, tau, l, d, moved && *moved == d ? 1.0 : 0.0});
    };
    for (std::size_t l = 0; l < sm.pairs.size(); ++l)
        add(sm.pairs[l].source, sm.pairs[l].tau, int(l), sm.pairs[l].direction);
    if (sm.censored_time > 0.0)
        add(sm.final_cell, sm.censored_time, int(sm.pairs.size()), std::nullopt);

    CtdsDesign d;
    const auto n = Eigen::Index(rows.size());
    d.X.resize(n, p);
    d.tau.resize(n);
    d.y.resize(n);
    d.pair.resize(rows.size());
    d.direction.resize(rows.size());
    d.num_pairs = int(sm.pairs.size());
    for (Eigen::Index r = 0; r < n; ++r) {
        const Row& row = rows[std::size_t(r)];
        d.X(r, 0) = 1.0;
        for (std::size_t k = 0; k < covariates.size(); ++k)
            d.X(r, Eigen::Index(k) + 1) = covariates[k].at(row.source);
        d.tau[r] = row.tau;
        d.y[r] = row.y;
        d.pair[std::size_t(r)] = row.pair;
        d.direction[std::size_t(r)] = row.dir;
    }
    d.validate();
    return d;
}

double ctds_loglik(const CtdsDesign& d, const Vector& beta)
{
    if (beta.size() != d.dim())
        throw DataError("ctds_loglik: beta has length " + std::to_string(beta.size()) + ", design has " +
                        std::to_string(d.dim()) + " columns");
    const Vector eta = d.X * beta;
    return d.y.dot(eta) - d.tau.dot(eta.array().exp().matrix());
}

Vector ctds_loglik_gradient(const CtdsDesign& d, const Vector& beta)
{
    if (beta.size() != d.dim())
        throw DataError("ctds_loglik_gradient: dimension mismatch");
    const Vector eta = d.X * beta;
    const Vector resid = d.y - (d.tau.array() * eta.array().exp()).matrix();
    return d.X.transpose() * resid;
}

void write_ctds_csv(const std::filesystem::path& path, const CtdsDesign& d)
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << "pair,direction,y,tau";
    for (Eigen::Index k = 0; k < d.dim(); ++k)
        out << ",x" << k + 1;
    out << '\n';
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        out << d.pair[std::size_t(r)] << ',' << direction_name(d.direction[std::size_t(r)]) << ','
            << int(d.y[r]) << ',' << io::format_double(d.tau[r]);
        for (Eigen::Index k = 0; k < d.dim(); ++k)
            out << ',' << io::format_double(d.X(r, k));
        out << '\n';
    }
    if (!out)
        throw DataError("failed writing " + path.string());
}

CellPath simulate_ctds(const RateFn& rate, int nrows, int ncols, Cell start, double duration, Rng& rng,
                       double start_time)
{
    if (nrows <= 0 || ncols <= 0)
        throw ConfigError("simulate_ctds: empty grid");
    if (start.row < 0 || start.row >= nrows || start.col < 0 || start.col >= ncols)
        throw ConfigError("simulate_ctds: start cell outside the grid");
    if (!(duration >= 0.0) || !std::isfinite(duration))
        throw ConfigError("simulate_ctds: duration must be finite and non-negative");
    const auto inside = [&](Cell c) { return c.row >= 0 && c.row < nrows && c.col >= 0 && c.col < ncols; };

    CellPath path;
    path.cells.push_back(start);
    path.entry_times.push_back(start_time);
    const double end = start_time + duration;
    double t = start_time;
    Cell cur = start;
    std::array<double, 4> r{};
    for (;;) {
        double total = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            r[i] = 0.0;
            if (!inside(neighbor(cur, all_directions[i])))
                continue;
            r[i] = rate(cur, all_directions[i]);
            if (!std::isfinite(r[i]) || r[i] < 0.0)
                throw NumericalError("simulate_ctds: non-finite or negative rate");
            total += r[i];
        }
        if (!(total > 0.0))
            throw NumericalError("simulate_ctds: all rates zero at cell (" + std::to_string(cur.row) + ", " +
                                 std::to_string(cur.col) + ")");
        t += std::exponential_distribution<double>(total)(rng);
        if (t >= end)
            break;
        double u = uniform01(rng) * total;
        std::size_t pick = 0;
        while (pick < 3 && (r[pick] == 0.0 || u >= r[pick])) {
            u -= r[pick];
            ++pick;
        }
        // floating leftovers can push past the last admissible direction
        while (r[pick] == 0.0)
            --pick;
        cur = neighbor(cur, all_directions[pick]);
        path.cells.push_back(cur);
        path.entry_times.push_back(t);
    }
    return path;
}

CellPath simulate_ctds(const std::vector<RasterGrid>& covariates, const Vector& beta, Cell start,
                       double duration, Rng& rng)
{
    if (covariates.empty())
        throw ConfigError("simulate_ctds: at least one covariate raster is required");
    if (beta.size() != Eigen::Index(covariates.size()) + 1)
        throw ConfigError("simulate_ctds: beta must have one entry per covariate plus an intercept");
    const RasterGrid& g = covariates.front();
    Vector eta = Vector::Constant(g.size(), beta[0]);
    for (std::size_t k = 0; k < covariates.size(); ++k) {
        if (!covariates[k].same_geometry(g))
            throw DataError("simulate_ctds: covariate rasters are not aligned");
        eta += beta[Eigen::Index(k) + 1] * covariates[k].values;
    }
    const Vector lambda = eta.array().exp().matrix();
    return simulate_ctds([&](Cell c, Direction) { return lambda[g.index(c)]; }, g.nrows, g.ncols, start,
                         duration, rng);
}

CtdsDataset make_ctds_dataset(const CellPath& path, double end_time, const std::vector<RasterGrid>& covariates)
{
    CtdsDataset ds;
    ds.pairs = extract_pairs(path, end_time);
    ds.design = build_ctds_design(ds.pairs, covariates);
    return ds;
}

std::vector<CtdsDataset> build_ctds_datasets(const PathDraws& paths, const std::vector<RasterGrid>& covariates)
{
    paths.validate();
    if (paths.num_paths() == 0)
        throw DataError("ctds: empty path pool for individual '" + paths.individual_id + "'");
    if (covariates.empty())
        throw DataError("ctds: at least one covariate raster is required");
    const double end = paths.time(paths.grid_len - 1);
    std::vector<CtdsDataset> out;
    out.reserve(std::size_t(paths.num_paths()));
    for (Eigen::Index m = 0; m < paths.num_paths(); ++m) {
        try {
            out.push_back(make_ctds_dataset(discretize_path(paths, m, covariates.front()), end, covariates));
        } catch (const DataError& e) {
            throw DataError("individual '" + paths.individual_id + "', path " + std::to_string(m) + ": " +
                            e.what());
        }
    }
    return out;
}

namespace {

class CtdsModel final : public IndividualModel {
public:
    CtdsModel(std::string id, std::vector<CtdsDataset> datasets, MvnParams prior)
        : id_(std::move(id)), data_(std::move(datasets)), prior_(std::move(prior))
    {
        if (data_.empty())
            throw DataError("ctds model '" + id_ + "': empty imputation pool");
        for (const auto& d : data_)
            if (d.design.dim() != prior_.dim())
                throw DataError("ctds model '" + id_ + "': prior dimension differs from design columns");
    }

    std::string id() const override { return id_; }
    Eigen::Index coef_dim() const override { return prior_.dim(); }
    std::size_t num_datasets() const override { return data_.size(); }
    const MvnParams& beta_prior() const override { return prior_; }

    double log_likelihood(const Vector& beta, const Vector&, std::size_t dataset) const override
    {
        const double ll = ctds_loglik(data_.at(dataset).design, beta);
        return std::isfinite(ll) ? ll : -std::numeric_limits<double>::infinity();
    }

private:
    std::string id_;
    std::vector<CtdsDataset> data_;
    MvnParams prior_;
};

} // namespace

ModelPtr make_ctds_model(std::string id, std::vector<CtdsDataset> datasets, MvnParams prior)
{
    return std::make_shared<CtdsModel>(std::move(id), std::move(datasets), std::move(prior));
}

ModelPtr make_ctds_model(const PathDraws& paths, const std::vector<RasterGrid>& covariates, MvnParams prior)
{
    return make_ctds_model(paths.individual_id, build_ctds_datasets(paths, covariates), std::move(prior));
}

Eigen::Vector2d position_at(const CellPath& path, const RasterGrid& grid, double t)
{
    if (path.cells.empty())
        throw DataError("position_at: empty path");
    auto it = std::upper_bound(path.entry_times.begin(), path.entry_times.end(), t);
    const std::size_t i = it == path.entry_times.begin() ? 0 : std::size_t(it - path.entry_times.begin()) - 1;
    return grid.center(path.cells[i]);
}

namespace {

// Distance from each cell to the nearest "forest" cell, the forest being the
// upper 30% of a blob surface.
RasterGrid distance_surface(const CtdsScenario& sc, Rng& rng)
{
    const RasterGrid cover = gaussian_blob_surface(sc.ncols, sc.nrows, sc.cellsize, 6, rng);
    Vector sorted = cover.values;
    std::sort(sorted.begin(), sorted.end());
    const double cut = sorted[Eigen::Index(0.7 * double(sorted.size() - 1))];
    std::vector<Eigen::Vector2d> forest;
    for (Eigen::Index i = 0; i < cover.size(); ++i)
        if (cover.values[i] >= cut)
            forest.push_back(cover.center(cover.cell_at(i)));
    RasterGrid dist(sc.ncols, sc.nrows, 0.0, 0.0, sc.cellsize);
    for (Eigen::Index i = 0; i < dist.size(); ++i) {
        const Eigen::Vector2d c = dist.center(dist.cell_at(i));
        double best = std::numeric_limits<double>::infinity();
        for (const auto& f : forest)
            best = std::min(best, (c - f).squaredNorm());
        dist.values[i] = std::sqrt(best);
    }
    return standardize(dist);
}

} // namespace

CtdsSimulation simulate_ctds_scenario(const CtdsScenario& sc, Rng& rng)
{
    if (sc.individuals < 1 || !(sc.transitions > 0.0) || sc.fixes < 2)
        throw ConfigError("ctds scenario: individuals, transitions and fixes must be positive (fixes >= 2)");
    if (sc.mu_beta.size() != 3 || sc.sd_beta.size() != 3)
        throw ConfigError("ctds scenario: mu_beta and sd_beta need 3 entries (intercept and two covariates)");

    CtdsSimulation sim;
    sim.covariates.push_back(gaussian_blob_surface(sc.ncols, sc.nrows, sc.cellsize, 5, rng));
    sim.covariates.push_back(distance_surface(sc, rng));
    const RasterGrid& g = sim.covariates.front();

    Eigen::Matrix2d base = Eigen::Matrix2d::Zero();
    base(0, 0) = sc.error_var_major;
    base(1, 1) = sc.error_var_minor;
    const MixtureErrorParams err(sc.error_p, SpdFactor(base), sc.error_angle);
    const Vector zero2 = Vector::Zero(2);
    const MvnParams comp1(zero2, err.base_cov);
    const MvnParams comp2(zero2, err.rotated_cov);

    const Cell start{sc.nrows / 2, sc.ncols / 2};
    for (int j = 0; j < sc.individuals; ++j) {
        Vector beta(3);
        for (Eigen::Index k = 0; k < 3; ++k)
            beta[k] = sc.mu_beta[k] + sc.sd_beta[k] * std_normal(rng);
        const Vector eta =
            (beta[0] + beta[1] * sim.covariates[0].values.array() + beta[2] * sim.covariates[1].values.array())
                .matrix();
        // Stop at the n-th move; the duration guess from the grid-average rate is
        // doubled until the path gets that far.
        const auto n = std::size_t(std::max(1, std::poisson_distribution<int>(sc.transitions)(rng)));
        double duration = 2.0 * sc.transitions / (4.0 * eta.array().exp().mean());
        CellPath path = simulate_ctds(sim.covariates, beta, start, duration, rng);
        while (path.size() <= n) {
            duration *= 2.0;
            path = simulate_ctds(sim.covariates, beta, start, duration, rng);
        }
        path.cells.resize(n + 1);
        path.entry_times.resize(n + 1);
        duration = path.entry_times.back();

        char id[16];
        std::snprintf(id, sizeof(id), "ind%02d", j + 1);
        PointSet fixes;
        fixes.individual_id = id;
        for (int i = 0; i < sc.fixes; ++i) {
            const double t = duration * (double(i) + 0.5) / double(sc.fixes);
            const bool z = uniform01(rng) < err.p;
            const Vector e = mvn_sample(rng, z ? comp1 : comp2);
            fixes.points.push_back(position_at(path, g, t) + Eigen::Vector2d(e[0], e[1]));
            fixes.times.push_back(t);
            fixes.error_class.push_back(0);
        }
        sim.paths.push_back(std::move(path));
        sim.durations.push_back(duration);
        sim.telemetry.push_back(std::move(fixes));
        sim.true_betas.push_back(beta);
    }
    return sim;
}

} // namespace twostage
