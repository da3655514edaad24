#include "twostage/rsf.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "twostage/io.hpp"

namespace twostage {

RasterGrid::RasterGrid(int nc, int nr, double x0, double y0, double h)
    : ncols(nc), nrows(nr), xll(x0), yll(y0), cellsize(h), values(Vector::Zero(Eigen::Index(nc) * nr))
{
    validate();
}

std::optional<Cell> RasterGrid::locate(double x, double y) const
{
    const double fx = std::floor((x - xll) / cellsize);
    const double fy = std::floor((y - yll) / cellsize);
    if (!std::isfinite(fx) || !std::isfinite(fy) || fx < 0 || fy < 0 || fx >= ncols || fy >= nrows)
        return std::nullopt;
    return Cell{nrows - 1 - int(fy), int(fx)};
}

Eigen::Vector2d RasterGrid::lower_left(Cell c) const
{
    return {xll + c.col * cellsize, yll + (nrows - 1 - c.row) * cellsize};
}

Eigen::Vector2d RasterGrid::center(Cell c) const
{
    return lower_left(c) + Eigen::Vector2d::Constant(0.5 * cellsize);
}

bool RasterGrid::same_geometry(const RasterGrid& o) const
{
    return ncols == o.ncols && nrows == o.nrows && xll == o.xll && yll == o.yll && cellsize == o.cellsize;
}

void RasterGrid::validate() const
{
    if (ncols <= 0 || nrows <= 0)
        throw DataError("raster: ncols and nrows must be positive");
    if (!(cellsize > 0.0) || !std::isfinite(xll) || !std::isfinite(yll))
        throw DataError("raster: invalid origin or cellsize");
    if (values.size() != size())
        throw DataError("raster: payload has " + std::to_string(values.size()) + " values, header implies " +
                        std::to_string(size()));
    if (!values.allFinite())
        throw DataError("raster: non-finite cell values");
}

namespace {

double parse_double(const std::string& s, const std::string& what)
{
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && (*b == ' ' || *b == '\t'))
        ++b;
    while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r'))
        --e;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e)
        throw DataError(what + ": cannot parse number '" + s + "'");
    return v;
}

std::string lower(std::string s)
{
    for (auto& c : s)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

} // namespace

RasterGrid read_ascii_grid(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("missing raster file " + path.string());
    std::map<std::string, double> header;
    const char* keys[] = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"};
    for (const char* expected : keys) {
        std::string key, value;
        if (!(in >> key >> value))
            throw DataError(path.string() + ": truncated header");
        if (lower(key) != expected)
            throw DataError(path.string() + ": expected header key '" + expected + "', found '" + key + "'");
        header[expected] = parse_double(value, path.string());
    }
    RasterGrid g;
    g.ncols = int(header["ncols"]);
    g.nrows = int(header["nrows"]);
    g.xll = header["xllcorner"];
    g.yll = header["yllcorner"];
    g.cellsize = header["cellsize"];
    if (g.ncols <= 0 || g.nrows <= 0 || double(g.ncols) != header["ncols"] || double(g.nrows) != header["nrows"])
        throw DataError(path.string() + ": ncols/nrows must be positive integers");
    const double nodata = header["nodata_value"];
    g.values.resize(g.size());
    std::string tok;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        if (!(in >> tok))
            throw DataError(path.string() + ": payload has " + std::to_string(i) + " values, header implies " +
                            std::to_string(g.size()));
        g.values[i] = parse_double(tok, path.string());
        if (g.values[i] == nodata)
            throw DataError(path.string() + ": NODATA cell at index " + std::to_string(i));
    }
    if (in >> tok)
        throw DataError(path.string() + ": payload longer than header implies");
    g.validate();
    return g;
}

void write_ascii_grid(const std::filesystem::path& path, const RasterGrid& g)
{
    g.validate();
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot open " + path.string() + " for writing");
    out << "ncols " << g.ncols << "\nnrows " << g.nrows << "\nxllcorner " << io::format_double(g.xll)
        << "\nyllcorner " << io::format_double(g.yll) << "\ncellsize " << io::format_double(g.cellsize)
        << "\nNODATA_value -9999\n";
    for (int r = 0; r < g.nrows; ++r) {
        for (int c = 0; c < g.ncols; ++c)
            out << (c ? " " : "") << io::format_double(g.at({r, c}));
        out << '\n';
    }
}

RasterGrid standardize(const RasterGrid& grid)
{
    RasterGrid out = grid;
    const double mean = grid.values.mean();
    out.values.array() -= mean;
    const double sd = std::sqrt(out.values.squaredNorm() / double(grid.size()));
    if (sd > 0.0)
        out.values /= sd;
    return out;
}

std::vector<PointSet> read_telemetry_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("missing telemetry file " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw DataError(path.string() + ": empty telemetry file");
    if (!line.empty() && line.back() == '\r')
        line.pop_back();
    bool with_class = false;
    if (line == "id,t,x,y,error_class")
        with_class = true;
    else if (line != "id,t,x,y")
        throw DataError(path.string() + ": header must be id,t,x,y[,error_class]");

    std::vector<PointSet> sets;
    std::map<std::string, std::size_t> slot;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            f.push_back(cell);
        if (f.size() != (with_class ? 5u : 4u))
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": wrong number of fields");
        const std::string where = path.string() + ":" + std::to_string(lineno);
        auto [it, fresh] = slot.try_emplace(f[0], sets.size());
        if (fresh) {
            sets.emplace_back();
            sets.back().individual_id = f[0];
        }
        PointSet& s = sets[it->second];
        s.times.push_back(parse_double(f[1], where));
        s.points.emplace_back(parse_double(f[2], where), parse_double(f[3], where));
        if (with_class)
            s.error_class.push_back(int(parse_double(f[4], where)));
    }
    return sets;
}

void write_telemetry_csv(const std::filesystem::path& path, const std::vector<PointSet>& sets)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot open " + path.string() + " for writing");
    bool with_class = !sets.empty();
    for (const auto& s : sets)
        with_class = with_class && s.error_class.size() == s.size() && s.size() > 0;
    out << (with_class ? "id,t,x,y,error_class\n" : "id,t,x,y\n");
    for (const auto& s : sets) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double t = i < s.times.size() ? s.times[i] : double(i);
            out << s.individual_id << ',' << io::format_double(t) << ',' << io::format_double(s.points[i].x())
                << ',' << io::format_double(s.points[i].y());
            if (with_class)
                out << ',' << s.error_class[i];
            out << '\n';
        }
    }
}

RsfDesign make_rsf_design(const std::vector<RasterGrid>& covariates)
{
    if (covariates.empty())
        throw DataError("make_rsf_design: need at least one covariate raster");
    const RasterGrid& ref = covariates.front();
    for (const auto& g : covariates) {
        g.validate();
        if (!g.same_geometry(ref))
            throw DataError("make_rsf_design: covariate rasters are not aligned");
    }
    RsfDesign d;
    d.X.resize(ref.size(), Eigen::Index(covariates.size()) + 1);
    d.X.col(0).setOnes();
    for (std::size_t k = 0; k < covariates.size(); ++k)
        d.X.col(Eigen::Index(k) + 1) = covariates[k].values;
    d.cell_area = ref.cellsize * ref.cellsize;
    return d;
}

Vector rsf_cell_probabilities(const std::vector<RasterGrid>& covariates, const Vector& beta)
{
    const RsfDesign d = make_rsf_design(covariates);
    if (beta.size() != d.dim())
        throw DataError("rsf_cell_probabilities: beta length must be #covariates + 1");
    Vector eta = d.X * beta;
    if (!eta.allFinite())
        throw NumericalError("rsf_cell_probabilities: non-finite intensities");
    eta.array() -= eta.maxCoeff();
    Vector w = eta.array().exp();
    return w / w.sum();
}

PointSet simulate_point_process(const std::vector<RasterGrid>& covariates, const Vector& beta, int n,
                                Rng& rng, const std::string& id)
{
    if (n < 0)
        throw DataError("simulate_point_process: n must be nonnegative");
    const Vector prob = rsf_cell_probabilities(covariates, beta);
    const RasterGrid& g = covariates.front();
    std::discrete_distribution<Eigen::Index> pick(prob.data(), prob.data() + prob.size());
    PointSet out;
    out.individual_id = id;
    for (int i = 0; i < n; ++i) {
        const Cell c = g.cell_at(pick(rng));
        const Eigen::Vector2d ll = g.lower_left(c);
        const double ux = uniform01(rng);
        const double uy = uniform01(rng);
        out.points.emplace_back(ll.x() + ux * g.cellsize, ll.y() + uy * g.cellsize);
        out.times.push_back(double(i));
    }
    return out;
}

std::vector<double> bin_counts(const PointSet& points, const RasterGrid& grid)
{
    std::vector<double> y(static_cast<std::size_t>(grid.size()), 0.0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto c = grid.locate(points.points[i].x(), points.points[i].y());
        if (!c)
            throw DataError("bin_counts: point " + std::to_string(i) + " of individual '" +
                            points.individual_id + "' lies outside the raster extent");
        y[static_cast<std::size_t>(grid.index(*c))] += 1.0;
    }
    return y;
}

double rsf_loglik(const Vector& y, const RsfDesign& design, const Vector& beta)
{
    if (y.size() != design.cells() || beta.size() != design.dim())
        throw DataError("rsf_loglik: dimension mismatch");
    const Vector eta = design.X * beta;
    return y.dot(eta) - eta.array().exp().sum();
}

Vector rsf_loglik_gradient(const Vector& y, const RsfDesign& design, const Vector& beta)
{
    if (y.size() != design.cells() || beta.size() != design.dim())
        throw DataError("rsf_loglik_gradient: dimension mismatch");
    const Vector eta = design.X * beta;
    const Vector resid = y - Vector(eta.array().exp());
    return design.X.transpose() * resid;
}

namespace {

class RsfModel final : public IndividualModel {
public:
    RsfModel(std::string id, Vector y, RsfDesign design, MvnParams prior)
        : id_(std::move(id)), y_(std::move(y)), design_(std::move(design)), prior_(std::move(prior))
    {
        if (y_.size() != design_.cells())
            throw DataError("rsf model '" + id_ + "': count vector length differs from design rows");
        if (prior_.dim() != design_.dim())
            throw DataError("rsf model '" + id_ + "': prior dimension differs from design columns");
    }

    std::string id() const override { return id_; }
    Eigen::Index coef_dim() const override { return design_.dim(); }
    const MvnParams& beta_prior() const override { return prior_; }

    double log_likelihood(const Vector& beta, const Vector&, std::size_t) const override
    {
        const double ll = rsf_loglik(y_, design_, beta);
        return std::isfinite(ll) ? ll : -std::numeric_limits<double>::infinity();
    }

private:
    std::string id_;
    Vector y_;
    RsfDesign design_;
    MvnParams prior_;
};

} // namespace

ModelPtr make_rsf_model(std::string id, Vector y, RsfDesign design, MvnParams prior)
{
    return std::make_shared<RsfModel>(std::move(id), std::move(y), std::move(design), std::move(prior));
}

RasterGrid gaussian_blob_surface(int ncols, int nrows, double cellsize, int blobs, Rng& rng)
{
    RasterGrid g(ncols, nrows, 0.0, 0.0, cellsize);
    const double w = ncols * cellsize;
    const double h = nrows * cellsize;
    for (int b = 0; b < blobs; ++b) {
        const double cx = uniform01(rng) * w;
        const double cy = uniform01(rng) * h;
        const double radius = (0.08 + 0.12 * uniform01(rng)) * std::min(w, h);
        const double height = 0.5 + uniform01(rng);
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            const Eigen::Vector2d c = g.center(g.cell_at(i));
            const double d2 = (c.x() - cx) * (c.x() - cx) + (c.y() - cy) * (c.y() - cy);
            g.values[i] += height * std::exp(-0.5 * d2 / (radius * radius));
        }
    }
    return standardize(g);
}

RsfSimulation simulate_rsf_scenario(const RsfScenario& sc, Rng& rng)
{
    if (sc.individuals < 1 || !(sc.mean_fixes > 0.0))
        throw ConfigError("rsf scenario: individuals and mean_fixes must be positive");
    RsfSimulation sim;
    sim.covariate = gaussian_blob_surface(sc.ncols, sc.nrows, sc.cellsize, sc.blobs, rng);
    const std::vector<RasterGrid> covs{sim.covariate};
    std::poisson_distribution<int> fixes(sc.mean_fixes);
    for (int j = 0; j < sc.individuals; ++j) {
        const double slope = sc.mu_slope + sc.sd_slope * std_normal(rng);
        const int n = std::max(1, fixes(rng));
        Vector beta(2);
        beta << 0.0, slope;
        char id[16];
        std::snprintf(id, sizeof(id), "ind%02d", j + 1);
        sim.telemetry.push_back(simulate_point_process(covs, beta, n, rng, id));
        const double log_norm = std::log((slope * sim.covariate.values).array().exp().sum());
        beta[0] = std::log(double(n)) - log_norm;
        sim.true_betas.push_back(beta);
    }
    return sim;
}

} // namespace twostage
