#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "twostage/probdist.hpp"
#include "twostage/stage1.hpp"

namespace twostage {

struct Cell {
    int row = 0;
    int col = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
};

/// Regular grid, row-major with the north row first. Cell (r, c) covers
/// [xll + c*h, xll + (c+1)*h) x [yll + (nrows-1-r)*h, yll + (nrows-r)*h).
struct RasterGrid {
    int ncols = 0;
    int nrows = 0;
    double xll = 0.0;
    double yll = 0.0;
    double cellsize = 1.0;
    Vector values;

    RasterGrid() = default;
    RasterGrid(int ncols, int nrows, double xll, double yll, double cellsize);

    Eigen::Index size() const { return Eigen::Index(ncols) * nrows; }
    Eigen::Index index(Cell c) const { return Eigen::Index(c.row) * ncols + c.col; }
    Cell cell_at(Eigen::Index i) const { return {int(i / ncols), int(i % ncols)}; }
    double& at(Cell c) { return values[index(c)]; }
    double at(Cell c) const { return values[index(c)]; }

    bool in_bounds(Cell c) const { return c.row >= 0 && c.row < nrows && c.col >= 0 && c.col < ncols; }
    /// Half-open cell lookup; std::nullopt outside the extent.
    std::optional<Cell> locate(double x, double y) const;
    Eigen::Vector2d center(Cell c) const;
    Eigen::Vector2d lower_left(Cell c) const;
    bool same_geometry(const RasterGrid& other) const;

    void validate() const;
};

/// ASCII grid: ncols, nrows, xllcorner, yllcorner, cellsize, NODATA_value
/// header, then values with the north row first.
RasterGrid read_ascii_grid(const std::filesystem::path& path);
void write_ascii_grid(const std::filesystem::path& path, const RasterGrid& grid);

/// Copy rescaled to mean 0, sd 1 across cells (constant grids only centred).
RasterGrid standardize(const RasterGrid& grid);

/// Telemetry for one individual: positions with optional times and error classes.
struct PointSet {
    std::string individual_id;
    std::vector<Eigen::Vector2d> points;
    std::vector<double> times;
    std::vector<int> error_class;

    std::size_t size() const { return points.size(); }
};

/// CSV with header id,t,x,y[,error_class]; individuals in order of first appearance.
std::vector<PointSet> read_telemetry_csv(const std::filesystem::path& path);
void write_telemetry_csv(const std::filesystem::path& path, const std::vector<PointSet>& sets);

struct RsfDesign {
    Matrix X; // m x p: intercept then one column per covariate
    double cell_area = 1.0;

    Eigen::Index cells() const { return X.rows(); }
    Eigen::Index dim() const { return X.cols(); }
};

RsfDesign make_rsf_design(const std::vector<RasterGrid>& covariates);

/// Cell probabilities proportional to exp(x_i' beta) (uniform availability).
Vector rsf_cell_probabilities(const std::vector<RasterGrid>& covariates, const Vector& beta);

/// n fixes from the weighted distribution: multinomial cell choice, then a
/// uniform position inside the cell.
PointSet simulate_point_process(const std::vector<RasterGrid>& covariates, const Vector& beta,
                                int n, Rng& rng, const std::string& id = "");

std::vector<double> bin_counts(const PointSet& points, const RasterGrid& grid);

/// sum_i y_i x_i'beta - exp(x_i'beta); the -log(y_i!) constant is omitted.
double rsf_loglik(const Vector& y, const RsfDesign& design, const Vector& beta);
Vector rsf_loglik_gradient(const Vector& y, const RsfDesign& design, const Vector& beta);

ModelPtr make_rsf_model(std::string id, Vector y, RsfDesign design, MvnParams prior);

struct RsfScenario {
    int individuals = 20;
    double mean_fixes = 30.0;
    int ncols = 40;
    int nrows = 40;
    double cellsize = 1.0;
    int blobs = 4;
    double mu_slope = 1.0;
    double sd_slope = 0.5;
};

struct RsfSimulation {
    RasterGrid covariate; // standardized
    std::vector<PointSet> telemetry;
    std::vector<Vector> true_betas; // (implied intercept, slope)
};

/// Gaussian-blob covariate surface, slopes beta_j1 ~ N(mu_slope, sd_slope^2),
/// n_j ~ Poisson(mean_fixes) (at least one fix).
RsfSimulation simulate_rsf_scenario(const RsfScenario& scenario, Rng& rng);

/// Sum of `blobs` Gaussian bumps at random centres, standardized.
RasterGrid gaussian_blob_surface(int ncols, int nrows, double cellsize, int blobs, Rng& rng);

} // namespace twostage
