#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "twostage/fmm.hpp"
#include "twostage/probdist.hpp"
#include "twostage/rsf.hpp"
#include "twostage/stage1.hpp"

namespace twostage {

enum class Direction : int { north = 0, east = 1, south = 2, west = 3 };

inline constexpr std::array<Direction, 4> all_directions{Direction::north, Direction::east, Direction::south,
                                                         Direction::west};

Cell neighbor(Cell c, Direction d);
std::string_view direction_name(Direction d);

/// Sequence of occupied cells with the time each was entered.
struct CellPath {
    std::vector<Cell> cells;
    std::vector<double> entry_times;

    std::size_t size() const { return cells.size(); }
    /// Rook adjacency and strictly increasing entry times.
    void validate() const;
};

/// Maps positions to cells (half-open rule), merges repeats, and splits a
/// diagonal step into two rook moves ordered by which cell boundary the
/// straight line between the positions crosses first. Entry times are the
/// crossing times on that line. Jumps beyond the rook/diagonal neighbourhood
/// are an error: the time grid is too coarse.
CellPath discretize_path(const std::vector<double>& times, const Matrix& positions, const RasterGrid& grid);
CellPath discretize_path(const PathDraws& paths, Eigen::Index m, const RasterGrid& grid);

struct StayMovePair {
    Cell source;
    double tau = 0.0;
    Direction direction = Direction::north;
};

struct StayMovePairs {
    std::vector<StayMovePair> pairs;
    Cell final_cell;
    /// Residence in the final cell, whose exit was not observed.
    double censored_time = 0.0;
    double start_time = 0.0;

    double duration() const;
};

StayMovePairs extract_pairs(const CellPath& path, double end_time);

/// Multinomial transition codes in the order up, right, stay, down, left.
enum class Move : int { up = 0, right = 1, stay = 2, down = 3, left = 4 };

Eigen::Matrix<int, 5, 1> encode_multinomial(Move m);
Move move_for(Direction d);

/// Poisson-form CTDS data: one row per (pair, admissible direction) with the
/// source-cell covariates, residence time offset and move indicator. Directions
/// leading off the grid are not admissible. The censored final residence adds
/// rows with y = 0 and pair index equal to the number of pairs.
struct CtdsDesign {
    RowMatrix X;
    Vector tau;
    Vector y;
    std::vector<int> pair;
    std::vector<Direction> direction;
    int num_pairs = 0;

    Eigen::Index rows() const { return X.rows(); }
    Eigen::Index dim() const { return X.cols(); }
    void validate() const;
};

/// Static (motility) drivers: x = (1, covariates at the source cell).
CtdsDesign build_ctds_design(const StayMovePairs& pairs, const std::vector<RasterGrid>& covariates);

/// sum_rows y log(lambda) - tau lambda with lambda = exp(x' beta).
double ctds_loglik(const CtdsDesign& design, const Vector& beta);
Vector ctds_loglik_gradient(const CtdsDesign& design, const Vector& beta);

void write_ctds_csv(const std::filesystem::path& path, const CtdsDesign& design);

using RateFn = std::function<double(Cell, Direction)>;

/// Competing exponential risks on an nrows x ncols grid: residence ~ Exp(sum of
/// admissible rates), then direction d with probability rate_d / sum.
CellPath simulate_ctds(const RateFn& rate, int nrows, int ncols, Cell start, double duration, Rng& rng,
                       double start_time = 0.0);

/// Static drivers: rate exp((1, x(source))' beta) for every admissible direction.
CellPath simulate_ctds(const std::vector<RasterGrid>& covariates, const Vector& beta, Cell start,
                       double duration, Rng& rng);

struct CtdsDataset {
    StayMovePairs pairs;
    CtdsDesign design;
};

CtdsDataset make_ctds_dataset(const CellPath& path, double end_time, const std::vector<RasterGrid>& covariates);

/// One dataset per path realization.
std::vector<CtdsDataset> build_ctds_datasets(const PathDraws& paths, const std::vector<RasterGrid>& covariates);

/// Multiple-imputation model: each sampler iteration evaluates one dataset
/// chosen uniformly from the pool.
ModelPtr make_ctds_model(std::string id, std::vector<CtdsDataset> datasets, MvnParams prior);
ModelPtr make_ctds_model(const PathDraws& paths, const std::vector<RasterGrid>& covariates, MvnParams prior);

struct CtdsScenario {
    int individuals = 18;
    double transitions = 450.0;
    int ncols = 80;
    int nrows = 80;
    double cellsize = 1.0;
    Vector mu_beta = (Vector(3) << 1.0, -0.5, 0.5).finished();
    Vector sd_beta = (Vector(3) << 0.2, 0.3, 0.3).finished();
    int fixes = 150;
    double error_p = 0.5;
    double error_var_major = 0.09;
    double error_var_minor = 0.01;
    double error_angle = 1.5707963267948966;
};

struct CtdsSimulation {
    std::vector<RasterGrid> covariates; // elevation-like, distance-to-forest-like; standardized
    std::vector<CellPath> paths;
    std::vector<double> durations;
    std::vector<PointSet> telemetry;
    std::vector<Vector> true_betas;
};

/// Smooth covariate surfaces, per-individual betas, CTDS paths from the grid
/// centre stopped at the n-th move with n ~ Poisson(transitions), and noisy
/// fixes with the two-component rotated error. Each path ends at its last
/// entry time, so there is no censored residence.
CtdsSimulation simulate_ctds_scenario(const CtdsScenario& scenario, Rng& rng);

/// Piecewise-constant position (cell centre) of a path at time t.
Eigen::Vector2d position_at(const CellPath& path, const RasterGrid& grid, double t);

} // namespace twostage
