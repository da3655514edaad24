#include "twostage/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numbers>

#include "twostage/ctds.hpp"
#include "twostage/diagnostics.hpp"
#include "twostage/errors.hpp"
#include "twostage/fmm.hpp"
#include "twostage/io.hpp"
#include "twostage/parallel.hpp"
#include "twostage/rsf.hpp"
#include "twostage/stage1.hpp"
#include "twostage/stage2.hpp"

namespace twostage::pipeline {

namespace fs = std::filesystem;
using io::json;

namespace {

class Phase {
public:
    explicit Phase(std::string name) : name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
    ~Phase()
    {
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start_;
        std::clog << "[time] " << name_ << ": " << dt.count() << " s\n";
    }

private:
    std::string name_;
    std::chrono::steady_clock::time_point start_;
};

void finish_config(RunConfig& cfg, const fs::path& out, const std::string& command)
{
    cfg.check_unused();
    io::ensure_directory(out);
    cfg.write(out / (command + ".cfg"));
}

std::vector<RasterGrid> load_covariates(const std::vector<std::string>& files)
{
    std::vector<RasterGrid> covs;
    for (const auto& f : files)
        covs.push_back(read_ascii_grid(f));
    for (std::size_t k = 1; k < covs.size(); ++k)
        if (!covs[k].same_geometry(covs[0]))
            throw DataError("covariate raster " + files[k] + " is not aligned with " + files[0]);
    return covs;
}

json cell_path_json(const CellPath& path)
{
    json cells = json::array();
    for (const auto& c : path.cells)
        cells.push_back({c.row, c.col});
    return {{"cells", cells}, {"entry_times", path.entry_times}};
}

CellPath cell_path_from_json(const json& j)
{
    CellPath p;
    for (const auto& c : j.at("cells"))
        p.cells.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
    p.entry_times = j.at("entry_times").get<std::vector<double>>();
    p.validate();
    return p;
}

Matrix diag_matrix(const Vector& d, Eigen::Index p, const std::string& key)
{
    if (d.size() == 1)
        return Matrix::Identity(p, p) * d[0];
    if (d.size() != p)
        throw ConfigError("config key '" + key + "' needs 1 or " + std::to_string(p) + " entries");
    return d.asDiagonal();
}

MvnParams read_stage1_prior(RunConfig& cfg, Eigen::Index p)
{
    const Vector mean = cfg.get_vector("prior_mean", Vector::Zero(p));
    if (mean.size() != p)
        throw ConfigError("config key 'prior_mean' needs " + std::to_string(p) + " entries");
    const Vector var = cfg.get_vector("prior_var", Vector::Constant(1, 100.0));
    if ((var.array() <= 0.0).any())
        throw ConfigError("config key 'prior_var' must be positive");
    return MvnParams(mean, SpdFactor(diag_matrix(var, p, "prior_var")));
}

HyperPriors read_hyper(RunConfig& cfg, Eigen::Index p)
{
    const Vector mu0 = cfg.get_vector("mu0", Vector::Zero(p));
    if (mu0.size() != p)
        throw ConfigError("config key 'mu0' needs " + std::to_string(p) + " entries");
    const Vector s0 = cfg.get_vector("sigma0_var", Vector::Constant(1, 100.0));
    const Vector s = cfg.get_vector("s_diag", Vector::Constant(1, 1.0));
    const double nu = cfg.get_double("nu", std::max(3.0, double(p)));
    if ((s0.array() <= 0.0).any() || (s.array() <= 0.0).any())
        throw ConfigError("config keys 'sigma0_var' and 's_diag' must be positive");
    if (nu < double(p))
        throw ConfigError("config key 'nu' must be at least the coefficient dimension " + std::to_string(p));
    return HyperPriors(MvnParams(mu0, SpdFactor(diag_matrix(s0, p, "sigma0_var"))), diag_matrix(s, p, "s_diag"),
                       nu);
}

// Model list for fit-stage1 / fit-full, built from data keys.
std::vector<ModelPtr> load_models(RunConfig& cfg)
{
    const std::string kind = cfg.get_string("model");
    const auto covs = load_covariates(cfg.get_list("covariates"));
    const auto p = Eigen::Index(covs.size()) + 1;
    std::vector<ModelPtr> models;

    if (kind == "rsf") {
        const fs::path telemetry = cfg.get_string("telemetry");
        const MvnParams prior = read_stage1_prior(cfg, p);
        const RsfDesign design = make_rsf_design(covs);
        for (const auto& set : read_telemetry_csv(telemetry)) {
            const auto counts = bin_counts(set, covs.front());
            models.push_back(make_rsf_model(set.individual_id,
                                            Eigen::Map<const Vector>(counts.data(), Eigen::Index(counts.size())),
                                            design, prior));
        }
    } else if (kind == "ctds") {
        const std::string source = cfg.get_string("paths");
        const MvnParams prior = read_stage1_prior(cfg, p);
        const fs::path dir(source);
        if (fs::exists(dir / "truth.json")) {
            // error-free pool: the simulated paths themselves
            const json truth = io::read_json(dir / "truth.json");
            for (const auto& ind : truth.at("individuals")) {
                const CellPath path = cell_path_from_json(ind.at("path"));
                const std::string id = ind.at("individual_id").get<std::string>();
                models.push_back(make_ctds_model(id, {make_ctds_dataset(path, ind.at("end_time").get<double>(), covs)},
                                                 prior));
            }
        } else if (fs::exists(dir / "paths.json")) {
            const json index = io::read_json(dir / "paths.json");
            for (const auto& ind : index.at("individuals"))
                models.push_back(make_ctds_model(load_path_draws(dir, ind.at("stem").get<std::string>()), covs, prior));
        } else {
            throw DataError("paths directory " + dir.string() + " has neither truth.json nor paths.json");
        }
    } else {
        throw ConfigError("config key 'model' must be rsf or ctds, got '" + kind + "'");
    }
    if (models.empty())
        throw DataError("no individuals found");
    return models;
}

void write_summaries(const Stage2Output& out, const fs::path& dir, const std::string& stem)
{
    write_summary_csv(dir / (stem + "_summary.csv"), summarize(out));
}

} // namespace

const std::vector<std::string>& command_names()
{
    static const std::vector<std::string> names{"simulate-rsf", "simulate-ctds", "impute-paths", "discretize",
                                                "fit-stage1",   "fit-stage2",    "fit-full",     "diagnose"};
    return names;
}

void run(const std::string& command, RunConfig& cfg)
{
    if (command == "simulate-rsf") return simulate_rsf(cfg);
    if (command == "simulate-ctds") return simulate_ctds(cfg);
    if (command == "impute-paths") return impute_paths(cfg);
    if (command == "discretize") return discretize(cfg);
    if (command == "fit-stage1") return fit_stage1(cfg);
    if (command == "fit-stage2") return fit_stage2(cfg);
    if (command == "fit-full") return fit_full(cfg);
    if (command == "diagnose") return diagnose(cfg);
    throw ConfigError("unknown command '" + command + "'");
}

void simulate_rsf(RunConfig& cfg)
{
    RsfScenario sc;
    const auto seed = cfg.get_u64("seed", 1);
    const fs::path out = cfg.get_string("out");
    sc.individuals = int(cfg.get_int("individuals", sc.individuals));
    sc.mean_fixes = cfg.get_double("mean_fixes", sc.mean_fixes);
    sc.ncols = int(cfg.get_int("ncols", sc.ncols));
    sc.nrows = int(cfg.get_int("nrows", sc.nrows));
    sc.cellsize = cfg.get_double("cellsize", sc.cellsize);
    sc.blobs = int(cfg.get_int("blobs", sc.blobs));
    sc.mu_slope = cfg.get_double("mu_slope", sc.mu_slope);
    sc.sd_slope = cfg.get_double("sd_slope", sc.sd_slope);
    finish_config(cfg, out, "simulate-rsf");

    Phase phase("simulate-rsf");
    Rng rng = make_stream(seed, StreamTag::simulate, {0});
    const RsfSimulation sim = simulate_rsf_scenario(sc, rng);
    write_ascii_grid(out / "covariate_1.asc", sim.covariate);
    write_telemetry_csv(out / "telemetry.csv", sim.telemetry);

    json inds = json::array();
    Vector intercepts(Eigen::Index(sim.true_betas.size()));
    for (std::size_t j = 0; j < sim.true_betas.size(); ++j) {
        inds.push_back({{"individual_id", sim.telemetry[j].individual_id},
                        {"n", sim.telemetry[j].size()},
                        {"beta", io::to_json(sim.true_betas[j])}});
        intercepts[Eigen::Index(j)] = sim.true_betas[j][0];
    }
    const double icpt_mean = intercepts.mean();
    const double icpt_var =
        intercepts.size() > 1 ? (intercepts.array() - icpt_mean).square().sum() / double(intercepts.size() - 1) : 0.0;
    Vector mu(2);
    mu << icpt_mean, sc.mu_slope;
    Matrix sigma = Matrix::Zero(2, 2);
    sigma(0, 0) = icpt_var;
    sigma(1, 1) = sc.sd_slope * sc.sd_slope;
    io::write_json(out / "truth.json",
                   {{"kind", "rsf"},
                    {"covariates", {"covariate_1.asc"}},
                    {"telemetry", "telemetry.csv"},
                    {"mu_beta", io::to_json(mu)},
                    {"sigma_beta", io::to_json(sigma)},
                    {"intercept_note", "intercepts are implied by n_j; their mean and variance are empirical"},
                    {"individuals", inds}});
}

void simulate_ctds(RunConfig& cfg)
{
    CtdsScenario sc;
    const auto seed = cfg.get_u64("seed", 1);
    const fs::path out = cfg.get_string("out");
    sc.individuals = int(cfg.get_int("individuals", sc.individuals));
    sc.transitions = cfg.get_double("transitions", sc.transitions);
    sc.ncols = int(cfg.get_int("ncols", sc.ncols));
    sc.nrows = int(cfg.get_int("nrows", sc.nrows));
    sc.cellsize = cfg.get_double("cellsize", sc.cellsize);
    sc.mu_beta = cfg.get_vector("mu_beta", sc.mu_beta);
    sc.sd_beta = cfg.get_vector("sd_beta", sc.sd_beta);
    sc.fixes = int(cfg.get_int("fixes", sc.fixes));
    sc.error_p = cfg.get_double("error_p", sc.error_p);
    sc.error_var_major = cfg.get_double("error_var_major", sc.error_var_major);
    sc.error_var_minor = cfg.get_double("error_var_minor", sc.error_var_minor);
    sc.error_angle = cfg.get_double("error_angle", sc.error_angle);
    finish_config(cfg, out, "simulate-ctds");

    Phase phase("simulate-ctds");
    Rng rng = make_stream(seed, StreamTag::simulate, {1});
    const CtdsSimulation sim = simulate_ctds_scenario(sc, rng);
    json cov_files = json::array();
    for (std::size_t k = 0; k < sim.covariates.size(); ++k) {
        const std::string name = "covariate_" + std::to_string(k + 1) + ".asc";
        write_ascii_grid(out / name, sim.covariates[k]);
        cov_files.push_back(name);
    }
    write_telemetry_csv(out / "telemetry.csv", sim.telemetry);

    json inds = json::array();
    for (std::size_t j = 0; j < sim.paths.size(); ++j)
        inds.push_back({{"individual_id", sim.telemetry[j].individual_id},
                        {"beta", io::to_json(sim.true_betas[j])},
                        {"end_time", sim.durations[j]},
                        {"transitions", sim.paths[j].size() - 1},
                        {"path", cell_path_json(sim.paths[j])}});
    const Matrix sigma = sc.sd_beta.array().square().matrix().asDiagonal();
    io::write_json(out / "truth.json", {{"kind", "ctds"},
                                        {"covariates", cov_files},
                                        {"telemetry", "telemetry.csv"},
                                        {"mu_beta", io::to_json(sc.mu_beta)},
                                        {"sigma_beta", io::to_json(sigma)},
                                        {"individuals", inds}});
}

void impute_paths(RunConfig& cfg)
{
    const auto seed = cfg.get_u64("seed", 1);
    const fs::path out = cfg.get_string("out");
    const fs::path telemetry = cfg.get_string("telemetry");
    FmmConfig fc;
    fc.iterations = cfg.get_int("iterations", 6000);
    fc.burnin = cfg.get_int("burnin", 1000);
    fc.thin = cfg.get_int("thin", 1);
    fc.interior_knots = int(cfg.get_int("interior_knots", 0));
    fc.sigma_alpha_sq = cfg.get_double("sigma_alpha_sq", 0.0);
    const double p = cfg.get_double("error_p", 0.5);
    const double major = cfg.get_double("error_var_major", 0.09);
    const double minor = cfg.get_double("error_var_minor", 0.01);
    const double angle = cfg.get_double("error_angle", std::numbers::pi / 2);
    if (!(major > 0.0 && minor > 0.0))
        throw ConfigError("error variances must be positive");
    if (cfg.get_bool("fix_p", false))
        fc.fixed_p = p;
    const long M = cfg.get_int("paths", 50);
    const long points = cfg.get_int("grid_points", 4000);
    const int workers = int(cfg.get_int("workers", 1));
    if (points < 2)
        throw ConfigError("config key 'grid_points' must be at least 2");
    Matrix base = Matrix::Zero(2, 2);
    base(0, 0) = major;
    base(1, 1) = minor;
    fc.error = MixtureErrorParams(p, SpdFactor(base), angle);
    fc.validate();
    finish_config(cfg, out, "impute-paths");

    std::vector<PointSet> sets;
    {
        Phase phase("read telemetry");
        sets = read_telemetry_csv(telemetry);
    }
    std::vector<PathDraws> result(sets.size());
    {
        Phase phase("fmm fits");
        parallel_for(sets.size(), workers, [&](std::size_t j) {
            Rng rng = make_stream(seed, StreamTag::fmm, {j});
            const FmmFit fit = fit_fmm(sets[j], fc, rng);
            const double t0 = fit.basis.lower();
            const double dt = (fit.basis.upper() - t0) / double(points - 1);
            result[j] = twostage::impute_paths(fit, t0, dt, points, M);
        });
    }
    json inds = json::array();
    for (const auto& paths : result) {
        const std::string stem = "paths_" + paths.individual_id;
        save_path_draws(paths, out, stem);
        inds.push_back({{"individual_id", paths.individual_id}, {"stem", stem}});
    }
    io::write_json(out / "paths.json", {{"individuals", inds}});
}

void discretize(RunConfig& cfg)
{
    const fs::path out = cfg.get_string("out");
    const fs::path dir = cfg.get_string("paths");
    const auto covs = load_covariates(cfg.get_list("covariates"));
    const long m = cfg.get_int("realization", 0);
    finish_config(cfg, out, "discretize");

    Phase phase("discretize");
    const json index = io::read_json(dir / "paths.json");
    for (const auto& ind : index.at("individuals")) {
        const PathDraws paths = load_path_draws(dir, ind.at("stem").get<std::string>());
        CellPath path;
        try {
            path = discretize_path(paths, m, covs.front());
        } catch (const DataError& e) {
            throw DataError("individual '" + paths.individual_id + "': " + e.what());
        }
        const CtdsDataset ds = make_ctds_dataset(path, paths.time(paths.grid_len - 1), covs);
        write_ctds_csv(out / ("ctds_" + paths.individual_id + ".csv"), ds.design);
    }
}

void fit_stage1(RunConfig& cfg)
{
    ChainConfig cc;
    cc.seed = cfg.get_u64("seed", 1);
    cc.iterations = cfg.get_int("iterations", cc.iterations);
    cc.burnin = cfg.get_int("burnin", cc.burnin);
    cc.thin = cfg.get_int("thin", cc.thin);
    const int workers = int(cfg.get_int("workers", 1));
    const fs::path out = cfg.get_string("out");
    cc.validate();
    std::vector<ModelPtr> models;
    {
        Phase phase("load data");
        models = load_models(cfg);
    }
    finish_config(cfg, out, "fit-stage1");

    std::vector<DrawMatrix> pools;
    {
        Phase phase("stage 1");
        pools = run_parallel(models, cc, workers);
    }
    Phase phase("write pools");
    save_draws(pools, out);
}

void fit_stage2(RunConfig& cfg)
{
    Stage2Config sc;
    sc.seed = cfg.get_u64("seed", 1);
    sc.iterations = cfg.get_int("iterations", sc.iterations);
    sc.burnin = cfg.get_int("burnin", sc.burnin);
    sc.thin = cfg.get_int("thin", sc.thin);
    sc.workers = int(cfg.get_int("workers", 1));
    sc.store_betas = cfg.get_bool("store_betas", true);
    const fs::path out = cfg.get_string("out");
    const fs::path pool_dir = cfg.get_string("pools");
    sc.validate();
    std::vector<DrawMatrix> pools;
    {
        Phase phase("read pools");
        pools = load_draws(pool_dir);
    }
    const HyperPriors hyper = read_hyper(cfg, pools.front().p);
    finish_config(cfg, out, "fit-stage2");

    Stage2Output result;
    {
        Phase phase("stage 2");
        result = run_stage2(pools, hyper, sc);
    }
    Phase phase("write stage 2");
    save_stage2(result, out, "stage2");
    write_summaries(result, out, "stage2");
}

void fit_full(RunConfig& cfg)
{
    FullConfig fc;
    fc.seed = cfg.get_u64("seed", 1);
    fc.iterations = cfg.get_int("iterations", fc.iterations);
    fc.burnin = cfg.get_int("burnin", fc.burnin);
    fc.thin = cfg.get_int("thin", fc.thin);
    fc.workers = int(cfg.get_int("workers", 1));
    fc.store_betas = cfg.get_bool("store_betas", true);
    const fs::path out = cfg.get_string("out");
    fc.validate();
    std::vector<ModelPtr> models;
    {
        Phase phase("load data");
        models = load_models(cfg);
    }
    const HyperPriors hyper = read_hyper(cfg, models.front()->coef_dim());
    finish_config(cfg, out, "fit-full");

    Stage2Output result;
    {
        Phase phase("full hierarchy");
        result = run_full_hierarchy(models, hyper, fc);
    }
    Phase phase("write full hierarchy");
    save_stage2(result, out, "full");
    write_summaries(result, out, "full");
}

void diagnose(RunConfig& cfg)
{
    const fs::path input = cfg.get_string("input");
    const std::string stem = cfg.get_string("stem", "stage2");
    const fs::path out = cfg.get_string("out");
    finish_config(cfg, out, "diagnose");

    Phase phase("diagnose");
    const Stage2Output result = load_stage2(input, stem);
    const auto rows = summarize(result);
    write_summary_csv(out / (stem + "_summary.csv"), rows);
    std::vector<ChainSummary> intervals;
    for (const auto& s : rows)
        if (s.parameter.rfind("mu[", 0) == 0 || s.parameter.rfind("beta[", 0) == 0)
            intervals.push_back(s);
    write_interval_csv(out / (stem + "_intervals.csv"), intervals);
}

} // namespace twostage::pipeline
