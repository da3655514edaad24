#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "twostage/probdist.hpp"
#include "twostage/stage1.hpp"

namespace fixture {

using namespace twostage;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("twostage_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

// Gaussian likelihood N(beta | centre, scale^2 I) as a function of beta.
class GaussianModel final : public IndividualModel {
public:
    GaussianModel(std::string id, Vector centre, double scale, MvnParams prior)
        : id_(std::move(id)), centre_(std::move(centre)), scale_(scale), prior_(std::move(prior))
    {
    }
    std::string id() const override { return id_; }
    Eigen::Index coef_dim() const override { return centre_.size(); }
    const MvnParams& beta_prior() const override { return prior_; }
    double log_likelihood(const Vector& b, const Vector&, std::size_t) const override
    {
        return -0.5 * (b - centre_).squaredNorm() / (scale_ * scale_);
    }

private:
    std::string id_;
    Vector centre_;
    double scale_;
    MvnParams prior_;
};

// y_i ~ Poisson(exp(beta)), scalar beta.
class PoissonModel final : public IndividualModel {
public:
    PoissonModel(std::string id, std::vector<int> y, MvnParams prior)
        : id_(std::move(id)), y_(std::move(y)), prior_(std::move(prior))
    {
    }
    std::string id() const override { return id_; }
    Eigen::Index coef_dim() const override { return 1; }
    const MvnParams& beta_prior() const override { return prior_; }
    double log_likelihood(const Vector& b, const Vector&, std::size_t) const override
    {
        double s = 0.0;
        for (int y : y_)
            s += y * b[0] - std::exp(b[0]);
        return s;
    }

private:
    std::string id_;
    std::vector<int> y_;
    MvnParams prior_;
};

inline MvnParams iso_prior(Eigen::Index p, double var, double mean = 0.0)
{
    return MvnParams(Vector::Constant(p, mean), SpdFactor::identity(p, var));
}

} // namespace fixture
