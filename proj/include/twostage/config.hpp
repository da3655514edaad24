#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "twostage/probdist.hpp"

namespace twostage {

/// Flat key = value configuration. Getters with a default record the value
/// they resolve, so write() dumps the effective configuration.
class RunConfig {
public:
    static RunConfig parse(std::istream& in, const std::string& source = "<config>");
    static RunConfig load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    /// "key=value"
    void set_assignment(const std::string& assignment);
    bool has(const std::string& key) const;

    std::string get_string(const std::string& key);
    std::string get_string(const std::string& key, const std::string& fallback);
    long get_int(const std::string& key);
    long get_int(const std::string& key, long fallback);
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
    double get_double(const std::string& key);
    double get_double(const std::string& key, double fallback);
    bool get_bool(const std::string& key, bool fallback);
    /// Comma-separated numbers.
    Vector get_vector(const std::string& key);
    Vector get_vector(const std::string& key, const Vector& fallback);
    /// Comma-separated strings.
    std::vector<std::string> get_list(const std::string& key);

    /// Throws ConfigError naming keys that no getter asked for.
    void check_unused() const;

    const std::map<std::string, std::string>& entries() const { return values_; }
    void write(const std::filesystem::path& path) const;

private:
    const std::string& require(const std::string& key);

    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

std::string format_vector(const Vector& v);

} // namespace twostage
