#include "twostage/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "twostage/errors.hpp"
#include "twostage/io.hpp"

namespace twostage {

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep))
        out.push_back(trim(item));
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text)
{
    T v{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end)
        throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
    return v;
}

} // namespace

RunConfig RunConfig::parse(std::istream& in, const std::string& source)
{
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
        cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file " + path.string());
    return parse(in, path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) { values_[trim(key)] = trim(value); }

void RunConfig::set_assignment(const std::string& a)
{
    const auto eq = a.find('=');
    if (eq == std::string::npos || trim(a.substr(0, eq)).empty())
        throw ConfigError("override '" + a + "' is not key=value");
    set(a.substr(0, eq), a.substr(eq + 1));
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& RunConfig::require(const std::string& key)
{
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end())
        throw ConfigError("missing required config key '" + key + "'");
    return it->second;
}

std::string RunConfig::get_string(const std::string& key) { return require(key); }

std::string RunConfig::get_string(const std::string& key, const std::string& fallback)
{
    if (!has(key))
        values_[key] = fallback;
    return require(key);
}

long RunConfig::get_int(const std::string& key) { return parse_number<long>(key, require(key)); }

long RunConfig::get_int(const std::string& key, long fallback)
{
    if (!has(key))
        values_[key] = std::to_string(fallback);
    return get_int(key);
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t fallback)
{
    if (!has(key))
        values_[key] = std::to_string(fallback);
    return parse_number<std::uint64_t>(key, require(key));
}

double RunConfig::get_double(const std::string& key)
{
    const double v = parse_number<double>(key, require(key));
    if (!std::isfinite(v))
        throw ConfigError("config key '" + key + "' must be finite");
    return v;
}

double RunConfig::get_double(const std::string& key, double fallback)
{
    if (!has(key))
        values_[key] = io::format_double(fallback);
    return get_double(key);
}

bool RunConfig::get_bool(const std::string& key, bool fallback)
{
    if (!has(key))
        values_[key] = fallback ? "true" : "false";
    const std::string& v = require(key);
    if (v == "true" || v == "1" || v == "yes")
        return true;
    if (v == "false" || v == "0" || v == "no")
        return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

Vector RunConfig::get_vector(const std::string& key)
{
    const auto items = split(require(key), ',');
    Vector v(Eigen::Index(items.size()));
    for (std::size_t i = 0; i < items.size(); ++i) {
        v[Eigen::Index(i)] = parse_number<double>(key, items[i]);
        if (!std::isfinite(v[Eigen::Index(i)]))
            throw ConfigError("config key '" + key + "' must be finite");
    }
    return v;
}

Vector RunConfig::get_vector(const std::string& key, const Vector& fallback)
{
    if (!has(key))
        values_[key] = format_vector(fallback);
    return get_vector(key);
}

std::vector<std::string> RunConfig::get_list(const std::string& key)
{
    auto items = split(require(key), ',');
    for (const auto& s : items)
        if (s.empty())
            throw ConfigError("config key '" + key + "' has an empty entry");
    return items;
}

void RunConfig::check_unused() const
{
    std::string unknown;
    for (const auto& [k, v] : values_)
        if (!used_.count(k))
            unknown += (unknown.empty() ? "" : ", ") + k;
    if (!unknown.empty())
        throw ConfigError("unknown config keys: " + unknown);
}

void RunConfig::write(const std::filesystem::path& path) const
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write " + path.string());
    for (const auto& [k, v] : values_)
        out << k << " = " << v << '\n';
    if (!out)
        throw DataError("failed writing " + path.string());
}

std::string format_vector(const Vector& v)
{
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + io::format_double(v[i]);
    return s;
}

} // namespace twostage
