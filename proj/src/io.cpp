#include "twostage/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>

#include "twostage/errors.hpp"

namespace twostage::io {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint64_t to_little(std::uint64_t v)
{
    if constexpr (std::endian::native == std::endian::big)
        return __builtin_bswap64(v);
    return v;
}

} // namespace

void write_f64(const std::filesystem::path& path, std::span<const double> values)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot open " + path.string() + " for writing");
    std::vector<std::uint64_t> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        buf[i] = to_little(std::bit_cast<std::uint64_t>(values[i]));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(std::uint64_t)));
    if (!out)
        throw DataError("write failed: " + path.string());
}

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected,
                             const std::string& what)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError(what + ": missing payload file " + path.string());
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (bytes != expected * sizeof(double))
        throw DataError(what + ": payload " + path.string() + " has " + std::to_string(bytes) +
                        " bytes, manifest implies " + std::to_string(expected * sizeof(double)));
    std::vector<std::uint64_t> buf(expected);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
    if (!in)
        throw DataError(what + ": short read on " + path.string());
    std::vector<double> out(expected);
    for (std::size_t i = 0; i < expected; ++i)
        out[i] = std::bit_cast<double>(to_little(buf[i]));
    return out;
}

json read_json(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("missing file " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const json& j)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
}

json to_json(const Vector& v)
{
    return json(std::vector<double>(v.data(), v.data() + v.size()));
}

json to_json(const Matrix& m)
{
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index k = 0; k < m.cols(); ++k)
            r[static_cast<std::size_t>(k)] = m(i, k);
        rows.push_back(r);
    }
    return rows;
}

Vector vector_from_json(const json& j, const std::string& field)
{
    if (!j.contains(field) || !j.at(field).is_array())
        throw DataError("manifest field '" + field + "' missing or not an array");
    const auto v = j.at(field).get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Matrix matrix_from_json(const json& j, const std::string& field)
{
    if (!j.contains(field) || !j.at(field).is_array())
        throw DataError("manifest field '" + field + "' missing or not an array");
    const auto rows = j.at(field).get<std::vector<std::vector<double>>>();
    const auto n = static_cast<Eigen::Index>(rows.size());
    Matrix m(n, n == 0 ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != m.cols())
            throw DataError("manifest field '" + field + "' is ragged");
        for (Eigen::Index k = 0; k < m.cols(); ++k)
            m(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
    return m;
}

std::string format_double(double v)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc())
        throw NumericalError("format_double failed");
    return std::string(buf, ptr);
}

void ensure_directory(const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

} // namespace twostage::io
