#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "twostage/probdist.hpp"

namespace twostage::io {

using json = nlohmann::json;

/// Writes raw little-endian IEEE-754 doubles.
void write_f64(const std::filesystem::path& path, std::span<const double> values);

/// Reads exactly `expected` doubles; `what` names the owner in error messages.
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected,
                             const std::string& what);

json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& j);

json to_json(const Vector& v);
json to_json(const Matrix& m);
Vector vector_from_json(const json& j, const std::string& field);
Matrix matrix_from_json(const json& j, const std::string& field);

/// Text form of a double that parses back to the identical value.
std::string format_double(double v);

void ensure_directory(const std::filesystem::path& dir);

} // namespace twostage::io
