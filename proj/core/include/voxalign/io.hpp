#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace voxalign::io {

using Mat = Eigen::MatrixXd;

// FNV-1a over raw bytes; used for artifact integrity checks.
uint64_t fnv64(const void* data, size_t n);
uint64_t fnv64_file(const std::filesystem::path& path);

// Raw IEEE-754 little-endian files. Matrices are written row-major.
void write_f32(const std::filesystem::path& path, const std::vector<float>& data);
std::vector<float> read_f32(const std::filesystem::path& path);
void write_matrix_f64(const std::filesystem::path& path, const Mat& m);
Mat read_matrix_f64(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols);

nlohmann::json load_json(const std::filesystem::path& path);
void save_json(const std::filesystem::path& path, const nlohmann::json& j, int indent = 2);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void ensure_dir(const std::filesystem::path& dir);

}  // namespace voxalign::io
