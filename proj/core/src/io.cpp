#include "voxalign/io.hpp"

#include <bit>
#include <fstream>

#include "voxalign/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw tensor files are little-endian; big-endian hosts are unsupported");
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

namespace voxalign::io {

uint64_t fnv64(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xCBF29CE484222325ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

uint64_t fnv64_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for hashing: " + path.string());
    uint64_t h = 0xCBF29CE484222325ULL;
    char buf[1 << 16];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        std::streamsize got = f.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
    }
    return h;
}

void write_f32(const std::filesystem::path& path, const std::vector<float>& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!f) throw IoError("short write: " + path.string());
}

std::vector<float> read_f32(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    auto bytes = static_cast<size_t>(f.tellg());
    if (bytes % sizeof(float) != 0) throw IoError("file size not a multiple of 4: " + path.string());
    std::vector<float> data(bytes / sizeof(float));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw IoError("short read: " + path.string());
    return data;
}

void write_matrix_f64(const std::filesystem::path& path, const Mat& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            double v = m(i, j);
            f.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }
    }
    if (!f) throw IoError("short write: " + path.string());
}

Mat read_matrix_f64(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    auto bytes = static_cast<size_t>(f.tellg());
    if (bytes != static_cast<size_t>(rows) * static_cast<size_t>(cols) * sizeof(double))
        throw IoError("unexpected size for " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " matrix: " + path.string());
    f.seekg(0);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            double v;
            f.read(reinterpret_cast<char*>(&v), sizeof(double));
            m(i, j) = v;
        }
    }
    if (!f) throw IoError("short read: " + path.string());
    return m;
}

nlohmann::json load_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open JSON: " + path.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void save_json(const std::filesystem::path& path, const nlohmann::json& j, int indent) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << j.dump(indent) << "\n";
    if (!f) throw IoError("short write: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw IoError("short write: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::string s(static_cast<size_t>(f.tellg()), '\0');
    f.seekg(0);
    f.read(s.data(), static_cast<std::streamsize>(s.size()));
    return s;
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace voxalign::io
