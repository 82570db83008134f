#pragma once

#include "i3d/grid.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace i3d {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RgbImage read_png(const std::filesystem::path& path);
RgbImage decode_png(std::string_view bytes);
void write_png(const std::filesystem::path& path, const RgbImage& img);
std::string encode_png(const RgbImage& img);
/// 8-bit grayscale PNG (masks, heatmaps).
void write_png_gray(const std::filesystem::path& path, const BinaryGrid& gray);

/// NumPy .npy (format 1.0, little-endian '<f4', C order). 2D shape (rows, cols),
/// or 3D (rows, cols, channels) for normals.
void write_npy(const std::filesystem::path& path, const GridF& grid);
GridF read_npy(const std::filesystem::path& path);
void write_npy3(const std::filesystem::path& path, const std::vector<GridF>& channels);
std::vector<GridF> read_npy3(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

std::string read_file(const std::filesystem::path& path);
/// Writes to a temp sibling then renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Lowercase hex SHA-256, used for checkpoint ids and render-cache keys.
std::string sha256_hex(std::string_view bytes);

}  // namespace i3d
