#pragma once

#include <cstdint>
#include <filesystem>

#include "endodepth/grid.hpp"

namespace endodepth {

/// RGB image, 3 channels, values in [0, 1].
using Image = Grid<float>;

/// Reads an 8-bit RGB or RGBA PNG (alpha dropped). Grey images are expanded.
Image read_png(const std::filesystem::path& path);

/// Writes an 8-bit PNG with 1 or 3 channels; values are clamped to [0, 1]
/// and rounded.
void write_png(const std::filesystem::path& path, const Image& image);

/// Writes raw 8-bit RGB data (rows*cols*3 bytes).
void write_png_rgb8(const std::filesystem::path& path, int rows, int cols,
                    const std::vector<std::uint8_t>& rgb);

/// Viridis colormap (polynomial fit) of depth / max_depth, clamped to [0,1].
/// Invalid pixels are black. A non-positive `max_depth` uses the frame maximum.
std::vector<std::uint8_t> colorize_depth(const DepthMap& depth, double max_depth = 0.0);

/// Binary array container: 16-byte little-endian header
/// (magic "EDAR", u16 dtype, u16 channels, u32 rows, u32 cols) then data.
enum class ArrayDtype : std::uint16_t { kFloat32 = 1, kFloat64 = 2, kUint8 = 3 };

void write_array(const std::filesystem::path& path, const RealGrid& grid);
void write_array(const std::filesystem::path& path, const Grid<float>& grid);
void write_array(const std::filesystem::path& path, const MaskGrid& grid);

/// Reads any dtype and converts to double.
RealGrid read_array(const std::filesystem::path& path);
MaskGrid read_mask_array(const std::filesystem::path& path);

}  // namespace endodepth
