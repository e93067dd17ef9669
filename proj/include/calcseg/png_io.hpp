#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace calcseg {

/// Lossless 16-bit grayscale PNG; `pixels` is row-major height x width.
void write_png_gray16(const std::filesystem::path& path, int64_t width, int64_t height,
                      const std::vector<uint16_t>& pixels);

/// Reads back a grayscale PNG (8- or 16-bit) into row-major samples.
std::vector<uint16_t> read_png_gray(const std::filesystem::path& path, int64_t& width, int64_t& height);

}  // namespace calcseg
