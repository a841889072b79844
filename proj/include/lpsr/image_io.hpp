#pragma once

#include <filesystem>

#include "lpsr/plategen.hpp"

namespace lpsr {

// 8-bit RGB PNG. Values are rounded to the nearest of 256 levels on write.
void write_png(const PlateImage& image, const std::filesystem::path& path);
PlateImage read_png(const std::filesystem::path& path);

}  // namespace lpsr
