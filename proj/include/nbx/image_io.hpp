#pragma once

#include <filesystem>

#include "nbx/image.hpp"

namespace nbx {

// Raw tensor format (".nbt"):
//   line 1: "NBT1 <height> <width> <channels>\n"
//   then height*width*channels little-endian IEEE-754 float32 values, row-major (h, w, c).
// Values are stored at float32 precision, so a double image round-trips to within
// one float32 rounding per component.

void write_nbt(const std::filesystem::path& path, const Image& image);
Image read_nbt(const std::filesystem::path& path);

/// 8-bit PNG export. One channel writes grayscale, three channels RGB.
/// Values are clipped to [0, 1] and rounded to the nearest of 256 levels.
void write_png(const std::filesystem::path& path, const Image& image);
/// Reads a PNG into [0, 1] values (v / 255); color images load as RGB, others as gray.
Image read_png(const std::filesystem::path& path);

/// Dispatches on extension: ".png" or anything else as NBT1.
Image read_image(const std::filesystem::path& path);

}  // namespace nbx
