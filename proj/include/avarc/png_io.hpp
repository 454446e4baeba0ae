#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "avarc/types.hpp"

namespace avarc {

/// Decodes 8-bit gray/RGB(A) PNGs into [0, 1]; converts to `channels` (1 or 3)
/// when it is non-zero.
Image read_png(const std::filesystem::path& path, int channels = 0);

/// Writes a 1- or 3-channel image, clamping to [0, 1].
void write_png(const std::filesystem::path& path, const Image& image);

/// Writes interleaved 8-bit RGB rows.
void write_png_rgb8(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb);

}  // namespace avarc
