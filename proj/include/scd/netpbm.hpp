#pragma once

#include <filesystem>

#include "scd/tensor.hpp"

namespace scd {

// Binary PGM ("P5", maxval 255): header `P5\n<w> <h>\n255\n` followed by one
// byte per pixel, row-major. The map must be single-plane with values 0..255.
void write_pgm(const LabelImage& map, const std::filesystem::path& path);
// Exact inverse of write_pgm; rejects other magics, maxval != 255 and
// truncated payloads.
LabelImage read_pgm(const std::filesystem::path& path);

// Binary PPM ("P6", maxval 255), RGB interleaved. Values are expected in
// [0,1]; each byte is round(255*v), rounding half away from zero.
void write_ppm(const Tensor4& image, const std::filesystem::path& path);
Tensor4 read_ppm(const std::filesystem::path& path);

}  // namespace scd
