#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poslab/image.hpp"

namespace poslab {

// Minimal PNG codec over zlib. Writes 8-bit RGB, non-interlaced, fixed
// compression settings so identical pixels produce identical files.
// Reads 8-bit grayscale / RGB / RGBA (alpha dropped), non-interlaced.
std::vector<uint8_t> encode_png(const ImageBuffer& img);
ImageBuffer decode_png(const uint8_t* data, size_t size);

void write_png(const std::string& path, const ImageBuffer& img);
ImageBuffer read_png(const std::string& path);

}  // namespace poslab
