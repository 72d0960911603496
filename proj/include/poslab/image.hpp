#pragma once

#include <cstdint>
#include <vector>

#include "poslab/rng.hpp"

namespace poslab {

// Row-major 8-bit RGB raster.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // width * height * 3

    static ImageBuffer filled(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
        ImageBuffer img;
        img.width = w;
        img.height = h;
        img.pixels.resize(static_cast<size_t>(w) * h * 3);
        for (size_t i = 0; i + 2 < img.pixels.size(); i += 3) {
            img.pixels[i] = r;
            img.pixels[i + 1] = g;
            img.pixels[i + 2] = b;
        }
        return img;
    }

    uint8_t* at(int x, int y) { return pixels.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const uint8_t* at(int x, int y) const {
        return pixels.data() + (static_cast<size_t>(y) * width + x) * 3;
    }

    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        uint8_t* p = at(x, y);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }

    bool operator==(const ImageBuffer& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

// Uniform random bytes per channel; the stand-in input for no-vision runs.
inline ImageBuffer white_noise_image(int w, int h, uint64_t seed) {
    ImageBuffer img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(w) * h * 3);
    Rng rng(seed);
    size_t i = 0;
    while (i + 8 <= img.pixels.size()) {
        uint64_t word = rng.next_u64();
        for (int b = 0; b < 8; ++b) img.pixels[i++] = static_cast<uint8_t>(word >> (8 * b));
    }
    while (i < img.pixels.size()) img.pixels[i++] = static_cast<uint8_t>(rng.next_u64());
    return img;
}

// Bilinear resample; used when an ingested corpus carries images whose size
// differs from the model canvas.
ImageBuffer resize_bilinear(const ImageBuffer& src, int w, int h);

}  // namespace poslab
