#include "poslab/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "poslab/error.hpp"

namespace poslab {
namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data, size_t n) {
    put_u32(out, static_cast<uint32_t>(n));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data, data + n);
    uint32_t crc = static_cast<uint32_t>(
        crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    put_u32(out, crc);
}

std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in) {
    uLongf bound = compressBound(static_cast<uLong>(in.size()));
    std::vector<uint8_t> out(bound);
    if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
        throw Error(Error::Kind::io, "png: deflate failed");
    out.resize(bound);
    return out;
}

std::vector<uint8_t> zlib_inflate(const std::vector<uint8_t>& in, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf n = static_cast<uLongf>(expected);
    int rc = uncompress(out.data(), &n, in.data(), static_cast<uLong>(in.size()));
    if (rc != Z_OK || n != expected) throw Error(Error::Kind::io, "png: inflate failed");
    return out;
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

constexpr uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

}  // namespace

std::vector<uint8_t> encode_png(const ImageBuffer& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3)
        throw Error(Error::Kind::shape, "png: inconsistent image buffer");

    std::vector<uint8_t> out(kSignature, kSignature + 8);

    uint8_t ihdr[13];
    ihdr[0] = static_cast<uint8_t>(img.width >> 24);
    ihdr[1] = static_cast<uint8_t>(img.width >> 16);
    ihdr[2] = static_cast<uint8_t>(img.width >> 8);
    ihdr[3] = static_cast<uint8_t>(img.width);
    ihdr[4] = static_cast<uint8_t>(img.height >> 24);
    ihdr[5] = static_cast<uint8_t>(img.height >> 16);
    ihdr[6] = static_cast<uint8_t>(img.height >> 8);
    ihdr[7] = static_cast<uint8_t>(img.height);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // color type: RGB
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter
    ihdr[12] = 0;  // interlace
    append_chunk(out, "IHDR", ihdr, sizeof(ihdr));

    const size_t stride = static_cast<size_t>(img.width) * 3;
    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter type none
        const uint8_t* row = img.pixels.data() + y * stride;
        raw.insert(raw.end(), row, row + stride);
    }
    std::vector<uint8_t> idat = zlib_deflate(raw);
    append_chunk(out, "IDAT", idat.data(), idat.size());
    append_chunk(out, "IEND", nullptr, 0);
    return out;
}

ImageBuffer decode_png(const uint8_t* data, size_t size) {
    if (size < 8 || std::memcmp(data, kSignature, 8) != 0)
        throw Error(Error::Kind::io, "png: bad signature");

    size_t pos = 8;
    int width = 0, height = 0, color_type = -1;
    std::vector<uint8_t> idat;
    bool saw_iend = false;

    while (pos + 8 <= size && !saw_iend) {
        uint32_t len = get_u32(data + pos);
        if (pos + 12 + len > size) throw Error(Error::Kind::io, "png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(data + pos + 4);
        const uint8_t* body = data + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            width = static_cast<int>(get_u32(body));
            height = static_cast<int>(get_u32(body + 4));
            int depth = body[8];
            color_type = body[9];
            int interlace = body[12];
            if (depth != 8) throw Error(Error::Kind::io, "png: only 8-bit depth supported");
            if (color_type != 0 && color_type != 2 && color_type != 6)
                throw Error(Error::Kind::io, "png: unsupported color type");
            if (interlace != 0) throw Error(Error::Kind::io, "png: interlace unsupported");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), body, body + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (width <= 0 || height <= 0 || idat.empty())
        throw Error(Error::Kind::io, "png: missing IHDR/IDAT");

    const int channels = color_type == 0 ? 1 : (color_type == 2 ? 3 : 4);
    const size_t stride = static_cast<size_t>(width) * channels;
    std::vector<uint8_t> raw = zlib_inflate(idat, (stride + 1) * height);

    // Undo per-row filtering, then expand to RGB.
    std::vector<uint8_t> flat(stride * height);
    for (int y = 0; y < height; ++y) {
        uint8_t filter = raw[y * (stride + 1)];
        const uint8_t* src = raw.data() + y * (stride + 1) + 1;
        uint8_t* dst = flat.data() + y * stride;
        const uint8_t* up = y > 0 ? flat.data() + (y - 1) * stride : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            int a = x >= static_cast<size_t>(channels) ? dst[x - channels] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= static_cast<size_t>(channels)) ? up[x - channels] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw Error(Error::Kind::io, "png: bad filter type");
            }
            dst[x] = static_cast<uint8_t>(v);
        }
    }

    ImageBuffer img;
    img.width = width;
    img.height = height;
    img.pixels.resize(static_cast<size_t>(width) * height * 3);
    for (size_t i = 0; i < static_cast<size_t>(width) * height; ++i) {
        const uint8_t* s = flat.data() + i * channels;
        uint8_t* d = img.pixels.data() + i * 3;
        if (channels == 1) {
            d[0] = d[1] = d[2] = s[0];
        } else {
            d[0] = s[0];
            d[1] = s[1];
            d[2] = s[2];
        }
    }
    return img;
}

void write_png(const std::string& path, const ImageBuffer& img) {
    std::vector<uint8_t> bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Error::Kind::io, "cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error(Error::Kind::io, "write failed: " + path);
}

ImageBuffer read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(Error::Kind::io, "cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes.data(), bytes.size());
}

ImageBuffer resize_bilinear(const ImageBuffer& src, int w, int h) {
    if (src.width == w && src.height == h) return src;
    ImageBuffer dst;
    dst.width = w;
    dst.height = h;
    dst.pixels.resize(static_cast<size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y) {
        double fy = (y + 0.5) * src.height / h - 0.5;
        int y0 = std::max(0, std::min(src.height - 1, static_cast<int>(std::floor(fy))));
        int y1 = std::min(src.height - 1, y0 + 1);
        double wy = fy - y0;
        for (int x = 0; x < w; ++x) {
            double fx = (x + 0.5) * src.width / w - 0.5;
            int x0 = std::max(0, std::min(src.width - 1, static_cast<int>(std::floor(fx))));
            int x1 = std::min(src.width - 1, x0 + 1);
            double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                double top = src.at(x0, y0)[c] * (1 - wx) + src.at(x1, y0)[c] * wx;
                double bot = src.at(x0, y1)[c] * (1 - wx) + src.at(x1, y1)[c] * wx;
                dst.at(x, y)[c] = static_cast<uint8_t>(std::lround(top * (1 - wy) + bot * wy));
            }
        }
    }
    return dst;
}

}  // namespace poslab
