#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "poslab/grammar.hpp"
#include "poslab/image.hpp"

namespace poslab {

// One instantiation of the caption template
//   NUM1 COLOR1 SHAPE1 with NUM2 COLOR2 SHAPE2 VP
// holding canonical-table indices. color2 != color1 (the color factor pairs
// one 5-way with one 4-way choice).
struct CaptionSpec {
    int num1 = 0;
    int color1 = 0;
    int shape1 = 0;
    int num2 = 0;
    int color2 = 0;
    int shape2 = 0;
    int vp = 0;

    bool operator==(const CaptionSpec&) const = default;
};

constexpr int kNumNumerals = 3;
constexpr int kNumColors = 5;
constexpr int kNumShapes = 4;
constexpr int kNumVps = 10;
constexpr int kSpecCount = kNumNumerals * kNumNumerals * kNumColors * (kNumColors - 1) *
                           kNumShapes * kNumShapes * kNumVps;  // 28,800

const std::array<std::string, kNumNumerals>& numeral_words();
const std::array<std::string, kNumColors>& color_words();
const std::array<std::array<uint8_t, 3>, kNumColors>& color_rgb();
const std::array<std::string, kNumShapes>& shape_words_singular();
const std::array<std::string, kNumShapes>& shape_words_plural();

// Lexicographic index over (num1, num2, color1, color2, shape1, shape2, vp)
// with color2 ranging over the four colors distinct from color1.
CaptionSpec spec_from_index(int index);
int spec_index(const CaptionSpec& spec);
std::vector<CaptionSpec> enumerate_specs();

struct RealizedCaption {
    TokenList tokens;
    AgreementAnnotation annotation;
};

RealizedCaption realize_caption(const CaptionSpec& spec);

struct RenderConfig {
    int canvas_size = 64;
    double margin_fraction = 0.10;
    double small_object_fraction = 0.25;
    std::optional<uint64_t> jitter_seed;  // off by default: rendering is jitter-free

    bool operator==(const RenderConfig&) const = default;
};

// Geometry emitted alongside the raster so tests can count objects without
// re-deriving layout from pixels.
struct PlacedObject {
    enum class Role { subject, modifier, glyph };
    Role role;
    int shape;  // shape index; vp index when role == glyph
    int color;  // color index; -1 when role == glyph
    int x0, y0, x1, y1;  // half-open bbox
};

struct RenderResult {
    ImageBuffer image;
    std::vector<PlacedObject> geometry;
};

RenderResult render_image(const CaptionSpec& spec, const RenderConfig& cfg);

// Rasterizer primitives, exposed for the pixel-census oracle.
bool shape_covers_pixel(int shape, int size, int px, int py);
std::vector<std::pair<int, int>> glyph_pixels(int vp, int size);
// Glyphs are white on dark object colors and black on light ones.
std::array<uint8_t, 3> glyph_rgb_on(int object_color);

// One training/eval unit. For artificial data `spec` is set and image/tokens
// re-derive from it bit-for-bit; ingested records leave it empty.
struct GroundedPair {
    std::string id;
    std::optional<CaptionSpec> spec;
    TokenList tokens;
    ImageBuffer image;
    AgreementAnnotation annotation;
    AgreementLabel label = AgreementLabel::ambiguous;
};

struct SplitSizes {
    int train = 15000;
    int validation = 1000;
    int test = 5000;
};

// Reproducible partition over the artificial enumeration, held as spec
// indices. Training items are ambiguous; `injection_pool` holds the shuffled
// disambiguating items not used for testing, from which a rate r injects the
// first round(r * train) items.
struct SplitBundle {
    std::vector<int> train;
    std::vector<int> validation;
    std::vector<int> test;
    std::vector<int> injection_pool;
    double injection_rate = 0.0;
    int injected_count = 0;
    uint64_t seed = 0;
};

// Round-half-up of rate * train_size; 0.001 * 10,000 -> 10.
int injection_count(double rate, int train_size);

SplitBundle build_splits(uint64_t seed, const SplitSizes& sizes, double injection_rate);

}  // namespace poslab
