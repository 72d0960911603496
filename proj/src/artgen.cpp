#include "poslab/artgen.hpp"

#include <algorithm>
#include <cmath>

#include "poslab/error.hpp"
#include "poslab/rng.hpp"

namespace poslab {
namespace {

const std::array<std::string, kNumNumerals> kNumerals = {"a", "two", "three"};
const std::array<std::string, kNumColors> kColors = {"black", "red", "blue", "yellow", "lime"};
const std::array<std::array<uint8_t, 3>, kNumColors> kColorRgb = {{
    {0, 0, 0},
    {255, 0, 0},
    {0, 0, 255},
    {255, 255, 0},
    {0, 255, 0},
}};
const std::array<std::string, kNumShapes> kShapesSingular = {"circle", "rectangle", "triangle",
                                                             "hexagon"};
const std::array<std::string, kNumShapes> kShapesPlural = {"circles", "rectangles", "triangles",
                                                           "hexagons"};

// 16x16 monochrome pictograms, one per verb phrase, in lexicon order. What
// matters is that the vp -> glyph mapping is deterministic and one-to-one,
// not iconography.
const char* const kGlyphs[kNumVps][16] = {
    {
        // walk
        "......##........",
        "......##........",
        ".......#........",
        "....#####.......",
        "...#..#..#......",
        "..#...#...#.....",
        ".#....#....#....",
        "......#.........",
        "......#.........",
        ".....###........",
        "....#...#.......",
        "...#.....#......",
        "..#.......#.....",
        ".#.........#....",
        "#...........#...",
        "#...........#...",
    },
    {
        // sleep
        "####............",
        "...#............",
        "..#.............",
        ".#..............",
        "####..####......",
        ".........#......",
        "........#.......",
        ".......#........",
        "......####..###.",
        "..............#.",
        ".............#..",
        "............###.",
        "................",
        "..##############",
        "..#............#",
        "..##############",
    },
    {
        // run fast
        "..........##....",
        "..........##....",
        "....########....",
        "...#...#........",
        "..#....#........",
        ".......#####....",
        "......#.....#...",
        ".....#.......#..",
        "....#.........#.",
        "...#............",
        "##..............",
        "....##..........",
        "#.....##........",
        "........##......",
        "##........##....",
        "............##..",
    },
    {
        // wave its hand
        "......##....#...",
        "......##...#.#..",
        "...........#.#..",
        "......#....#.#..",
        "...#######.#.#..",
        "...#..#...#..#..",
        "...#..#...#..#..",
        "......#...#..#..",
        "......#...####..",
        "......#.........",
        ".....#.#........",
        "....#...#.......",
        "...#.....#......",
        "..#.......#.....",
        ".#.........#....",
        "#...........#...",
    },
    {
        // write a text
        "............##..",
        "...........#..#.",
        "..........#..#..",
        ".........#..#...",
        "........#..#....",
        ".......#..#.....",
        "......#..#......",
        ".....#..#.......",
        "....#..#........",
        "...#..#.........",
        "..##.#..........",
        "..###...........",
        "................",
        "################",
        "................",
        "########........",
    },
    {
        // take a bus
        "................",
        "................",
        ".##############.",
        ".#............#.",
        ".#.###.###.###.#",
        ".#.###.###.###.#",
        ".#.###.###.###.#",
        ".#............#.",
        ".##############.",
        ".#............#.",
        ".##############.",
        "...##......##...",
        "..####....####..",
        "..####....####..",
        "...##......##...",
        "................",
    },
    {
        // take a photo
        "................",
        "................",
        "....####........",
        "................",
        "################",
        "#..............#",
        "#....######....#",
        "#...#......#...#",
        "#..#..####..#..#",
        "#..#..####..#..#",
        "#...#......#...#",
        "#....######....#",
        "#..............#",
        "################",
        "................",
        "................",
    },
    {
        // play soccer
        ".....######.....",
        "...##......##...",
        "..#....##....#..",
        ".#....####....#.",
        ".#...##..##...#.",
        "#...##....##...#",
        "#..##......##..#",
        "#..#...##...#..#",
        "#..#...##...#..#",
        "#..##......##..#",
        "#...##....##...#",
        ".#...##..##...#.",
        ".#....####....#.",
        "..#....##....#..",
        "...##......##...",
        ".....######.....",
    },
    {
        // play baseball
        "..............##",
        ".............###",
        "............###.",
        "...........###..",
        "..........###...",
        ".........###....",
        "........###.....",
        ".......###......",
        "......###.......",
        ".....###........",
        "....###.........",
        "...###..........",
        "..###...........",
        ".###......###...",
        ".##......#...#..",
        "..........###...",
    },
    {
        // throw an arrow at a target
        "......####......",
        "....##....##....",
        "...#........#...",
        "..#...####...#..",
        ".#...#....#...#.",
        ".#..#..##..#..#.",
        "#...#.####.#...#",
        "#...#.####.#...#",
        ".#..#..##..#..#.",
        ".#...#....#...#.",
        "..#...####...#..",
        "...#........#...",
        "....##....##....",
        "......####......",
        "########........",
        "########........",
    },
};

struct Layout {
    int margin;
    int usable;
    int large;        // large-object side
    int small;        // small-object side
    int glyph;        // glyph side
    int top_small;    // y of small-object row
    int top_large;    // y of large-object row
};

Layout compute_layout(const RenderConfig& cfg) {
    if (cfg.canvas_size < 32)
        throw Error(Error::Kind::render, "canvas must be at least 32 pixels");
    Layout lo;
    lo.margin = static_cast<int>(std::lround(cfg.canvas_size * cfg.margin_fraction));
    lo.usable = cfg.canvas_size - 2 * lo.margin;
    lo.large = static_cast<int>(std::floor(lo.usable / 3.0 * 0.9));
    lo.small = std::max(2, static_cast<int>(std::lround(lo.large * cfg.small_object_fraction)));
    lo.glyph = std::max(6, lo.large / 2);
    const int stack = lo.small + 1 + lo.large;
    if (lo.large < 6 || stack > lo.usable)
        throw Error(Error::Kind::render, "canvas too small to fit 3x3 objects at configured sizes");
    lo.top_small = (cfg.canvas_size - stack) / 2;
    lo.top_large = lo.top_small + lo.small + 1;
    return lo;
}

void draw_shape(ImageBuffer& img, int shape, int size, int x0, int y0,
                const std::array<uint8_t, 3>& rgb) {
    for (int py = 0; py < size; ++py)
        for (int px = 0; px < size; ++px)
            if (shape_covers_pixel(shape, size, px, py)) {
                int x = x0 + px, y = y0 + py;
                if (x >= 0 && y >= 0 && x < img.width && y < img.height)
                    img.set(x, y, rgb[0], rgb[1], rgb[2]);
            }
}

}  // namespace

const std::array<std::string, kNumNumerals>& numeral_words() { return kNumerals; }
const std::array<std::string, kNumColors>& color_words() { return kColors; }
const std::array<std::array<uint8_t, 3>, kNumColors>& color_rgb() { return kColorRgb; }
const std::array<std::string, kNumShapes>& shape_words_singular() { return kShapesSingular; }
const std::array<std::string, kNumShapes>& shape_words_plural() { return kShapesPlural; }

CaptionSpec spec_from_index(int index) {
    if (index < 0 || index >= kSpecCount)
        throw Error(Error::Kind::contract, "spec index out of range");
    CaptionSpec s;
    s.vp = index % kNumVps;
    index /= kNumVps;
    s.shape2 = index % kNumShapes;
    index /= kNumShapes;
    s.shape1 = index % kNumShapes;
    index /= kNumShapes;
    int c2pos = index % (kNumColors - 1);
    index /= (kNumColors - 1);
    s.color1 = index % kNumColors;
    index /= kNumColors;
    s.num2 = index % kNumNumerals;
    index /= kNumNumerals;
    s.num1 = index;
    s.color2 = c2pos < s.color1 ? c2pos : c2pos + 1;
    return s;
}

int spec_index(const CaptionSpec& s) {
    if (s.color2 == s.color1) throw Error(Error::Kind::contract, "color2 must differ from color1");
    int c2pos = s.color2 < s.color1 ? s.color2 : s.color2 - 1;
    int idx = s.num1;
    idx = idx * kNumNumerals + s.num2;
    idx = idx * kNumColors + s.color1;
    idx = idx * (kNumColors - 1) + c2pos;
    idx = idx * kNumShapes + s.shape1;
    idx = idx * kNumShapes + s.shape2;
    idx = idx * kNumVps + s.vp;
    return idx;
}

std::vector<CaptionSpec> enumerate_specs() {
    std::vector<CaptionSpec> out;
    out.reserve(kSpecCount);
    for (int i = 0; i < kSpecCount; ++i) out.push_back(spec_from_index(i));
    return out;
}

RealizedCaption realize_caption(const CaptionSpec& spec) {
    const Number n1 = number_of_numeral(kNumerals[spec.num1]);
    const Number n2 = number_of_numeral(kNumerals[spec.num2]);

    RealizedCaption rc;
    rc.tokens = {
        kNumerals[spec.num1],
        kColors[spec.color1],
        n1 == Number::singular ? kShapesSingular[spec.shape1] : kShapesPlural[spec.shape1],
        "with",
        kNumerals[spec.num2],
        kColors[spec.color2],
        n2 == Number::singular ? kShapesSingular[spec.shape2] : kShapesPlural[spec.shape2],
    };
    const VerbLexicon& lex = VerbLexicon::artificial();
    const TokenList& vp = inflect_vp(lex, lex.entries()[spec.vp].id, n1);
    rc.annotation.subject_index = 2;
    rc.annotation.attractor_index = 6;
    rc.annotation.verb_index = static_cast<int>(rc.tokens.size());
    rc.tokens.insert(rc.tokens.end(), vp.begin(), vp.end());
    rc.annotation.subject_number = n1;
    rc.annotation.attractor_number = n2;
    rc.annotation.verb_number = n1;
    return rc;
}

bool shape_covers_pixel(int shape, int size, int px, int py) {
    // Inside tests on pixel centers; no anti-aliasing so pixel censuses are
    // exact.
    const double x = (px + 0.5) / size * 2.0 - 1.0;  // [-1, 1]
    const double y = (py + 0.5) / size * 2.0 - 1.0;
    switch (shape) {
        case 0:  // circle
            return x * x + y * y <= 1.0;
        case 1:  // rectangle
            return true;
        case 2:  // triangle, apex up
            return std::abs(x) <= (y + 1.0) / 2.0;
        case 3:  // hexagon, pointy top
            return std::abs(x) <= 1.0 && 0.5 * std::abs(x) + 0.8660254037844386 * std::abs(y) <=
                                             0.8660254037844386;
        default:
            throw Error(Error::Kind::contract, "unknown shape index");
    }
}

std::vector<std::pair<int, int>> glyph_pixels(int vp, int size) {
    if (vp < 0 || vp >= kNumVps) throw Error(Error::Kind::contract, "unknown vp index");
    std::vector<std::pair<int, int>> out;
    for (int py = 0; py < size; ++py) {
        int sy = py * 16 / size;
        for (int px = 0; px < size; ++px) {
            int sx = px * 16 / size;
            if (kGlyphs[vp][sy][sx] == '#') out.emplace_back(px, py);
        }
    }
    return out;
}

std::array<uint8_t, 3> glyph_rgb_on(int object_color) {
    // Perceptual luminance of the object color decides glyph polarity.
    const auto& c = kColorRgb[object_color];
    double lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    if (lum < 128.0) return {255, 255, 255};
    return {0, 0, 0};
}

RenderResult render_image(const CaptionSpec& spec, const RenderConfig& cfg) {
    const Layout lo = compute_layout(cfg);
    const int k1 = numeral_value(kNumerals[spec.num1]);
    const int k2 = numeral_value(kNumerals[spec.num2]);
    const int S = cfg.canvas_size;

    RenderResult res;
    res.image = ImageBuffer::filled(S, S, 255, 255, 255);

    std::optional<Rng> jitter;
    if (cfg.jitter_seed) jitter.emplace(*cfg.jitter_seed);
    auto jit = [&]() { return jitter ? static_cast<int>(jitter->below(5)) - 2 : 0; };

    const auto glyph = glyph_pixels(spec.vp, lo.glyph);
    const auto glyph_color = glyph_rgb_on(spec.color1);

    for (int i = 0; i < k1; ++i) {
        const double cx = lo.margin + lo.usable * (2.0 * i + 1.0) / (2.0 * k1);
        int lx = static_cast<int>(std::lround(cx - lo.large / 2.0)) + jit();
        int ly = lo.top_large + jit();
        lx = std::clamp(lx, 0, S - lo.large);
        ly = std::clamp(ly, lo.top_small + lo.small + 1, S - lo.large);

        draw_shape(res.image, spec.shape1, lo.large, lx, ly, kColorRgb[spec.color1]);
        res.geometry.push_back({PlacedObject::Role::subject, spec.shape1, spec.color1, lx, ly,
                                lx + lo.large, ly + lo.large});

        // k2 small objects sit along the top edge of each large object.
        for (int j = 0; j < k2; ++j) {
            const double scx = lx + lo.large * (2.0 * j + 1.0) / (2.0 * k2);
            int sx = static_cast<int>(std::lround(scx - lo.small / 2.0));
            int sy = ly - 1 - lo.small;
            sx = std::clamp(sx, 0, S - lo.small);
            draw_shape(res.image, spec.shape2, lo.small, sx, sy, kColorRgb[spec.color2]);
            res.geometry.push_back({PlacedObject::Role::modifier, spec.shape2, spec.color2, sx, sy,
                                    sx + lo.small, sy + lo.small});
        }

        // The vp glyph is overlaid at the center of every subject object.
        const int gx = lx + (lo.large - lo.glyph) / 2;
        const int gy = ly + (lo.large - lo.glyph) / 2;
        for (auto [px, py] : glyph)
            res.image.set(gx + px, gy + py, glyph_color[0], glyph_color[1], glyph_color[2]);
        res.geometry.push_back(
            {PlacedObject::Role::glyph, spec.vp, -1, gx, gy, gx + lo.glyph, gy + lo.glyph});
    }
    return res;
}

int injection_count(double rate, int train_size) {
    return static_cast<int>(std::llround(rate * train_size));
}

SplitBundle build_splits(uint64_t seed, const SplitSizes& sizes, double injection_rate) {
    if (sizes.train < 0 || sizes.validation < 0 || sizes.test < 0)
        throw Error(Error::Kind::partition, "split sizes must be non-negative");
    if (injection_rate < 0.0 || injection_rate > 1.0)
        throw Error(Error::Kind::partition, "injection rate must lie in [0, 1]");

    std::vector<int> ambiguous, disambiguating;
    ambiguous.reserve(kSpecCount);
    for (int i = 0; i < kSpecCount; ++i) {
        const CaptionSpec s = spec_from_index(i);
        const bool equal = number_of_numeral(kNumerals[s.num1]) ==
                           number_of_numeral(kNumerals[s.num2]);
        (equal ? ambiguous : disambiguating).push_back(i);
    }

    if (sizes.train + sizes.validation > static_cast<int>(ambiguous.size()))
        throw Error(Error::Kind::partition,
                    "train+validation exceed the ambiguous pool (" +
                        std::to_string(ambiguous.size()) + ")");
    if (sizes.test > static_cast<int>(disambiguating.size()))
        throw Error(Error::Kind::partition, "test exceeds the disambiguating pool (" +
                                                std::to_string(disambiguating.size()) + ")");

    Rng rng(derive_seed(seed, /*stream=*/0xA57u));
    rng.shuffle(ambiguous);
    rng.shuffle(disambiguating);

    SplitBundle b;
    b.seed = seed;
    b.injection_rate = injection_rate;
    b.train.assign(ambiguous.begin(), ambiguous.begin() + sizes.train);
    b.validation.assign(ambiguous.begin() + sizes.train,
                        ambiguous.begin() + sizes.train + sizes.validation);
    b.test.assign(disambiguating.begin(), disambiguating.begin() + sizes.test);
    b.injection_pool.assign(disambiguating.begin() + sizes.test, disambiguating.end());
    b.injected_count = injection_count(injection_rate, sizes.train);
    if (b.injected_count > static_cast<int>(b.injection_pool.size()))
        throw Error(Error::Kind::partition, "injection pool too small for requested rate");
    return b;
}

}  // namespace poslab
