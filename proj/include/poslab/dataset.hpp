#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "poslab/artgen.hpp"
#include "poslab/grammar.hpp"
#include "poslab/image.hpp"
#include "poslab/ingest.hpp"

namespace poslab {

// Dataset directory layout:
//   manifest.json    split membership, seed, sizes, render config, counts
//   records.jsonl    one annotation record per pair
//   images/<id>.png  8-bit RGB raster per pair (artificial datasets)
// Ingested datasets reference images by path instead of owning them.

struct DatasetItem {
    std::string id;
    TokenList tokens;
    AgreementAnnotation annotation;
    AgreementLabel label = AgreementLabel::ambiguous;
    ImageBuffer image;
    bool has_image = false;
    // Inflection pair for minimal-pair construction on ingested records;
    // artificial records resolve forms through the verb lexicon.
    std::string verb_singular;
    std::string verb_plural;
};

struct LoadedDataset {
    std::string kind;  // "artificial" | "ingested"
    uint64_t seed = 0;
    SplitSizes sizes;
    double injection_rate = 0.0;
    int canvas = 0;  // 0 when the dataset carries no images

    std::vector<DatasetItem> train;
    std::vector<DatasetItem> validation;
    std::vector<DatasetItem> test_items;
    std::vector<MinimalPair> test_pairs;  // test_pairs[i] built from test_items[i]
    std::vector<DatasetItem> injection_pool;

    // First round(rate * |train|) pool items; throws a partition error if the
    // pool on disk is too small for the rate.
    std::vector<const DatasetItem*> injected_for_rate(double rate) const;
};

struct ArtificialWriteOptions {
    RenderConfig render;
    // Images and records are materialized for the pool prefix that supports
    // rates up to max_rate; the manifest still records the full pool order.
    double max_rate = 0.02;
    bool force = false;
};

struct DatasetCounts {
    int total = 0;
    int ambiguous = 0;
    int disambiguating = 0;
};

DatasetCounts write_artificial_dataset(const std::filesystem::path& root, const SplitBundle& bundle,
                                       const SplitSizes& sizes,
                                       const ArtificialWriteOptions& options);

// Partitions already-annotated records with the same split machinery and
// writes the same directory layout (kind "ingested").
DatasetCounts write_ingested_dataset(const std::filesystem::path& root,
                                     const std::vector<AnnotatedCaption>& records, uint64_t seed,
                                     const SplitSizes& sizes, double injection_rate, bool force);

LoadedDataset load_dataset(const std::filesystem::path& root);

}  // namespace poslab
