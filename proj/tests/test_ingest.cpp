#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "poslab/dataset.hpp"
#include "poslab/ingest.hpp"

using namespace poslab;
namespace fs = std::filesystem;

namespace {

fs::path write_corpus(const std::string& name, const std::string& content) {
    const fs::path path = fs::temp_directory_path() / name;
    std::ofstream f(path, std::ios::trunc);
    f << content;
    return path;
}

// Mirrors the reference disambiguating caption "young girls dressed in
// colonial gear tie their shoes at farm".
const char* kGirlsRecord =
    R"({"id":"cc-1","tokens":["young","girls","dressed","in","colonial","gear","tie","their","shoes","at","farm"],)"
    R"("subject_index":1,"attractor_index":5,"verb_index":6,"subject_number":"plural",)"
    R"("attractor_number":"singular","verb_number":"plural","verb_singular_form":"ties","verb_plural_form":"tie"})";

// "girl aged stands with a hand on a tree alone": the verb's closest noun is
// the subject itself.
const char* kGirlRecord =
    R"({"id":"cc-2","tokens":["girl","aged","stands","with","a","hand","on","a","tree","alone"],)"
    R"("subject_index":0,"attractor_index":0,"verb_index":2,"subject_number":"singular",)"
    R"("attractor_number":"singular","verb_number":"singular","verb_singular_form":"stands","verb_plural_form":"stand"})";

const char* kBoysRecord =
    R"({"id":"cc-3","tokens":["young","boys","with","school","uniforms","and","backpacks","prepare","for","school"],)"
    R"("subject_index":1,"attractor_index":6,"verb_index":7,"subject_number":"plural",)"
    R"("attractor_number":"plural","verb_number":"plural","verb_singular_form":"prepares","verb_plural_form":"prepare"})";

}  // namespace

TEST_CASE("empty corpus loads as empty with no rejections") {
    const auto path = write_corpus("poslab_ingest_empty.jsonl", "");
    const CorpusLoad load = load_annotated_corpus(path.string());
    CHECK(load.records.empty());
    CHECK(load.rejections.empty());
}

TEST_CASE("valid records load with their annotations intact") {
    const auto path = write_corpus("poslab_ingest_ok.jsonl",
                                   std::string(kGirlsRecord) + "\n" + kGirlRecord + "\n");
    const CorpusLoad load = load_annotated_corpus(path.string());
    REQUIRE(load.records.size() == 2);
    CHECK(load.rejections.empty());

    const AnnotatedCaption& girls = load.records[0];
    CHECK(girls.id == "cc-1");
    CHECK(girls.tokens[1] == "girls");
    CHECK(girls.annotation.subject_number == Number::plural);
    CHECK(girls.annotation.attractor_number == Number::singular);
    CHECK(classify_agreement(girls.annotation) == AgreementLabel::disambiguating);
    CHECK_FALSE(girls.image_path.has_value());
}

TEST_CASE("ill-formed agreement is rejected with a diagnostic") {
    // subject plural but verb annotated singular
    std::string bad = kGirlsRecord;
    const auto at = bad.find("\"verb_number\":\"plural\"");
    bad.replace(at, std::string("\"verb_number\":\"plural\"").size(),
                "\"verb_number\":\"singular\"");
    // keep the token consistent with the claimed inflection
    const auto tok = bad.find("\"tie\",\"their\"");
    bad.replace(tok, std::string("\"tie\",\"their\"").size(), "\"ties\",\"their\"");

    const auto path = write_corpus("poslab_ingest_bad.jsonl", bad + "\n");
    const CorpusLoad load = load_annotated_corpus(path.string());
    CHECK(load.records.empty());
    REQUIRE(load.rejections.size() == 1);
    CHECK(load.rejections[0].id == "cc-1");
    CHECK(std::string(load.rejections[0].reason).find("ill-formed agreement") !=
          std::string::npos);
}

TEST_CASE("malformed records are collected, good ones kept") {
    const std::string content = std::string(kGirlsRecord) + "\n" +
                                "{\"id\":\"broken\"\n" +  // unparseable
                                R"({"id":"x","tokens":["a"],"subject_index":5,"attractor_index":0,"verb_index":0,)" +
                                R"("subject_number":"singular","attractor_number":"singular","verb_number":"singular",)" +
                                R"("verb_singular_form":"a","verb_plural_form":"b"})" + "\n" +  // bad index
                                R"({"id":"y","tokens":["runs"],"subject_index":0,"attractor_index":0,"verb_index":0,)" +
                                R"("subject_number":"singular","attractor_number":"singular","verb_number":"singular",)" +
                                R"("verb_singular_form":"runs","verb_plural_form":"run","extra_key":1})" + "\n";
    const auto path = write_corpus("poslab_ingest_mixed.jsonl", content);
    const CorpusLoad load = load_annotated_corpus(path.string());
    CHECK(load.records.size() == 1);
    CHECK(load.rejections.size() == 3);
}

TEST_CASE("verb token must match the annotated inflection") {
    std::string bad = kGirlsRecord;
    const auto at = bad.find("\"verb_plural_form\":\"tie\"");
    bad.replace(at, std::string("\"verb_plural_form\":\"tie\"").size(),
                "\"verb_plural_form\":\"bind\"");
    const auto path = write_corpus("poslab_ingest_tok.jsonl", bad + "\n");
    const CorpusLoad load = load_annotated_corpus(path.string());
    CHECK(load.records.empty());
    REQUIRE(load.rejections.size() == 1);
}

TEST_CASE("partition matches the reference three-row example") {
    const auto path = write_corpus(
        "poslab_ingest_three.jsonl",
        std::string(kGirlRecord) + "\n" + kBoysRecord + "\n" + kGirlsRecord + "\n");
    const CorpusLoad load = load_annotated_corpus(path.string());
    REQUIRE(load.records.size() == 3);

    auto [ambiguous, disambiguating] = partition_corpus(load.records);
    CHECK(ambiguous.size() == 2);
    CHECK(disambiguating.size() == 1);
    CHECK(disambiguating[0].id == "cc-1");
    CHECK(ambiguous.size() + disambiguating.size() == load.records.size());

    // membership is order-independent
    std::vector<AnnotatedCaption> reversed(load.records.rbegin(), load.records.rend());
    auto [amb2, dis2] = partition_corpus(reversed);
    CHECK(amb2.size() == 2);
    CHECK(dis2.size() == 1);
    CHECK(dis2[0].id == "cc-1");
}

TEST_CASE("loaded records reproduce their verb token from the stored forms") {
    const auto path = write_corpus("poslab_ingest_verbtok.jsonl",
                                   std::string(kGirlsRecord) + "\n" + kGirlRecord + "\n" +
                                       kBoysRecord + "\n");
    for (const auto& r : load_annotated_corpus(path.string()).records) {
        const std::string& expect = r.annotation.verb_number == Number::singular
                                        ? r.verb_singular_form
                                        : r.verb_plural_form;
        CHECK(r.tokens[static_cast<size_t>(r.annotation.verb_index)] == expect);
    }
}

TEST_CASE("ingested dataset round trip with minimal pairs from record forms") {
    // Build a corpus large enough to split: 6 ambiguous + 4 disambiguating.
    std::string content;
    for (int i = 0; i < 6; ++i) {
        std::string rec = kGirlRecord;
        rec.replace(rec.find("cc-2"), 4, "am-" + std::to_string(i));
        content += rec + "\n";
    }
    for (int i = 0; i < 4; ++i) {
        std::string rec = kGirlsRecord;
        rec.replace(rec.find("cc-1"), 4, "di-" + std::to_string(i));
        content += rec + "\n";
    }
    const auto corpus = write_corpus("poslab_ingest_ds.jsonl", content);

    const fs::path root = fs::temp_directory_path() / "poslab_ingest_ds_dir";
    fs::remove_all(root);
    const CorpusLoad load = load_annotated_corpus(corpus.string());
    write_ingested_dataset(root, load.records, 5, {4, 2, 3}, 0.25, false);

    const LoadedDataset ds = load_dataset(root);
    CHECK(ds.kind == "ingested");
    CHECK(ds.train.size() == 4);
    CHECK(ds.validation.size() == 2);
    CHECK(ds.test_items.size() == 3);
    CHECK(ds.injection_pool.size() == 1);
    REQUIRE(ds.test_pairs.size() == 3);
    for (const auto& pair : ds.test_pairs) {
        CHECK(pair.hierarchical_caption[static_cast<size_t>(pair.verb_index)] == "tie");
        CHECK(pair.linear_caption[static_cast<size_t>(pair.verb_index)] == "ties");
    }
    CHECK_FALSE(ds.train[0].has_image);
    fs::remove_all(root);
}
