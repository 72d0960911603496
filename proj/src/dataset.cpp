#include "poslab/dataset.hpp"

#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "poslab/error.hpp"
#include "poslab/png_io.hpp"
#include "poslab/rng.hpp"

namespace poslab {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kManifestVersion = 1;

void ensure_fresh_dir(const fs::path& root, bool force) {
    if (fs::exists(root)) {
        if (!force)
            throw Error(Error::Kind::io,
                        "dataset directory already exists (use --force): " + root.string());
        fs::remove_all(root);
    }
    fs::create_directories(root / "images");
}

json record_line_artificial(const std::string& id, const RealizedCaption& rc,
                            AgreementLabel label) {
    json j;
    j["id"] = id;
    j["tokens"] = rc.tokens;
    j["subject_index"] = rc.annotation.subject_index;
    j["attractor_index"] = rc.annotation.attractor_index;
    j["verb_index"] = rc.annotation.verb_index;
    j["subject_number"] = to_string(rc.annotation.subject_number);
    j["attractor_number"] = to_string(rc.annotation.attractor_number);
    j["label"] = to_string(label);
    return j;
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Error::Kind::io, "cannot open for write: " + path.string());
    f << content;
    if (!f) throw Error(Error::Kind::io, "write failed: " + path.string());
}

json load_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw Error(Error::Kind::io, "cannot open: " + path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw Error(Error::Kind::io, "malformed json in " + path.string() + ": " + e.what());
    }
    return j;
}

}  // namespace

std::vector<const DatasetItem*> LoadedDataset::injected_for_rate(double rate) const {
    const int want = injection_count(rate, static_cast<int>(train.size()));
    if (want > static_cast<int>(injection_pool.size()))
        throw Error(Error::Kind::partition,
                    "injection rate " + std::to_string(rate) + " needs " + std::to_string(want) +
                        " pool items but only " + std::to_string(injection_pool.size()) +
                        " are materialized");
    std::vector<const DatasetItem*> out;
    out.reserve(static_cast<size_t>(want));
    for (int i = 0; i < want; ++i) out.push_back(&injection_pool[static_cast<size_t>(i)]);
    return out;
}

DatasetCounts write_artificial_dataset(const fs::path& root, const SplitBundle& bundle,
                                       const SplitSizes& sizes,
                                       const ArtificialWriteOptions& options) {
    ensure_fresh_dir(root, options.force);

    const int pool_materialized =
        std::min(static_cast<int>(bundle.injection_pool.size()),
                 injection_count(options.max_rate, sizes.train));

    DatasetCounts counts;
    counts.total = kSpecCount;
    for (int i = 0; i < kSpecCount; ++i) {
        const CaptionSpec s = spec_from_index(i);
        if (number_of_numeral(numeral_words()[s.num1]) == number_of_numeral(numeral_words()[s.num2]))
            ++counts.ambiguous;
    }
    counts.disambiguating = counts.total - counts.ambiguous;

    std::string records;
    records.reserve(1 << 22);
    auto emit = [&](int spec_idx) {
        const CaptionSpec s = spec_from_index(spec_idx);
        const RealizedCaption rc = realize_caption(s);
        const AgreementLabel label = classify_agreement(rc.annotation);
        const std::string id = std::to_string(spec_idx);
        records += record_line_artificial(id, rc, label).dump();
        records += '\n';
        write_png((root / "images" / (id + ".png")).string(),
                  render_image(s, options.render).image);
    };

    for (int idx : bundle.train) emit(idx);
    for (int idx : bundle.validation) emit(idx);
    for (int idx : bundle.test) emit(idx);
    for (int i = 0; i < pool_materialized; ++i) emit(bundle.injection_pool[static_cast<size_t>(i)]);

    write_text_file(root / "records.jsonl", records);

    json manifest;
    manifest["version"] = kManifestVersion;
    manifest["kind"] = "artificial";
    manifest["seed"] = bundle.seed;
    manifest["sizes"] = {{"train", sizes.train},
                         {"validation", sizes.validation},
                         {"test", sizes.test}};
    manifest["injection_rate"] = bundle.injection_rate;
    manifest["injected_count"] = bundle.injected_count;
    manifest["pool_materialized"] = pool_materialized;
    manifest["render"] = {{"canvas_size", options.render.canvas_size},
                          {"margin_fraction", options.render.margin_fraction},
                          {"small_object_fraction", options.render.small_object_fraction}};
    manifest["counts"] = {{"total", counts.total},
                          {"ambiguous", counts.ambiguous},
                          {"disambiguating", counts.disambiguating}};
    manifest["splits"] = {{"train", bundle.train},
                          {"validation", bundle.validation},
                          {"test", bundle.test},
                          {"injection_pool", bundle.injection_pool}};
    write_text_file(root / "manifest.json", manifest.dump(2) + "\n");
    return counts;
}

DatasetCounts write_ingested_dataset(const fs::path& root,
                                     const std::vector<AnnotatedCaption>& records, uint64_t seed,
                                     const SplitSizes& sizes, double injection_rate, bool force) {
    auto [ambiguous, disambiguating] = partition_corpus(records);

    if (sizes.train + sizes.validation > static_cast<int>(ambiguous.size()))
        throw Error(Error::Kind::partition, "train+validation exceed the ambiguous pool (" +
                                                std::to_string(ambiguous.size()) + ")");
    if (sizes.test > static_cast<int>(disambiguating.size()))
        throw Error(Error::Kind::partition, "test exceeds the disambiguating pool (" +
                                                std::to_string(disambiguating.size()) + ")");

    ensure_fresh_dir(root, force);

    Rng rng(derive_seed(seed, /*stream=*/0xA57u));
    std::vector<int> amb_order = rng.permutation(static_cast<int>(ambiguous.size()));
    std::vector<int> dis_order = rng.permutation(static_cast<int>(disambiguating.size()));

    const int injected = injection_count(injection_rate, sizes.train);
    if (injected > static_cast<int>(disambiguating.size()) - sizes.test)
        throw Error(Error::Kind::partition, "injection pool too small for requested rate");

    std::string lines;
    std::vector<std::string> train_ids, val_ids, test_ids, pool_ids;
    auto emit = [&](const AnnotatedCaption& r, std::vector<std::string>& ids) {
        json j;
        j["id"] = r.id;
        j["tokens"] = r.tokens;
        j["subject_index"] = r.annotation.subject_index;
        j["attractor_index"] = r.annotation.attractor_index;
        j["verb_index"] = r.annotation.verb_index;
        j["subject_number"] = to_string(r.annotation.subject_number);
        j["attractor_number"] = to_string(r.annotation.attractor_number);
        j["verb_number"] = to_string(r.annotation.verb_number);
        j["verb_singular_form"] = r.verb_singular_form;
        j["verb_plural_form"] = r.verb_plural_form;
        if (r.image_path) j["image_path"] = *r.image_path;
        j["label"] = to_string(classify_agreement(r.annotation));
        lines += j.dump();
        lines += '\n';
        ids.push_back(r.id);
    };

    for (int i = 0; i < sizes.train; ++i) emit(ambiguous[static_cast<size_t>(amb_order[i])], train_ids);
    for (int i = 0; i < sizes.validation; ++i)
        emit(ambiguous[static_cast<size_t>(amb_order[sizes.train + i])], val_ids);
    for (int i = 0; i < sizes.test; ++i)
        emit(disambiguating[static_cast<size_t>(dis_order[i])], test_ids);
    for (int i = sizes.test; i < static_cast<int>(disambiguating.size()); ++i)
        emit(disambiguating[static_cast<size_t>(dis_order[i])], pool_ids);

    write_text_file(root / "records.jsonl", lines);

    DatasetCounts counts{static_cast<int>(records.size()), static_cast<int>(ambiguous.size()),
                         static_cast<int>(disambiguating.size())};
    json manifest;
    manifest["version"] = kManifestVersion;
    manifest["kind"] = "ingested";
    manifest["seed"] = seed;
    manifest["sizes"] = {{"train", sizes.train},
                         {"validation", sizes.validation},
                         {"test", sizes.test}};
    manifest["injection_rate"] = injection_rate;
    manifest["injected_count"] = injected;
    manifest["counts"] = {{"total", counts.total},
                          {"ambiguous", counts.ambiguous},
                          {"disambiguating", counts.disambiguating}};
    manifest["splits"] = {{"train", train_ids},
                          {"validation", val_ids},
                          {"test", test_ids},
                          {"injection_pool", pool_ids}};
    write_text_file(root / "manifest.json", manifest.dump(2) + "\n");
    return counts;
}

LoadedDataset load_dataset(const fs::path& root) {
    const json manifest = load_json_file(root / "manifest.json");
    if (!manifest.contains("version") || manifest.at("version").get<int>() != kManifestVersion)
        throw Error(Error::Kind::io, "unsupported dataset manifest version");

    LoadedDataset ds;
    ds.kind = manifest.at("kind").get<std::string>();
    ds.seed = manifest.at("seed").get<uint64_t>();
    ds.sizes.train = manifest.at("sizes").at("train").get<int>();
    ds.sizes.validation = manifest.at("sizes").at("validation").get<int>();
    ds.sizes.test = manifest.at("sizes").at("test").get<int>();
    ds.injection_rate = manifest.at("injection_rate").get<double>();
    if (ds.kind == "artificial")
        ds.canvas = manifest.at("render").at("canvas_size").get<int>();

    // Index records by id.
    std::unordered_map<std::string, DatasetItem> items;
    {
        std::ifstream in(root / "records.jsonl");
        if (!in) throw Error(Error::Kind::io, "cannot open records.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                throw Error(Error::Kind::io, std::string("malformed record line: ") + e.what());
            }
            DatasetItem item;
            item.id = j.at("id").get<std::string>();
            item.tokens = j.at("tokens").get<TokenList>();
            item.annotation.subject_index = j.at("subject_index").get<int>();
            item.annotation.attractor_index = j.at("attractor_index").get<int>();
            item.annotation.verb_index = j.at("verb_index").get<int>();
            item.annotation.subject_number =
                number_from_string(j.at("subject_number").get<std::string>());
            item.annotation.attractor_number =
                number_from_string(j.at("attractor_number").get<std::string>());
            item.annotation.verb_number = item.annotation.subject_number;
            item.label = label_from_string(j.at("label").get<std::string>());
            if (item.label != classify_agreement(item.annotation))
                throw Error(Error::Kind::io, "record " + item.id + " label disagrees with indices");

            if (ds.kind == "artificial") {
                item.image = read_png((root / "images" / (item.id + ".png")).string());
                item.has_image = true;
            } else {
                if (j.contains("verb_number"))
                    item.annotation.verb_number =
                        number_from_string(j.at("verb_number").get<std::string>());
                item.verb_singular = j.at("verb_singular_form").get<std::string>();
                item.verb_plural = j.at("verb_plural_form").get<std::string>();
                if (j.contains("image_path")) {
                    fs::path p = j.at("image_path").get<std::string>();
                    if (p.is_relative()) p = root / p;
                    item.image = read_png(p.string());
                    item.has_image = true;
                    if (ds.canvas == 0) ds.canvas = item.image.width;
                    if (item.image.width != ds.canvas || item.image.height != ds.canvas)
                        item.image = resize_bilinear(item.image, ds.canvas, ds.canvas);
                }
            }
            items.emplace(item.id, std::move(item));
        }
    }

    auto take = [&](const json& ids, std::vector<DatasetItem>& out, bool required) {
        for (const auto& jid : ids) {
            std::string id = jid.is_string() ? jid.get<std::string>()
                                             : std::to_string(jid.get<long long>());
            auto it = items.find(id);
            if (it == items.end()) {
                if (required) throw Error(Error::Kind::io, "missing record for id " + id);
                continue;  // pool entries beyond the materialized prefix
            }
            out.push_back(it->second);
        }
    };

    const json& splits = manifest.at("splits");
    take(splits.at("train"), ds.train, true);
    take(splits.at("validation"), ds.validation, true);
    take(splits.at("test"), ds.test_items, true);
    take(splits.at("injection_pool"), ds.injection_pool, false);

    const VerbLexicon& lex = VerbLexicon::artificial();
    ds.test_pairs.reserve(ds.test_items.size());
    for (const auto& item : ds.test_items) {
        MinimalPair pair =
            ds.kind == "artificial"
                ? make_minimal_pair(item.tokens, item.annotation, item.id, lex)
                : make_minimal_pair(item.tokens, item.annotation, item.id, item.verb_singular,
                                    item.verb_plural);
        pair.pair_id = item.id;
        ds.test_pairs.push_back(std::move(pair));
    }
    return ds;
}

}  // namespace poslab
