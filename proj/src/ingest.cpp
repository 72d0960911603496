#include "poslab/ingest.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "poslab/error.hpp"

namespace poslab {
namespace {

using nlohmann::json;

const std::set<std::string> kRequiredKeys = {
    "id",           "tokens",          "subject_index",      "attractor_index",
    "verb_index",   "subject_number",  "attractor_number",   "verb_number",
    "verb_singular_form", "verb_plural_form"};

AnnotatedCaption parse_record(const json& j) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (kRequiredKeys.count(it.key()) == 0 && it.key() != "image_path")
            throw Error(Error::Kind::config, "unknown field '" + it.key() + "'");
    }
    for (const auto& k : kRequiredKeys)
        if (!j.contains(k)) throw Error(Error::Kind::config, "missing field '" + k + "'");

    AnnotatedCaption r;
    r.id = j.at("id").get<std::string>();
    r.tokens = j.at("tokens").get<TokenList>();
    r.annotation.subject_index = j.at("subject_index").get<int>();
    r.annotation.attractor_index = j.at("attractor_index").get<int>();
    r.annotation.verb_index = j.at("verb_index").get<int>();
    r.annotation.subject_number = number_from_string(j.at("subject_number").get<std::string>());
    r.annotation.attractor_number = number_from_string(j.at("attractor_number").get<std::string>());
    r.annotation.verb_number = number_from_string(j.at("verb_number").get<std::string>());
    r.verb_singular_form = j.at("verb_singular_form").get<std::string>();
    r.verb_plural_form = j.at("verb_plural_form").get<std::string>();
    if (j.contains("image_path")) r.image_path = j.at("image_path").get<std::string>();

    const int n = static_cast<int>(r.tokens.size());
    if (n == 0) throw Error(Error::Kind::config, "empty token list");
    if (r.annotation.subject_index < 0 || r.annotation.subject_index >= n ||
        r.annotation.attractor_index < 0 || r.annotation.attractor_index >= n ||
        r.annotation.verb_index < 0 || r.annotation.verb_index >= n)
        throw Error(Error::Kind::config, "annotation index out of bounds");

    const std::string& expected = r.annotation.verb_number == Number::singular
                                      ? r.verb_singular_form
                                      : r.verb_plural_form;
    if (r.tokens[static_cast<size_t>(r.annotation.verb_index)] != expected)
        throw Error(Error::Kind::config, "verb token does not match its annotated inflection");

    if (r.annotation.verb_number != r.annotation.subject_number)
        throw Error(Error::Kind::ill_formed, "ill-formed agreement");

    return r;
}

}  // namespace

CorpusLoad load_annotated_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Error::Kind::io, "cannot open corpus: " + path);

    CorpusLoad out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::string id;
        try {
            json j = json::parse(line);
            if (j.contains("id") && j.at("id").is_string()) id = j.at("id").get<std::string>();
            out.records.push_back(parse_record(j));
        } catch (const Error& e) {
            out.rejections.push_back({id, e.what()});
        } catch (const json::exception& e) {
            out.rejections.push_back({id, std::string("line ") + std::to_string(lineno) +
                                              ": malformed record: " + e.what()});
        }
    }
    if (in.bad()) throw Error(Error::Kind::io, "read failure on corpus: " + path);
    return out;
}

std::pair<std::vector<AnnotatedCaption>, std::vector<AnnotatedCaption>> partition_corpus(
    const std::vector<AnnotatedCaption>& records) {
    std::pair<std::vector<AnnotatedCaption>, std::vector<AnnotatedCaption>> out;
    for (const auto& r : records) {
        if (classify_agreement(r.annotation) == AgreementLabel::ambiguous)
            out.first.push_back(r);
        else
            out.second.push_back(r);
    }
    return out;
}

}  // namespace poslab
