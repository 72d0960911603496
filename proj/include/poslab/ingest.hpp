#pragma once

#include <optional>
#include <string>
#include <vector>

#include "poslab/grammar.hpp"

namespace poslab {

// A parsed caption record as produced by an upstream annotation pipeline.
// The artifact trusts the provided indices and numbers; it embeds no parser.
struct AnnotatedCaption {
    std::string id;
    TokenList tokens;
    AgreementAnnotation annotation;
    std::string verb_singular_form;
    std::string verb_plural_form;
    std::optional<std::string> image_path;  // absent -> usable in no-vision runs only
};

struct Rejection {
    std::string id;  // empty when the id itself could not be read
    std::string reason;
};

struct CorpusLoad {
    std::vector<AnnotatedCaption> records;
    std::vector<Rejection> rejections;
};

// Reads a line-delimited corpus, one JSON record per line with fields exactly
// {id, tokens, subject_index, attractor_index, verb_index, subject_number,
//  attractor_number, verb_number, verb_singular_form, verb_plural_form,
//  image_path?}. Invalid records go to the rejection report instead of
// aborting the load.
CorpusLoad load_annotated_corpus(const std::string& path);

std::pair<std::vector<AnnotatedCaption>, std::vector<AnnotatedCaption>> partition_corpus(
    const std::vector<AnnotatedCaption>& records);

}  // namespace poslab
