#include "poslab/grammar.hpp"

#include <algorithm>
#include <sstream>

namespace poslab {
namespace {

TokenList split_tokens(const std::string& s) {
    TokenList out;
    std::istringstream in(s);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

}  // namespace

Number number_from_string(const std::string& s) {
    if (s == "singular") return Number::singular;
    if (s == "plural") return Number::plural;
    throw Error(Error::Kind::config, "unknown grammatical number: " + s);
}

AgreementLabel label_from_string(const std::string& s) {
    if (s == "ambiguous") return AgreementLabel::ambiguous;
    if (s == "disambiguating") return AgreementLabel::disambiguating;
    throw Error(Error::Kind::config, "unknown agreement label: " + s);
}

VerbLexicon::VerbLexicon(std::vector<VerbEntry> entries) : entries_(std::move(entries)) {
    for (const auto& e : entries_) {
        if (e.singular_form.empty() || e.plural_form.empty())
            throw Error(Error::Kind::lexicon, "empty verb form for vp '" + e.id + "'");
        if (e.singular_form.size() != e.plural_form.size())
            throw Error(Error::Kind::lexicon, "inflections of vp '" + e.id + "' differ in length");
        for (size_t i = 1; i < e.singular_form.size(); ++i)
            if (e.singular_form[i] != e.plural_form[i])
                throw Error(Error::Kind::lexicon,
                            "vp '" + e.id + "' differs beyond the head verb");
        if (e.singular_form[0] == e.plural_form[0])
            throw Error(Error::Kind::lexicon, "vp '" + e.id + "' has identical head inflections");
    }
}

const VerbLexicon& VerbLexicon::artificial() {
    static const VerbLexicon lex = [] {
        auto vp = [](const char* id, const char* sing, const char* plur) {
            return VerbEntry{id, split_tokens(sing), split_tokens(plur)};
        };
        return VerbLexicon({
            vp("walk", "walks", "walk"),
            vp("sleep", "sleeps", "sleep"),
            vp("run_fast", "runs fast", "run fast"),
            vp("wave_hand", "waves its hand", "wave its hand"),
            vp("write_text", "writes a text", "write a text"),
            vp("take_bus", "takes a bus", "take a bus"),
            vp("take_photo", "takes a photo", "take a photo"),
            vp("play_soccer", "plays soccer", "play soccer"),
            vp("play_baseball", "plays baseball", "play baseball"),
            vp("throw_arrow", "throws an arrow at a target", "throw an arrow at a target"),
        });
    }();
    return lex;
}

const VerbEntry& VerbLexicon::find(const std::string& vp_id) const {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const VerbEntry& e) { return e.id == vp_id; });
    if (it == entries_.end()) throw Error(Error::Kind::lexicon, "unknown vp id: " + vp_id);
    return *it;
}

std::optional<std::pair<std::string, std::string>> VerbLexicon::head_forms(
    const std::string& token) const {
    for (const auto& e : entries_) {
        if (e.singular_form[0] == token || e.plural_form[0] == token)
            return std::make_pair(e.singular_form[0], e.plural_form[0]);
    }
    return std::nullopt;
}

Number number_of_numeral(const std::string& numeral) {
    if (numeral == "a") return Number::singular;
    if (numeral == "two" || numeral == "three") return Number::plural;
    throw Error(Error::Kind::lexicon, "unknown numeral: " + numeral);
}

int numeral_value(const std::string& numeral) {
    if (numeral == "a") return 1;
    if (numeral == "two") return 2;
    if (numeral == "three") return 3;
    throw Error(Error::Kind::lexicon, "unknown numeral: " + numeral);
}

AgreementLabel classify_agreement(const AgreementAnnotation& ann) {
    if (ann.verb_number != ann.subject_number)
        throw Error(Error::Kind::ill_formed, "verb does not agree with subject");
    return ann.subject_number == ann.attractor_number ? AgreementLabel::ambiguous
                                                      : AgreementLabel::disambiguating;
}

const TokenList& inflect_vp(const VerbLexicon& lexicon, const std::string& vp_id, Number number) {
    const VerbEntry& e = lexicon.find(vp_id);
    return number == Number::singular ? e.singular_form : e.plural_form;
}

MinimalPair make_minimal_pair(const TokenList& caption, const AgreementAnnotation& ann,
                              std::string image_ref, const std::string& verb_singular,
                              const std::string& verb_plural) {
    if (classify_agreement(ann) != AgreementLabel::disambiguating)
        throw Error(Error::Kind::contract, "minimal pairs are only defined on disambiguating items");
    if (ann.verb_index < 0 || ann.verb_index >= static_cast<int>(caption.size()))
        throw Error(Error::Kind::contract, "verb index out of range");

    const std::string& attested = caption[static_cast<size_t>(ann.verb_index)];
    const std::string& expected =
        ann.verb_number == Number::singular ? verb_singular : verb_plural;
    if (attested != expected)
        throw Error(Error::Kind::lexicon,
                    "verb token '" + attested + "' does not match supplied inflection '" +
                        expected + "'");

    MinimalPair pair;
    pair.image_ref = std::move(image_ref);
    pair.hierarchical_caption = caption;
    pair.linear_caption = caption;
    pair.linear_caption[static_cast<size_t>(ann.verb_index)] =
        ann.attractor_number == Number::singular ? verb_singular : verb_plural;
    pair.verb_index = ann.verb_index;
    pair.gold_number = ann.subject_number;
    return pair;
}

MinimalPair make_minimal_pair(const TokenList& caption, const AgreementAnnotation& ann,
                              std::string image_ref, const VerbLexicon& lexicon) {
    if (ann.verb_index < 0 || ann.verb_index >= static_cast<int>(caption.size()))
        throw Error(Error::Kind::contract, "verb index out of range");
    auto forms = lexicon.head_forms(caption[static_cast<size_t>(ann.verb_index)]);
    if (!forms)
        throw Error(Error::Kind::lexicon,
                    "verb token '" + caption[static_cast<size_t>(ann.verb_index)] +
                        "' not in lexicon");
    return make_minimal_pair(caption, ann, std::move(image_ref), forms->first, forms->second);
}

}  // namespace poslab
