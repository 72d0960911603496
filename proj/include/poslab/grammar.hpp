#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poslab/error.hpp"

namespace poslab {

enum class Number { singular, plural };

enum class AgreementLabel { ambiguous, disambiguating };

inline const char* to_string(Number n) { return n == Number::singular ? "singular" : "plural"; }
inline const char* to_string(AgreementLabel l) {
    return l == AgreementLabel::ambiguous ? "ambiguous" : "disambiguating";
}
Number number_from_string(const std::string& s);
AgreementLabel label_from_string(const std::string& s);

using TokenList = std::vector<std::string>;

// Token positions of the agreement triple plus their grammatical numbers.
// For artificial captions subject < attractor < verb always holds; ingested
// records may carry other orders (including subject == attractor when the
// verb's closest noun is the subject itself).
struct AgreementAnnotation {
    int subject_index = -1;
    int verb_index = -1;
    int attractor_index = -1;
    Number subject_number = Number::singular;
    Number attractor_number = Number::singular;
    Number verb_number = Number::singular;
};

// Verb-phrase lexicon with both inflections spelled out per entry. The two
// forms differ only in the head verb, which is the first token.
struct VerbEntry {
    std::string id;
    TokenList singular_form;
    TokenList plural_form;
};

class VerbLexicon {
public:
    explicit VerbLexicon(std::vector<VerbEntry> entries);

    // The closed 10-item verb-phrase inventory of the artificial setting.
    static const VerbLexicon& artificial();

    const std::vector<VerbEntry>& entries() const { return entries_; }
    const VerbEntry& find(const std::string& vp_id) const;

    // (singular head, plural head) for a head-verb token of either number,
    // e.g. "plays" -> ("plays", "play"). Shared heads ("play soccer" /
    // "play baseball") resolve consistently.
    std::optional<std::pair<std::string, std::string>> head_forms(const std::string& token) const;

private:
    std::vector<VerbEntry> entries_;
};

// An image plus two captions that differ at exactly the head-verb token:
// the attested one agrees with the subject (hierarchical), the counterfactual
// one with the attractor (linear).
struct MinimalPair {
    std::string pair_id;
    std::string image_ref;
    TokenList hierarchical_caption;
    TokenList linear_caption;
    int verb_index = -1;
    Number gold_number = Number::singular;
};

Number number_of_numeral(const std::string& numeral);

// Count denoted by a numeral token ("a" -> 1, "two" -> 2, "three" -> 3).
int numeral_value(const std::string& numeral);

// Ambiguous iff subject and attractor share a number. Requires the caption
// to be hierarchically well-formed (verb agrees with subject); anything else
// is rejected rather than classified.
AgreementLabel classify_agreement(const AgreementAnnotation& ann);

const TokenList& inflect_vp(const VerbLexicon& lexicon, const std::string& vp_id, Number number);

// Builds the pair from a disambiguating caption by reinflecting the head verb
// to the attractor's number; every other token is untouched.
MinimalPair make_minimal_pair(const TokenList& caption, const AgreementAnnotation& ann,
                              std::string image_ref, const std::string& verb_singular,
                              const std::string& verb_plural);
MinimalPair make_minimal_pair(const TokenList& caption, const AgreementAnnotation& ann,
                              std::string image_ref, const VerbLexicon& lexicon);

}  // namespace poslab
