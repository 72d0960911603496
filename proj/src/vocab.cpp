#include "poslab/vocab.hpp"

#include <algorithm>
#include <set>

namespace poslab {

Vocabulary Vocabulary::from_captions(const std::vector<const TokenList*>& captions) {
    std::set<std::string> words;  // ordered, so ids are deterministic
    for (const TokenList* c : captions)
        for (const auto& t : *c) words.insert(t);

    Vocabulary v;
    v.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (const auto& w : words) v.id_to_token_.push_back(w);
    for (int i = 0; i < static_cast<int>(v.id_to_token_.size()); ++i)
        v.token_to_id_[v.id_to_token_[static_cast<size_t>(i)]] = i;
    return v;
}

}  // namespace poslab
