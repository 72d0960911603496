#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "poslab/grammar.hpp"

namespace poslab {

// Token inventory frozen from the training split. Ids 0..3 are reserved;
// unseen tokens map to UNK.
class Vocabulary {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;

    static Vocabulary from_captions(const std::vector<const TokenList*>& captions);

    int size() const { return static_cast<int>(id_to_token_.size()); }

    int encode(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? unk_id : it->second;
    }

    std::vector<int> encode(const TokenList& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) ids.push_back(encode(t));
        return ids;
    }

    const std::string& decode(int id) const { return id_to_token_.at(static_cast<size_t>(id)); }

    TokenList decode(const std::vector<int>& ids) const {
        TokenList out;
        out.reserve(ids.size());
        for (int id : ids) out.push_back(decode(id));
        return out;
    }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace poslab
