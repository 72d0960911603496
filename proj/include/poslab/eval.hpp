#pragma once

#include <string>
#include <vector>

#include "poslab/grammar.hpp"
#include "poslab/image.hpp"
#include "poslab/model.hpp"
#include "poslab/vocab.hpp"

namespace poslab {

struct PairPrediction {
    std::string pair_id;
    Number gold_number = Number::singular;
    Number predicted_number = Number::singular;
    double logprob_hier = 0.0;
    double logprob_lin = 0.0;
    bool tie = false;
};

struct EvalReport {
    double macro_f1 = 0.0;  // in [0, 100]
    double f1_singular = 0.0;
    double f1_plural = 0.0;
    int n_items = 0;
    int n_ties = 0;
    std::vector<std::string> warnings;  // absent-class notes
};

// Scores both captions of a pair against its image; the prediction is the
// verb number of the higher-probability caption. Exact ties resolve to the
// linear caption (against the hierarchical choice) and are flagged.
PairPrediction classify_pair(const MinimalPair& pair, double logprob_hier, double logprob_lin);

template <typename Scalar>
PairPrediction prefer_hierarchical(Net<Scalar>& net, const Vocabulary& vocab,
                                   const MinimalPair& pair, const ImageBuffer& image) {
    const double lp_h = net.caption_logprob(image, vocab.encode(pair.hierarchical_caption));
    const double lp_l = net.caption_logprob(image, vocab.encode(pair.linear_caption));
    return classify_pair(pair, lp_h, lp_l);
}

// Batched scoring over many pairs; images[i] belongs to pairs[i].
template <typename Scalar>
std::vector<PairPrediction> score_minimal_pairs(Net<Scalar>& net, const Vocabulary& vocab,
                                                const std::vector<MinimalPair>& pairs,
                                                const std::vector<const ImageBuffer*>& images,
                                                int batch_pairs = 64) {
    if (pairs.size() != images.size())
        throw Error(Error::Kind::contract, "one image per minimal pair required");
    std::vector<PairPrediction> out;
    out.reserve(pairs.size());
    for (size_t start = 0; start < pairs.size(); start += static_cast<size_t>(batch_pairs)) {
        const size_t end = std::min(pairs.size(), start + static_cast<size_t>(batch_pairs));
        std::vector<const uint8_t*> imgs;
        std::vector<std::vector<int>> seqs;
        for (size_t i = start; i < end; ++i) {
            imgs.push_back(images[i]->pixels.data());
            seqs.push_back(vocab.encode(pairs[i].hierarchical_caption));
            seqs.push_back(vocab.encode(pairs[i].linear_caption));
        }
        const std::vector<double> lp = net.score_captions(imgs, seqs, /*seqs_per_image=*/2);
        for (size_t i = start; i < end; ++i)
            out.push_back(classify_pair(pairs[i], lp[2 * (i - start)], lp[2 * (i - start) + 1]));
    }
    return out;
}

// Unweighted mean of the per-class F1 over {singular, plural} gold verb
// numbers, scaled by 100. An absent class contributes 0 with a warning.
EvalReport macro_f1(const std::vector<PairPrediction>& predictions);

// LCS-based F1 in [0, 1].
double rouge_l_f1(const TokenList& hypothesis, const TokenList& reference);

std::string predictions_csv(const std::vector<PairPrediction>& predictions);

}  // namespace poslab
