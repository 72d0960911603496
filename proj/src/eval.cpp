#include "poslab/eval.hpp"

#include <algorithm>
#include <cstdio>

namespace poslab {

PairPrediction classify_pair(const MinimalPair& pair, double logprob_hier, double logprob_lin) {
    PairPrediction p;
    p.pair_id = pair.pair_id;
    p.gold_number = pair.gold_number;
    p.logprob_hier = logprob_hier;
    p.logprob_lin = logprob_lin;
    p.tie = logprob_hier == logprob_lin;
    const Number linear_number =
        pair.gold_number == Number::singular ? Number::plural : Number::singular;
    p.predicted_number = logprob_hier > logprob_lin ? pair.gold_number : linear_number;
    return p;
}

EvalReport macro_f1(const std::vector<PairPrediction>& predictions) {
    if (predictions.empty())
        throw Error(Error::Kind::evaluation, "cannot evaluate an empty prediction list");

    EvalReport rep;
    rep.n_items = static_cast<int>(predictions.size());

    double f1s[2];
    for (int cls = 0; cls < 2; ++cls) {
        const Number c = cls == 0 ? Number::singular : Number::plural;
        long tp = 0, fp = 0, fn = 0;
        for (const auto& p : predictions) {
            if (p.gold_number == c && p.predicted_number == c) ++tp;
            if (p.gold_number != c && p.predicted_number == c) ++fp;
            if (p.gold_number == c && p.predicted_number != c) ++fn;
        }
        if (tp + fp + fn == 0)
            rep.warnings.push_back(std::string("class '") + to_string(c) +
                                   "' absent from gold and predictions; F1 counted as 0");
        const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        f1s[cls] = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    rep.f1_singular = f1s[0];
    rep.f1_plural = f1s[1];
    rep.macro_f1 = 100.0 * 0.5 * (f1s[0] + f1s[1]);
    for (const auto& p : predictions) rep.n_ties += p.tie ? 1 : 0;
    return rep;
}

double rouge_l_f1(const TokenList& hypothesis, const TokenList& reference) {
    const size_t n = hypothesis.size(), m = reference.size();
    if (n == 0 || m == 0) return 0.0;

    // two-row LCS
    std::vector<size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (hypothesis[i - 1] == reference[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    const size_t lcs = prev[m];
    if (lcs == 0) return 0.0;
    const double p = static_cast<double>(lcs) / n;
    const double r = static_cast<double>(lcs) / m;
    return 2.0 * p * r / (p + r);
}

std::string predictions_csv(const std::vector<PairPrediction>& predictions) {
    std::string out = "pair_id,gold,predicted,logprob_hier,logprob_lin,tie\n";
    char buf[160];
    for (const auto& p : predictions) {
        std::snprintf(buf, sizeof(buf), ",%s,%s,%.6f,%.6f,%d\n", to_string(p.gold_number),
                      to_string(p.predicted_number), p.logprob_hier, p.logprob_lin, p.tie ? 1 : 0);
        out += p.pair_id;
        out += buf;
    }
    return out;
}

}  // namespace poslab
