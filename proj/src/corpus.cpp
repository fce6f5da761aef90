#include "blkprune/eval.hpp"

#include <random>

namespace blkprune {

TokenDataset synth_corpus(const CorpusConfig& cc) {
    if (cc.vocab_size < 2 || cc.branching <= 0 || cc.copy_min == 0 || cc.copy_max < cc.copy_min) {
        throw ContractError("synth_corpus: bad configuration");
    }
    std::mt19937_64 rng(cc.seed);
    std::uniform_int_distribution<std::uint32_t> any_token(0, cc.vocab_size - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Each token gets `branching` successors with skewed transition weights.
    std::vector<std::vector<std::uint32_t>> next(cc.vocab_size);
    std::vector<std::discrete_distribution<int>> pick;
    pick.reserve(cc.vocab_size);
    for (std::uint32_t t = 0; t < cc.vocab_size; ++t) {
        std::vector<double> w;
        for (int b = 0; b < cc.branching; ++b) {
            next[t].push_back(any_token(rng));
            w.push_back(std::pow(unit(rng), 2.0) + 0.05);
        }
        pick.emplace_back(w.begin(), w.end());
    }

    rng.seed(derive_seed(cc.seed, {cc.stream, 0x73747265616dull}));
    TokenDataset ds;
    ds.vocab_size = cc.vocab_size;
    ds.ids.reserve(cc.count);
    ds.ids.push_back(any_token(rng));
    std::uniform_int_distribution<std::size_t> span_len(cc.copy_min, cc.copy_max);
    while (ds.ids.size() < cc.count) {
        const std::size_t len = ds.ids.size();
        if (len > 4 * cc.copy_max && unit(rng) < cc.copy_prob) {
            const std::size_t n = span_len(rng);
            std::uniform_int_distribution<std::size_t> from(len - 4 * cc.copy_max, len - n);
            const std::size_t src = from(rng);
            for (std::size_t i = 0; i < n && ds.ids.size() < cc.count; ++i) {
                ds.ids.push_back(ds.ids[src + i]);
            }
            continue;
        }
        const auto prev = ds.ids.back();
        ds.ids.push_back(next[prev][static_cast<std::size_t>(pick[prev](rng))]);
    }
    return ds;
}

}  // namespace blkprune
