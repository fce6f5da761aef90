#include "blkprune/calib.hpp"

#include "blkprune/envelope.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace blkprune {

void TokenDataset::validate() const {
    if (vocab_size == 0) throw ContractError("token dataset: vocab_size must be positive");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab_size) {
            throw ContractError("token dataset: id " + std::to_string(ids[i]) + " at position " +
                                std::to_string(i) + " is outside vocab " +
                                std::to_string(vocab_size));
        }
    }
}

void write_tokens(const TokenDataset& ds, const std::filesystem::path& path) {
    ds.validate();
    EnvelopeWriter w("tokens");
    w.header()["vocab_size"] = ds.vocab_size;
    w.header()["count"] = ds.ids.size();
    w.add_u32("ids", {static_cast<std::int64_t>(ds.ids.size())}, ds.ids);
    w.write(path);
}

TokenDataset read_tokens(const std::filesystem::path& path) {
    const Envelope env = Envelope::read(path, "tokens");
    TokenDataset ds;
    try {
        ds.vocab_size = env.header().at("vocab_size").get<std::uint32_t>();
        const auto count = env.header().at("count").get<std::uint64_t>();
        ds.ids = env.u32("ids");
        if (ds.ids.size() != count) {
            throw CorruptionError("token file: header count " + std::to_string(count) +
                                  " disagrees with payload length " +
                                  std::to_string(ds.ids.size()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("token file header: ") + e.what());
    }
    ds.validate();
    return ds;
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salts) {
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(base),
                                     static_cast<std::uint32_t>(base >> 32)};
    for (auto s : salts) {
        words.push_back(static_cast<std::uint32_t>(s));
        words.push_back(static_cast<std::uint32_t>(s >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

CalibrationSet sample_windows(const TokenDataset& dataset, std::size_t n_samples,
                              std::size_t context_len, std::uint64_t seed) {
    if (n_samples == 0 || context_len == 0) {
        throw ContractError("sample_windows: n_samples and context_len must be positive");
    }
    if (dataset.size() < context_len) {
        throw ContractError("sample_windows: dataset has " + std::to_string(dataset.size()) +
                            " tokens, fewer than context length " + std::to_string(context_len));
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> start(0, dataset.size() - context_len);
    CalibrationSet cs;
    cs.context_len = context_len;
    for (std::size_t n = 0; n < n_samples; ++n) {
        const std::size_t s = start(rng);
        cs.starts.push_back(s);
        cs.windows.emplace_back(dataset.ids.begin() + static_cast<std::ptrdiff_t>(s),
                                dataset.ids.begin() + static_cast<std::ptrdiff_t>(s + context_len));
    }
    return cs;
}

std::vector<std::size_t> select_ro_subset(std::size_t n_total, std::size_t m, std::uint64_t seed,
                                          std::uint64_t round) {
    if (m == 0 || m > n_total) {
        throw ContractError("select_ro_subset: cannot draw " + std::to_string(m) + " of " +
                            std::to_string(n_total) + " samples");
    }
    std::vector<std::size_t> idx(n_total);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(seed, {round, 0x524fu}));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(m);
    return idx;
}

}  // namespace blkprune
