#include "blkprune/calib.hpp"
#include "blkprune/sparsity.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <set>

using namespace blkprune;
using namespace blkprune::testing;

namespace {

TokenDataset counting_stream(std::size_t n, std::uint32_t vocab) {
    TokenDataset ds;
    ds.vocab_size = vocab;
    for (std::size_t i = 0; i < n; ++i) ds.ids.push_back(static_cast<std::uint32_t>(i % vocab));
    return ds;
}

ModelConfig small_config(int layers = 2) {
    ModelConfig c;
    c.n_layers = layers;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.vocab_size = 31;
    c.max_seq_len = 16;
    return c;
}

}  // namespace

TEST_CASE("sample_windows: sizes, bounds and determinism") {
    auto ds = counting_stream(5000, 4096);
    auto a = sample_windows(ds, 128, 2048, 3);
    CHECK(a.size() == 128);
    for (std::size_t n = 0; n < a.size(); ++n) {
        CHECK(a.windows[n].size() == 2048);
        CHECK(a.starts[n] + 2048 <= ds.size());
        CHECK(a.windows[n].front() == ds.ids[a.starts[n]]);
    }
    auto tiny = sample_windows(ds, 8, 8, 3);
    CHECK(tiny.size() == 8);
    CHECK(tiny.windows[0].size() == 8);

    auto b = sample_windows(ds, 128, 2048, 3);
    CHECK(a.starts == b.starts);
    auto c = sample_windows(ds, 128, 2048, 4);
    CHECK(a.starts != c.starts);

    auto exact = sample_windows(counting_stream(16, 16), 3, 16, 0);
    for (auto s : exact.starts) CHECK(s == 0);
    CHECK_THROWS_AS(sample_windows(counting_stream(10, 16), 1, 11, 0), ContractError);
}

TEST_CASE("select_ro_subset: distinct, exhaustive case, per-round draws") {
    auto s = select_ro_subset(128, 32, 9, 0);
    CHECK(s.size() == 32);
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 32);
    for (auto i : s) CHECK(i < 128);

    auto all = select_ro_subset(16, 16, 9, 0);
    std::vector<std::size_t> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 16; ++i) CHECK(sorted[i] == i);

    CHECK(select_ro_subset(128, 32, 9, 0) == s);
    CHECK(select_ro_subset(128, 32, 9, 1) != s);
    CHECK(select_ro_subset(128, 32, 9, 1) == select_ro_subset(128, 32, 9, 1));
    CHECK_THROWS_AS(select_ro_subset(4, 5, 0, 0), ContractError);
}

TEST_CASE("feature norms: scalar oracle") {
    MatD rows(2, 2);
    rows << 3, 0, 4, 0;
    FeatureNormAccumulator<double> acc(2);
    acc.add(rows);
    CHECK(acc.norms()(0) == 5.0);
    CHECK(acc.norms()(1) == 0.0);

    FeatureNormAccumulator<double> zero(3);
    zero.add(MatD::Zero(4, 3));
    CHECK(zero.norms().isZero(0));

    std::mt19937_64 rng(1);
    MatD r = random_matrix(6, 4, rng);
    MatD perm = r.colwise().reverse();
    FeatureNormAccumulator<double> a(4), b(4);
    a.add(r);
    b.add(perm);
    CHECK((a.norms() - b.norms()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(a.add(MatD::Zero(1, 3)), DimensionError);
}

TEST_CASE("activation stats: streaming equals materialize-then-reduce") {
    auto cfg = small_config();
    std::mt19937_64 rng(7);
    auto block = random_block<double>(cfg, rng);
    std::vector<MatD> inputs;
    for (int n = 0; n < 5; ++n) inputs.push_back(random_matrix(6, cfg.d_model, rng));

    auto st = accumulate_activation_stats<double>(block, inputs, cfg);
    CHECK(st.tokens == 30);

    for (LinearId id : kLinearIds) {
        // Two-pass oracle: stack every linear input, then reduce with scalar loops.
        std::vector<MatD> acts;
        for (const auto& x : inputs) {
            Tape<double> t;
            auto bv = bind_block(t, block, Trainable::None);
            acts.push_back(block_forward(bv, t.constant(x), cfg).linear_inputs[index_of(id)].value());
        }
        const Index width = acts[0].cols();
        for (Index j = 0; j < width; ++j) {
            double sq = 0;
            for (const auto& a : acts)
                for (Index i = 0; i < a.rows(); ++i) sq += a(i, j) * a(i, j);
            const double want = std::sqrt(sq);
            CHECK(std::abs(st.norm(id)(j) - want) <= 1e-6 * std::max(want, 1e-300));
            CHECK(st.norm(id)(j) >= 0);
        }
    }
}

TEST_CASE("hidden states: propagation, sequencing and peak memory") {
    auto cfg = small_config(2);
    Checkpoint ck = random_checkpoint(cfg, 3);
    auto ds = counting_stream(400, 31);
    for (std::size_t i = 0; i < ds.ids.size(); ++i) ds.ids[i] = (i * 17 + i / 7) % 31;
    auto calib = sample_windows(ds, 6, 12, 2);

    auto hs = HiddenStates<double>::embed(ck, calib);
    CHECK(hs.size() == 6);
    CHECK(hs.input(0).rows() == 12);

    FinalizedBlock<double> fb{0, ck.blocks[0].cast<double>(), false};
    CHECK_THROWS_AS(hs.propagate(fb), SequencingError);
    fb.layer = 1;
    fb.finalized = true;
    CHECK_THROWS_AS(hs.propagate(fb), SequencingError);

    // Unpruned block: propagation equals dense block_forward.
    std::vector<MatD> before(hs.inputs().begin(), hs.inputs().end());
    fb.layer = 0;
    hs.propagate(fb);
    for (std::size_t n = 0; n < before.size(); ++n) {
        CHECK(hs.input(n) == block_forward(fb.effective, before[n], cfg));
    }
    CHECK(hs.layer() == 1);

    // A dropped weight changes the next block's inputs.
    auto hs2 = HiddenStates<double>::embed(ck, calib);
    auto mask = full_mask(cfg);
    mask[index_of(LinearId::MlpDown)].setConstant(false);
    FinalizedBlock<double> pruned{0, apply_mask(ck.blocks[0].cast<double>(), mask), true};
    hs2.propagate(pruned);
    CHECK(hs2.input(0) != hs.input(0));

    FinalizedBlock<double> second{1, ck.blocks[1].cast<double>(), true};
    hs.propagate(second);
    CHECK(hs.peak_live() <= 2 * calib.size());

    auto hs3 = HiddenStates<double>::embed(ck, calib);
    hs3.propagate(fb);
    hs3.propagate(second);
    for (std::size_t n = 0; n < hs.size(); ++n) CHECK(hs3.input(n) == hs.input(n));

    // advance() with precomputed outputs matches propagate().
    auto hs4 = HiddenStates<double>::embed(ck, calib);
    CHECK_THROWS_AS(hs4.advance(fb, {}), ContractError);
    std::vector<MatD> outs;
    for (const auto& x : hs4.inputs()) outs.push_back(block_forward(fb.effective, x, cfg));
    CHECK_THROWS_AS(hs4.advance(second, outs), SequencingError);
    hs4.advance(fb, outs);
    hs4.propagate(second);
    CHECK(hs4.layer() == 2);
    CHECK(hs4.peak_live() <= 2 * calib.size());
    for (std::size_t n = 0; n < hs.size(); ++n) CHECK(hs4.input(n) == hs.input(n));
}
