#include "blkprune/pruner.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cstring>

using namespace blkprune;
using namespace blkprune::testing;

namespace {

ModelConfig small_config(int layers = 2) {
    ModelConfig c;
    c.n_layers = layers;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 24;
    c.vocab_size = 40;
    c.max_seq_len = 16;
    return c;
}

TokenDataset random_tokens(std::size_t n, std::uint32_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> u(0, vocab - 1);
    TokenDataset ds;
    ds.vocab_size = vocab;
    for (std::size_t i = 0; i < n; ++i) ds.ids.push_back(u(rng));
    return ds;
}

struct Fixture {
    ModelConfig cfg = small_config();
    Checkpoint ck = random_checkpoint(cfg, 5);
    CalibrationSet calib = sample_windows(random_tokens(2000, 40, 1), 8, 12, 2);
};

PruneConfig config_for(Method m, std::uint64_t seed = 0) {
    PruneConfig pc;
    pc.method = m;
    pc.seed = seed;
    pc.ro.rounds = 2;
    pc.ro.samples = 4;
    pc.ro.lr = 1e-3;  // large enough that RO visibly moves a tiny model
    return pc;
}

bool same_bytes(const Checkpoint& a, const Checkpoint& b) {
    return a == b;
}

}  // namespace

TEST_CASE("ro_loss values and gradient") {
    MatD dense(1, 2), pruned(1, 2);
    dense << 1, 2;
    pruned << 1, 0;
    CHECK(ro_loss(dense, pruned) == 2.0);
    CHECK(ro_loss(dense, dense) == 0.0);
    CHECK_THROWS_AS(ro_loss(dense, MatD(MatD::Zero(2, 1))), DimensionError);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        MatD d = random_matrix(3, 4, rng), p = random_matrix(3, 4, rng);
        Tape<double> t;
        auto g = t.backward(ro_loss(d, t.parameter("p", p)));
        MatD want = 2.0 * (p - d) / 12.0;
        CHECK((g.at("p") - want).cwiseAbs().maxCoeff() < 1e-15);
        auto res = check_gradients({p}, [&d](Tape<double>&, const std::vector<Var<double>>& v) {
            return ro_loss(d, v[0]);
        });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("rmsprop_step examples") {
    ROConfig ro;
    MatD w(1, 3), g(1, 3), v = MatD::Zero(1, 3);
    w << 0.5, 0.5, 0.5;
    g << 1, 0, 1;
    MaskMatrix mask(1, 3);
    mask << true, true, false;
    rmsprop_step<double>(w, g, &mask, v, ro);
    CHECK(v(0, 0) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(0.5 - w(0, 0) == doctest::Approx(3e-7 / (0.1 + 1e-8)).epsilon(1e-9));
    CHECK(0.5 - w(0, 0) == doctest::Approx(3.0e-6).epsilon(1e-6));
    CHECK(w(0, 1) == 0.5);  // g = 0
    CHECK(w(0, 2) == 0.5);  // masked
    CHECK(v(0, 2) == 0.0);

    MatD v2 = MatD::Constant(1, 3, 0.04), w2 = w;
    rmsprop_step<double>(w2, MatD(MatD::Zero(1, 3)), nullptr, v2, ro);
    CHECK(w2 == w);
    CHECK(v2(0, 0) == doctest::Approx(0.99 * 0.04));

    MatD bad = g;
    bad(0, 1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(rmsprop_step<double>(w, bad, nullptr, v, ro), NumericError);
}

TEST_CASE("method parsing") {
    for (Method m : {Method::Wanda, Method::WandaPPRgs, Method::WandaPPRo, Method::WandaPP}) {
        CHECK(parse_method(method_name(m)) == m);
    }
    CHECK_THROWS_AS(parse_method("sparsegpt"), ContractError);
}

TEST_CASE("WANDA path equals select_mask(wanda_score) with no weight updates") {
    Fixture f;
    auto hs = HiddenStates<double>::embed(f.ck, f.calib);
    auto block = f.ck.blocks[0].cast<double>();
    auto stats = accumulate_activation_stats(block, hs.inputs(), f.cfg);
    auto res = prune_block(block, 0, hs.inputs(), stats, config_for(Method::Wanda), f.cfg);
    CHECK(res.latent == block);
    CHECK(res.telemetry.rounds.empty());
    CHECK_FALSE(res.telemetry.pre_ro_loss.has_value());
    for (LinearId id : kLinearIds) {
        auto want = select_mask(wanda_score(block.weight(id), stats.norm(id)), SparsityPattern::nm(2, 4));
        CHECK(res.mask[index_of(id)] == want);
        CHECK(res.block.effective.weight(id) == apply_mask(block.weight(id), want));
    }
}

TEST_CASE("dense outputs from the stats pass give the same result as recomputing them") {
    Fixture f;
    auto hs = HiddenStates<double>::embed(f.ck, f.calib);
    auto block = f.ck.blocks[0].cast<double>();
    std::vector<MatD> dense;
    auto stats = accumulate_activation_stats(block, hs.inputs(), f.cfg, &dense);
    REQUIRE(dense.size() == hs.size());
    for (std::size_t n = 0; n < dense.size(); ++n) {
        CHECK(dense[n] == block_forward(block, hs.input(n), f.cfg));
    }
    auto pc = config_for(Method::WandaPP);
    auto a = prune_block(block, 0, hs.inputs(), stats, pc, f.cfg);
    auto b = prune_block(block, 0, hs.inputs(), stats, pc, f.cfg, std::span<const MatD>(dense));
    CHECK(a.latent == b.latent);
    CHECK(a.telemetry == b.telemetry);
    REQUIRE(a.outputs.size() == hs.size());
    for (std::size_t n = 0; n < hs.size(); ++n) {
        CHECK(a.outputs[n] == block_forward(a.block.effective, hs.input(n), f.cfg));
    }
    dense.pop_back();
    CHECK_THROWS_AS(prune_block(block, 0, hs.inputs(), stats, pc, f.cfg, std::span<const MatD>(dense)),
                    ContractError);
}

TEST_CASE("K=1, M=1 takes exactly one bounded step") {
    Fixture f;
    auto hs = HiddenStates<double>::embed(f.ck, f.calib);
    auto block = f.ck.blocks[0].cast<double>();
    auto stats = accumulate_activation_stats(block, hs.inputs(), f.cfg);
    auto pc = config_for(Method::WandaPP);
    pc.ro.rounds = 1;
    pc.ro.samples = 1;
    pc.ro.lr = 3e-7;
    auto res = prune_block(block, 0, hs.inputs(), stats, pc, f.cfg);
    REQUIRE(res.telemetry.rounds.size() == 1);
    // A first RMSprop step moves an entry by lr |g| / (sqrt(1 - rho) |g| + eps).
    const double one_step = pc.ro.lr / std::sqrt(1 - pc.ro.rho);
    double max_delta = 0;
    std::size_t moved = 0;
    for (LinearId id : kLinearIds) {
        MatD d = (res.latent.weight(id) - block.weight(id)).cwiseAbs();
        max_delta = std::max(max_delta, d.maxCoeff());
        moved += static_cast<std::size_t>((d.array() > 0).count());
    }
    CHECK(moved > 0);
    CHECK(max_delta <= pc.ro.lr / pc.ro.eps);
    CHECK(max_delta <= one_step * (1 + 1e-9));
}

TEST_CASE("RO method equals WANDA_PP with alpha 0, bit for bit") {
    Fixture f;
    auto ro = config_for(Method::WandaPPRo, 3);
    auto pp = config_for(Method::WandaPP, 3);
    pp.score.alpha = 0.0;
    auto a = prune_model<double>(f.ck, f.calib, ro);
    auto b = prune_model<double>(f.ck, f.calib, pp);
    CHECK(same_bytes(a.pruned, b.pruned));
    CHECK(a.masks == b.masks);
}

TEST_CASE("prune_model: determinism, masks, lattice, report") {
    Fixture f;
    for (Method m : {Method::Wanda, Method::WandaPPRgs, Method::WandaPPRo, Method::WandaPP}) {
        for (const auto& pat : {SparsityPattern::nm(2, 4), SparsityPattern::nm(4, 8),
                                SparsityPattern::unstructured(0.5)}) {
            auto pc = config_for(m, 11);
            pc.pattern = pat;
            auto a = prune_model<double>(f.ck, f.calib, pc);
            auto b = prune_model<double>(f.ck, f.calib, pc);
            CHECK(same_bytes(a.pruned, b.pruned));
            CHECK(a.report == b.report);
            CHECK(verify_model_masks(a.masks, pat).empty());
            CHECK(a.report.sparsity == 0.5);
            CHECK(a.report.blocks.size() == 2);

            for (std::size_t l = 0; l < a.masks.size(); ++l) {
                for (LinearId id : kLinearIds) {
                    const auto& mask = a.masks[l][index_of(id)];
                    Matrix<float> eff = a.pruned.blocks[l].weight(id);
                    Matrix<float> orig = f.ck.blocks[l].weight(id);
                    if (!uses_ro(m)) {
                        CHECK(eff == apply_mask(orig, mask));
                    } else {
                        CHECK((mask.select(eff, Matrix<float>::Zero(eff.rows(), eff.cols())) == eff));
                    }
                }
                CHECK(a.pruned.blocks[l].attn_norm == f.ck.blocks[l].attn_norm);
            }
            CHECK(a.pruned.embedding == f.ck.embedding);
            CHECK(a.pruned.lm_head == f.ck.lm_head);
            if (uses_ro(m)) {
                bool changed = false;
                for (std::size_t l = 0; l < 2; ++l)
                    for (LinearId id : kLinearIds)
                        changed |= a.pruned.blocks[l].weight(id) !=
                                   apply_mask(f.ck.blocks[l].weight(id), a.masks[l][index_of(id)]);
                CHECK(changed);
                CHECK(a.report.blocks[0].rounds.size() == 2);
            }
        }
    }
}

TEST_CASE("dense reference invariance and masked entries never contribute") {
    Fixture f;
    auto hs = HiddenStates<double>::embed(f.ck, f.calib);
    auto block = f.ck.blocks[0].cast<double>();
    BlockPair<double> pair(block, f.cfg);
    auto stats = accumulate_activation_stats(block, hs.inputs(), f.cfg);
    pair.mask = detail::score_and_select<double>(pair.latent, stats, nullptr, 0.0, 8,
                                                 SparsityPattern::nm(2, 4));
    const MatD x = hs.input(0);
    const MatD dense_before = block_forward(pair.dense, x, f.cfg);
    const MatD masked_before = block_forward(pair.effective(), x, f.cfg);

    // Perturbing a masked latent entry leaves the working forward unchanged.
    Index r = 0, c = 0;
    const auto& qm = pair.mask[index_of(LinearId::AttnQ)];
    while (qm(r, c)) ++c;
    pair.latent.weight(LinearId::AttnQ)(r, c) += 10.0;
    CHECK(block_forward(pair.effective(), x, f.cfg) == masked_before);
    pair.latent.weight(LinearId::AttnQ)(r, c) -= 10.0;

    std::vector<std::size_t> subset{0, 1, 2};
    std::vector<MatD> targets;
    for (auto i : subset) targets.push_back(block_forward(pair.dense, hs.input(i), f.cfg));
    ROConfig ro;
    ro.lr = 1e-3;
    const MatD latent_q = pair.latent.weight(LinearId::AttnQ);
    regional_optimize<double>(pair, hs.inputs(), subset, targets, ro, f.cfg);
    CHECK(block_forward(pair.dense, x, f.cfg) == dense_before);
    CHECK(pair.dense == block);
    for (Index i = 0; i < qm.rows(); ++i)
        for (Index j = 0; j < qm.cols(); ++j)
            if (!qm(i, j)) CHECK(pair.latent.weight(LinearId::AttnQ)(i, j) == latent_q(i, j));
    CHECK(pair.latent.attn_norm == block.attn_norm);
}

TEST_CASE("single-epoch RO descent on most seeds") {
    ModelConfig cfg = small_config(1);
    int descents = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Checkpoint ck = random_checkpoint(cfg, 100 + seed);
        auto calib = sample_windows(random_tokens(2000, 40, seed), 8, 12, seed);
        auto pc = config_for(Method::WandaPP, seed);
        pc.ro.lr = 3e-7;
        pc.ro.rounds = 1;
        auto res = prune_model<double>(ck, calib, pc);
        const auto& rr = res.report.blocks[0].rounds.at(0);
        if (rr.post_loss <= rr.pre_loss) ++descents;
    }
    CHECK(descents >= 18);
}

TEST_CASE("report header echoes the configuration and round-trips as JSON") {
    Fixture f;
    PruneConfig pc;
    auto calib = sample_windows(random_tokens(4000, 40, 3), 128, 8, 1);
    auto h = make_report_header(pc, calib);
    CHECK(h.alpha == 100.0);
    CHECK(h.lr == 3e-7);
    CHECK(h.ro_samples == 32);
    CHECK(h.ro_samples_effective == 32);
    CHECK(h.n_samples == 128);
    CHECK(h.ro_rounds == 4);
    CHECK(h.method == "wanda++");
    CHECK(h.pattern == "2:4");

    auto res = prune_model<double>(f.ck, f.calib, config_for(Method::WandaPP));
    CHECK(res.report.ro_samples_effective == 4);
    nlohmann::json j = res.report;
    PruneReport back = j.get<PruneReport>();
    CHECK(back == res.report);
    CHECK(nlohmann::json(back).dump() == j.dump());
    CHECK(j["blocks"][0]["seconds"].is_null());
}

TEST_CASE("config validation") {
    ROConfig ro;
    ro.rho = 1.0;
    CHECK_THROWS_AS(ro.validate(), ContractError);
    ro = ROConfig{};
    ro.samples = 0;
    CHECK_THROWS_AS(ro.validate(), ContractError);
}
