#include "blkprune/scoring.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cstring>

using namespace blkprune;
using namespace blkprune::testing;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.vocab_size = 16;
    c.max_seq_len = 8;
    return c;
}

bool bit_equal(const MatD& a, const MatD& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST_CASE("scalar regional gradient: ||w x|| with w=2, x=3") {
    Tape<double> t;
    MatD w(1, 1), x(1, 1);
    w << 2;
    x << 3;
    auto g = t.backward(l2_norm(matmul(t.parameter("attn_q", w), t.constant(x))));
    CHECK(g.at("attn_q")(0, 0) == 3.0);

    ModelConfig cfg = small_config();
    GradAccumulator<double> acc(cfg);
    GradStore<double> store;
    MatD full = MatD::Zero(cfg.d_model, cfg.d_model);
    full(0, 0) = g.at("attn_q")(0, 0);
    store.set("attn_q", full);
    acc.add(store);
    acc.finalize();
    CHECK(acc.samples() == 1);
    CHECK(acc.term(LinearId::AttnQ)(0, 0) == 3.0);
    CHECK_THROWS_AS(acc.add(store), SequencingError);
}

TEST_CASE("accumulator equals sqrt of summed per-sample squares") {
    auto cfg = small_config();
    std::mt19937_64 rng(2);
    auto block = random_block<double>(cfg, rng);
    std::vector<MatD> xs;
    for (int n = 0; n < 4; ++n) xs.push_back(random_matrix(5, cfg.d_model, rng));
    auto acc = accumulate_regional_gradients<double>(block, xs, cfg, 0);
    CHECK(acc.samples() == 4);
    for (LinearId id : kLinearIds) {
        auto [r, c] = linear_shape(cfg, id);
        MatD sq = MatD::Zero(r, c);
        for (const auto& x : xs) {
            MatD g = regional_gradient(block, x, cfg).at(std::string(linear_name(id)));
            for (Index i = 0; i < g.size(); ++i) sq.data()[i] += g.data()[i] * g.data()[i];
        }
        for (Index i = 0; i < sq.size(); ++i) {
            CHECK(acc.term(id).data()[i] == doctest::Approx(std::sqrt(sq.data()[i])).epsilon(1e-12));
            CHECK(acc.term(id).data()[i] >= 0);
        }
    }

    // Permuted order gives the same result.
    std::vector<MatD> rev(xs.rbegin(), xs.rend());
    auto acc2 = accumulate_regional_gradients<double>(block, rev, cfg, 0);
    for (LinearId id : kLinearIds) {
        const MatD& a = acc.term(id);
        const MatD& b = acc2.term(id);
        for (Index i = 0; i < a.size(); ++i) {
            CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-6 * std::max(std::abs(a.data()[i]), 1e-30));
        }
    }
}

TEST_CASE("zero activation paths accumulate zero") {
    auto cfg = small_config();
    std::mt19937_64 rng(3);
    auto block = random_block<double>(cfg, rng);
    block.weight(LinearId::MlpUp).setZero();  // the down projection sees an all-zero input
    std::vector<MatD> xs{random_matrix(4, cfg.d_model, rng)};
    auto acc = accumulate_regional_gradients<double>(block, xs, cfg, 0);
    CHECK(acc.term(LinearId::MlpDown).isZero(0));
    CHECK(acc.term(LinearId::MlpGate).isZero(0));
    CHECK_FALSE(acc.term(LinearId::AttnV).isZero(0));
}

TEST_CASE("non-finite gradients name block and sample") {
    auto cfg = small_config();
    std::mt19937_64 rng(4);
    auto block = random_block<double>(cfg, rng);
    std::vector<MatD> xs{random_matrix(4, cfg.d_model, rng), MatD::Constant(4, cfg.d_model, 1e300)};
    try {
        accumulate_regional_gradients<double>(block, xs, cfg, 3);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("block 3") != std::string::npos);
        CHECK(msg.find("sample 1") != std::string::npos);
    }
}

TEST_CASE("wanda_score examples") {
    MatD w(1, 2);
    w << 1, -2;
    Vector<double> n(2);
    n << 3, 0.5;
    MatD s = wanda_score(w, n);
    CHECK(s(0, 0) == 3.0);
    CHECK(s(0, 1) == 1.0);

    CHECK(wanda_score(MatD(MatD::Zero(2, 2)), Vector<double>(Vector<double>::Ones(2))).isZero(0));
    std::mt19937_64 rng(5);
    MatD r = random_matrix(3, 4, rng);
    CHECK(bit_equal(wanda_score(r, Vector<double>(Vector<double>::Ones(4))), r.cwiseAbs()));
    CHECK_THROWS_AS(wanda_score(r, Vector<double>(Vector<double>::Ones(3))), DimensionError);

    // Homogeneity in |W|.
    Vector<double> norms = random_matrix(4, 1, rng, 0, 2);
    MatD scaled = wanda_score(MatD(r * 2.5), norms);
    CHECK((scaled - 2.5 * wanda_score(r, norms)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("rgs_score examples and properties") {
    MatD w(1, 2), g(1, 2);
    w << 1, -1;
    g << 3, 2;
    Vector<double> n = Vector<double>::Ones(2);
    MatD s = rgs_score(w, n, g, 1, 2.0, 1);
    CHECK(s(0, 0) == 7.0);
    CHECK(s(0, 1) == 5.0);
    CHECK(ScoreConfig{}.alpha == 100.0);

    CHECK_THROWS_AS(rgs_score(w, n, g, 2, 2.0, 1), ContractError);
    CHECK_THROWS_AS(rgs_score(w, n, g, 1, -1.0, 1), ContractError);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::mt19937_64 rng(seed);
        MatD ww = random_matrix(4, 8, rng);
        MatD gg = random_matrix(4, 8, rng, 0, 3);
        Vector<double> nn = random_matrix(8, 1, rng, 0, 5);
        CHECK(bit_equal(rgs_score(ww, nn, gg, 16, 0.0, 16), wanda_score(ww, nn)));
        MatD prev = rgs_score(ww, nn, gg, 16, 0.0, 16);
        for (double a : {1.0, 10.0, 100.0, 1e4}) {
            MatD cur = rgs_score(ww, nn, gg, 16, a, 16);
            CHECK((cur.array() >= 0).all());
            CHECK((cur.array() >= prev.array()).all());
            prev = cur;
        }
    }
}
