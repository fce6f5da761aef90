#include "blkprune/sparsity.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <bit>

using namespace blkprune;
using namespace blkprune::testing;

namespace {

std::vector<Index> kept_indices(const MaskMatrix& m, Index row) {
    std::vector<Index> out;
    for (Index c = 0; c < m.cols(); ++c)
        if (m(row, c)) out.push_back(c);
    return out;
}

MatD row_of(std::initializer_list<double> v) {
    MatD m(1, static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) m(0, i++) = x;
    return m;
}

// Best legal keep-set for one group by enumerating every n-of-m subset.
unsigned brute_force_group(const MatD& s, Index row, Index first, int n, int m) {
    unsigned best = 0;
    double best_sum = -1;
    for (unsigned bits = 0; bits < (1u << m); ++bits) {
        if (std::popcount(bits) != n) continue;
        double sum = 0;
        for (int k = 0; k < m; ++k)
            if (bits & (1u << k)) sum += s(row, first + k);
        if (sum > best_sum) {
            best_sum = sum;
            best = bits;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("pattern parsing and keep counts") {
    CHECK(SparsityPattern::parse("2:4") == SparsityPattern::nm(2, 4));
    CHECK(SparsityPattern::parse("4:8") == SparsityPattern::nm(4, 8));
    CHECK(SparsityPattern::parse("unstructured:0.5") == SparsityPattern::unstructured(0.5));
    CHECK(SparsityPattern::parse("unstructured-layer:0.5").per_layer);
    CHECK(SparsityPattern::parse("2:4").to_string() == "2:4");
    CHECK(SparsityPattern::parse("unstructured:0.5").to_string() == "unstructured:0.5");
    CHECK_THROWS_AS(SparsityPattern::parse("4:2"), ContractError);
    CHECK_THROWS_AS(SparsityPattern::parse("2x4"), ContractError);
    CHECK_THROWS_AS(SparsityPattern::parse("unstructured:1.5"), ContractError);
    CHECK(SparsityPattern::unstructured(0.5).keep_count(7) == 4);
    CHECK(SparsityPattern::unstructured(0.7).keep_count(10) == 3);
    CHECK(SparsityPattern::nm(2, 4).density() == 0.5);
}

TEST_CASE("select_mask examples") {
    auto m = select_mask(row_of({0.9, 0.1, 0.5, 0.7}), SparsityPattern::nm(2, 4));
    CHECK(kept_indices(m, 0) == std::vector<Index>{0, 3});

    auto u = select_mask(row_of({5, 1, 4, 2, 3, 0}), SparsityPattern::unstructured(0.5));
    CHECK(kept_indices(u, 0) == std::vector<Index>{0, 2, 4});

    auto ties = select_mask(MatD(MatD::Ones(2, 8)), SparsityPattern::nm(2, 4));
    for (Index r = 0; r < 2; ++r) CHECK(kept_indices(ties, r) == std::vector<Index>{0, 1, 4, 5});

    auto odd = select_mask(row_of({1, 2, 3, 4, 5, 6, 7}), SparsityPattern::unstructured(0.5));
    CHECK(kept_indices(odd, 0).size() == 4);
    CHECK(verify_mask(odd, SparsityPattern::unstructured(0.5)).empty());

    CHECK_THROWS_AS(select_mask(MatD(MatD::Ones(2, 6)), SparsityPattern::nm(2, 4)), DimensionError);
    MatD bad = MatD::Ones(1, 4);
    bad(0, 2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(select_mask(bad, SparsityPattern::nm(2, 4)), NumericError);
}

TEST_CASE("select_mask equals brute-force argmax for every legal N:M pattern up to m=8") {
    for (int m = 2; m <= 8; ++m) {
        for (int n = 1; n < m; ++n) {
            const auto pat = SparsityPattern::nm(n, m);
            for (std::uint64_t seed = 0; seed < 10; ++seed) {
                std::mt19937_64 rng(seed * 131 + static_cast<std::uint64_t>(m * 8 + n));
                MatD s = random_matrix(5, 3 * m, rng, 0, 1);
                auto mask = select_mask(s, pat);
                CHECK(verify_mask(mask, pat).empty());
                for (Index r = 0; r < s.rows(); ++r) {
                    for (Index g = 0; g < s.cols(); g += m) {
                        unsigned want = brute_force_group(s, r, g, n, m);
                        unsigned got = 0;
                        for (int k = 0; k < m; ++k)
                            if (mask(r, g + k)) got |= 1u << k;
                        CHECK(got == want);
                    }
                }
            }
        }
    }
}

TEST_CASE("unstructured masks match a sort oracle") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        std::mt19937_64 rng(seed);
        MatD s = random_matrix(4, 13, rng, 0, 1);
        const auto pat = SparsityPattern::unstructured(0.6);
        auto mask = select_mask(s, pat);
        for (Index r = 0; r < s.rows(); ++r) {
            std::vector<std::pair<double, Index>> v;
            for (Index c = 0; c < s.cols(); ++c) v.emplace_back(-s(r, c), c);
            std::sort(v.begin(), v.end());
            std::vector<Index> want;
            for (Index k = 0; k < 6; ++k) want.push_back(v[k].second);  // ceil(0.4 * 13) = 6
            std::sort(want.begin(), want.end());
            CHECK(kept_indices(mask, r) == want);
        }
        auto layer = select_mask(s, SparsityPattern::unstructured(0.6, true));
        CHECK(layer.count() == 21);  // ceil(0.4 * 52)
        CHECK(verify_mask(layer, SparsityPattern::unstructured(0.6, true)).empty());
    }
}

TEST_CASE("masks are deterministic and achieve exact N:M density") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    std::mt19937_64 rng(8);
    BlockMask bm;
    for (LinearId id : kLinearIds) {
        auto [r, c] = linear_shape(cfg, id);
        MatD s = random_matrix(r, c, rng);
        bm[index_of(id)] = select_mask(s, SparsityPattern::nm(4, 8));
        CHECK(select_mask(s, SparsityPattern::nm(4, 8)) == bm[index_of(id)]);
    }
    CHECK(achieved_sparsity(bm) == 0.5);
    CHECK(achieved_sparsity(full_mask(cfg)) == 0.0);
}

TEST_CASE("verify_mask reports violations") {
    MaskMatrix m(2, 8);
    m.setConstant(false);
    m(0, 0) = m(0, 1) = true;
    m(0, 4) = m(0, 5) = true;
    m(1, 0) = m(1, 1) = true;
    m(1, 4) = m(1, 5) = m(1, 6) = true;
    auto v = verify_mask(m, SparsityPattern::nm(2, 4), "blocks.0.attn_q");
    REQUIRE(v.size() == 1);
    CHECK(v[0].row == 1);
    CHECK(v[0].group == 1);
    CHECK(v[0].kept == 3);
    CHECK(v[0].describe().find("blocks.0.attn_q") != std::string::npos);
}

TEST_CASE("apply_mask: oracle, idempotence, zero rows") {
    std::mt19937_64 rng(12);
    MatD w = random_matrix(4, 8, rng);
    auto mask = select_mask(random_matrix(4, 8, rng), SparsityPattern::nm(2, 4));
    mask.row(2).setConstant(false);
    MatD e = apply_mask(w, mask);
    for (Index i = 0; i < w.rows(); ++i)
        for (Index j = 0; j < w.cols(); ++j) CHECK(e(i, j) == (mask(i, j) ? w(i, j) : 0.0));
    CHECK(e.row(2).isZero(0));
    CHECK(apply_mask(e, mask) == e);
    MaskMatrix all = MaskMatrix::Constant(4, 8, true);
    CHECK(apply_mask(w, all) == w);
    CHECK_THROWS_AS(apply_mask(w, MaskMatrix(MaskMatrix::Constant(3, 8, true))), DimensionError);
}

TEST_CASE("bit packing round trip") {
    std::mt19937_64 rng(1);
    std::bernoulli_distribution coin(0.3);
    MaskMatrix m(3, 11);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = coin(rng);
    auto packed = pack_bits(m);
    CHECK(packed.size() == 5);
    CHECK(unpack_bits(packed, 3, 11) == m);
    CHECK_THROWS_AS(unpack_bits(packed, 4, 11), CorruptionError);
}
