#pragma once

// Sparsity patterns and score-driven mask selection.
//
// N:M groups run along the input (column) dimension of each output row.
// Unstructured sparsity compares entries within each output row, or across
// the whole layer when per_layer is set. Ties keep the lowest input index.

#include "blkprune/model.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace blkprune {

using MaskMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BlockMask = std::array<MaskMatrix, kNumLinears>;

struct SparsityPattern {
    enum class Kind { Unstructured, NM };

    Kind kind = Kind::NM;
    double ratio = 0.5;  // fraction dropped (unstructured)
    int n_keep = 2;
    int m_group = 4;
    bool per_layer = false;  // unstructured only: rank over the whole layer

    static SparsityPattern unstructured(double ratio, bool per_layer = false);
    static SparsityPattern nm(int n_keep, int m_group);
    // "unstructured:0.5", "unstructured-layer:0.5", "2:4", "4:8".
    static SparsityPattern parse(const std::string& text);

    std::string to_string() const;
    // Fraction of entries kept.
    double density() const;
    // Entries kept out of `count` compared entries (a row, or a whole layer).
    Index keep_count(Index count) const;

    friend bool operator==(const SparsityPattern&, const SparsityPattern&) = default;
};

struct MaskViolation {
    std::string layer;
    Index row = -1;    // -1 for layer-wide checks
    Index group = -1;  // -1 for unstructured rows
    Index kept = 0;
    Index expected = 0;

    std::string describe() const;
};

namespace detail {

// Indices of the `keep` largest scores in [first, first+count) of `row`,
// ordered by (score desc, index asc).
template <typename RowT>
void keep_top(const RowT& row, Index first, Index count, Index keep, std::vector<Index>& idx,
              std::vector<Index>& out) {
    idx.resize(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), first);
    auto better = [&row](Index a, Index b) {
        return row(a) > row(b) || (row(a) == row(b) && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + keep, idx.end(), better);
    out.assign(idx.begin(), idx.begin() + keep);
}

}  // namespace detail

template <typename Derived>
MaskMatrix select_mask(const Eigen::MatrixBase<Derived>& scores, const SparsityPattern& pattern) {
    if (!all_finite(scores)) throw NumericError("select_mask: non-finite score");
    const Index rows = scores.rows(), cols = scores.cols();
    MaskMatrix mask = MaskMatrix::Constant(rows, cols, false);
    std::vector<Index> idx, kept;
    if (pattern.kind == SparsityPattern::Kind::NM) {
        const Index m = pattern.m_group;
        if (cols % m != 0) {
            throw DimensionError("select_mask: input width " + std::to_string(cols) +
                                 " is not divisible by group size " + std::to_string(m));
        }
        for (Index r = 0; r < rows; ++r) {
            auto row = scores.row(r);
            for (Index g = 0; g < cols; g += m) {
                detail::keep_top(row, g, m, pattern.n_keep, idx, kept);
                for (Index c : kept) mask(r, c) = true;
            }
        }
    } else if (!pattern.per_layer) {
        const Index keep = pattern.keep_count(cols);
        for (Index r = 0; r < rows; ++r) {
            detail::keep_top(scores.row(r), 0, cols, keep, idx, kept);
            for (Index c : kept) mask(r, c) = true;
        }
    } else {
        Matrix<typename Derived::Scalar> flat = scores;
        Eigen::Map<const Eigen::Matrix<typename Derived::Scalar, 1, Eigen::Dynamic>> all(
            flat.data(), flat.size());
        detail::keep_top(all, 0, flat.size(), pattern.keep_count(flat.size()), idx, kept);
        for (Index i : kept) mask(i / cols, i % cols) = true;
    }
    return mask;
}

// Effective weight: latent where kept, +0 elsewhere. The latent is untouched.
template <typename Scalar>
Matrix<Scalar> apply_mask(const Matrix<Scalar>& weights, const MaskMatrix& mask) {
    require_same_shape(weights, mask, "apply_mask");
    return mask.select(weights, Matrix<Scalar>::Zero(weights.rows(), weights.cols()));
}

template <typename Scalar>
DecoderBlockParams<Scalar> apply_mask(const DecoderBlockParams<Scalar>& block,
                                      const BlockMask& mask) {
    DecoderBlockParams<Scalar> out = block;
    for (LinearId id : kLinearIds) out.weight(id) = apply_mask(block.weight(id), mask[index_of(id)]);
    return out;
}

std::vector<MaskViolation> verify_mask(const MaskMatrix& mask, const SparsityPattern& pattern,
                                       const std::string& layer = "");

BlockMask full_mask(const ModelConfig& cfg);

// Fraction of entries dropped.
double achieved_sparsity(const BlockMask& mask);

// Mask blob: one bit-packed tensor per layer key inside the standard envelope.
void write_masks(const std::filesystem::path& path,
                 const std::vector<std::pair<std::string, MaskMatrix>>& masks,
                 const SparsityPattern& pattern);
std::vector<std::pair<std::string, MaskMatrix>> read_masks(const std::filesystem::path& path);

std::vector<std::uint8_t> pack_bits(const MaskMatrix& mask);
MaskMatrix unpack_bits(std::span<const std::uint8_t> packed, Index rows, Index cols);

}  // namespace blkprune
