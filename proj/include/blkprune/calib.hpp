#pragma once

// Calibration data: token windows, per-block hidden states and the
// per-input-feature activation norms used by the Wanda term.

#include "blkprune/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace blkprune {

struct TokenDataset {
    std::vector<std::uint32_t> ids;
    std::uint32_t vocab_size = 0;

    std::size_t size() const { return ids.size(); }
    void validate() const;
};

// Token file: envelope kind "tokens", header {vocab_size, count}, tensor "ids" (u32).
void write_tokens(const TokenDataset& ds, const std::filesystem::path& path);
TokenDataset read_tokens(const std::filesystem::path& path);

struct CalibrationSet {
    std::vector<std::size_t> starts;  // window offsets into the source stream
    std::vector<std::vector<std::uint32_t>> windows;
    std::size_t context_len = 0;

    std::size_t size() const { return windows.size(); }
};

// n_samples windows of context_len tokens with start offsets drawn uniformly
// from [0, len - context_len], reproducible from seed.
CalibrationSet sample_windows(const TokenDataset& dataset, std::size_t n_samples,
                              std::size_t context_len, std::uint64_t seed);

// m distinct indices of [0, n_total), a fresh permutation draw per round.
std::vector<std::size_t> select_ro_subset(std::size_t n_total, std::size_t m, std::uint64_t seed,
                                          std::uint64_t round);

// Mixes a base seed with salts (layer, round, repeat ...) into a new seed.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salts);

// Per-column l2 norms over activation rows streamed in any number of chunks.
// Squares are summed in double.
template <typename Scalar>
class FeatureNormAccumulator {
  public:
    explicit FeatureNormAccumulator(Index width) : sq_(Eigen::VectorXd::Zero(width)) {}

    void add(const Matrix<Scalar>& rows) {
        if (rows.cols() != sq_.size()) {
            throw DimensionError("feature norms: activation width " + std::to_string(rows.cols()) +
                                 ", expected " + std::to_string(sq_.size()));
        }
        sq_ += rows.template cast<double>().array().square().colwise().sum().matrix().transpose();
        rows_ += static_cast<std::uint64_t>(rows.rows());
    }

    Vector<Scalar> norms() const { return sq_.array().sqrt().matrix().template cast<Scalar>(); }
    std::uint64_t rows() const { return rows_; }

  private:
    Eigen::VectorXd sq_;
    std::uint64_t rows_ = 0;
};

template <typename Scalar>
struct ActivationStats {
    std::array<Vector<Scalar>, kNumLinears> norms;  // ||X_j||_2 per input feature
    std::uint64_t tokens = 0;

    const Vector<Scalar>& norm(LinearId id) const { return norms[index_of(id)]; }
};

// One streaming pass: hooks the input of every linear layer over all N*T
// token positions and returns per-feature l2 norms. The block outputs of the
// same pass are appended to `outputs` when given.
template <typename Scalar>
ActivationStats<Scalar> accumulate_activation_stats(const DecoderBlockParams<Scalar>& block,
                                                    std::span<const Matrix<Scalar>> inputs,
                                                    const ModelConfig& cfg,
                                                    std::vector<Matrix<Scalar>>* outputs = nullptr) {
    std::vector<FeatureNormAccumulator<Scalar>> acc;
    for (LinearId id : kLinearIds) acc.emplace_back(linear_shape(cfg, id).second);
    ActivationStats<Scalar> st;
    for (const auto& x : inputs) {
        Tape<Scalar> tape;
        auto w = bind_block(tape, block, Trainable::None);
        auto tr = block_forward(w, tape.constant(x), cfg);
        for (LinearId id : kLinearIds) acc[index_of(id)].add(tr.linear_inputs[index_of(id)].value());
        if (outputs) outputs->push_back(tr.out.value());
        st.tokens += static_cast<std::uint64_t>(x.rows());
    }
    for (LinearId id : kLinearIds) st.norms[index_of(id)] = acc[index_of(id)].norms();
    return st;
}

// A block whose pruning is complete; only the pruner sets finalized.
template <typename Scalar>
struct FinalizedBlock {
    int layer = -1;
    DecoderBlockParams<Scalar> effective;  // latent (x) mask
    bool finalized = false;
};

// Per-block input hidden states X^l for every calibration window. At most
// the current and next layer's states are alive at once.
template <typename Scalar>
class HiddenStates {
  public:
    static HiddenStates embed(const Checkpoint& ckpt, const CalibrationSet& calib) {
        if (calib.size() == 0) throw ContractError("calibration set is empty");
        if (calib.context_len > static_cast<std::size_t>(ckpt.config.max_seq_len)) {
            throw ContractError("calibration context exceeds max_seq_len");
        }
        HiddenStates hs;
        hs.cfg_ = ckpt.config;
        const Matrix<Scalar> table = ckpt.embedding.template cast<Scalar>();
        for (const auto& w : calib.windows) {
            Matrix<Scalar> x(static_cast<Index>(w.size()), table.cols());
            for (std::size_t i = 0; i < w.size(); ++i) {
                if (w[i] >= static_cast<std::uint32_t>(table.rows())) {
                    throw ContractError("calibration token out of vocabulary");
                }
                x.row(static_cast<Index>(i)) = table.row(w[i]);
            }
            hs.states_.push_back(std::move(x));
        }
        hs.note_live(hs.states_.size());
        return hs;
    }

    int layer() const { return layer_; }
    std::size_t size() const { return states_.size(); }
    std::span<const Matrix<Scalar>> inputs() const { return states_; }
    const Matrix<Scalar>& input(std::size_t n) const { return states_.at(n); }

    // X^{l+1} = block(X^l) using the finalized (pruned and updated) weights.
    void propagate(const FinalizedBlock<Scalar>& block) {
        check_next(block);
        std::vector<Matrix<Scalar>> next;
        next.reserve(states_.size());
        for (const auto& x : states_) {
            next.push_back(block_forward(block.effective, x, cfg_));
            note_live(states_.size() + next.size());
        }
        states_ = std::move(next);
        note_live(states_.size());
        ++layer_;
    }

    // Same as propagate when `next` holds block(X^l) for every state, as the
    // pruner already computes them.
    void advance(const FinalizedBlock<Scalar>& block, std::vector<Matrix<Scalar>> next) {
        check_next(block);
        if (next.size() != states_.size()) {
            throw ContractError("advance: " + std::to_string(next.size()) + " outputs for " +
                                std::to_string(states_.size()) + " states");
        }
        note_live(states_.size() + next.size());
        states_ = std::move(next);
        note_live(states_.size());
        ++layer_;
    }

    // Largest number of hidden-state tensors alive at once.
    std::size_t peak_live() const { return peak_live_; }

  private:
    void check_next(const FinalizedBlock<Scalar>& block) const {
        if (!block.finalized) {
            throw SequencingError("propagate: block " + std::to_string(block.layer) +
                                  " has not been finalized");
        }
        if (block.layer != layer_) {
            throw SequencingError("propagate: expected block " + std::to_string(layer_) +
                                  ", got block " + std::to_string(block.layer));
        }
    }

    void note_live(std::size_t n) { peak_live_ = std::max(peak_live_, n); }

    ModelConfig cfg_;
    std::vector<Matrix<Scalar>> states_;
    int layer_ = 0;
    std::size_t peak_live_ = 0;
};

}  // namespace blkprune
